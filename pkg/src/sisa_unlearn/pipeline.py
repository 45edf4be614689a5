"""End-to-end orchestration: datasets -> plan -> trained system.

A SisaSystem bundles the partition plan, the per-shard checkpoint chains,
and the inference ensemble. It is the object unlearning strategies operate
on; they return fresh systems rather than mutating in place.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .checkpoint import CheckpointStore, save_checkpoint
from .data import LabeledDataset, SplitSpec, generate_synthetic, split
from .ensemble import MAX_CONFIDENCE, EnsembleModel, train_gating
from .nn import Architecture, ModelParameters
from .partition import PartitionPlan, make_plan
from .training import ShardTrainResult, TrainConfig, train_model, train_shard


@dataclass
class DataBundle:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def class_names(self) -> list[str]:
        return self.train.class_names


def synthetic_bundle(n_per_class: int = 1000, num_classes: int = 10,
                     shape=(16,), separation: float = 3.0,
                     seed: int = 0,
                     split_spec: SplitSpec | None = None) -> DataBundle:
    ds = generate_synthetic(n_per_class, num_classes, shape, separation, seed)
    spec = split_spec or SplitSpec(0.7, 0.1, 0.2, seed=seed)
    train, val, test = split(ds, spec)
    return DataBundle(train=train, val=val, test=test)


@dataclass
class SisaSystem:
    """A trained sharded ensemble plus everything needed to unlearn from it."""

    plan: PartitionPlan
    ensemble: EnsembleModel
    shard_results: dict[int, ShardTrainResult]
    cfg: TrainConfig
    arch: Architecture
    store: CheckpointStore | None = None
    train_seconds: float = 0.0
    gating_seconds: float = 0.0
    removed_classes: tuple[int, ...] = ()


def max_workers() -> int:
    value = os.environ.get("SISA_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def train_sisa(data: DataBundle, plan: PartitionPlan, cfg: TrainConfig, *,
               arch: Architecture | None = None,
               mode: str = MAX_CONFIDENCE,
               gated: bool = False,
               store: CheckpointStore | None = None,
               workers: int | None = None) -> SisaSystem:
    """Train every shard (optionally in parallel) and assemble the ensemble.

    Per-shard RNG streams derive from (seed, shard id), so the trained
    parameters are identical whether shards run serially or concurrently.
    """
    workers = workers if workers is not None else max_workers()

    def run(shard_id: int) -> ShardTrainResult:
        return train_shard(plan, shard_id, data.train, data.val, cfg,
                           arch=arch, store=store)

    shard_ids = [a.shard_id for a in plan.assignments if a.class_ids]
    if workers > 1 and len(shard_ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, shard_ids))
    else:
        results = [run(k) for k in shard_ids]
    shard_results = {r.shard_id: r for r in results}

    ensemble = EnsembleModel(
        constituents=[shard_results[k].final.params for k in shard_ids],
        shard_ids=list(shard_ids),
        num_classes=data.num_classes,
        mode=mode,
    )
    system = SisaSystem(
        plan=plan, ensemble=ensemble, shard_results=shard_results,
        cfg=cfg, arch=shard_results[shard_ids[0]].final.params.arch,
        store=store,
        train_seconds=sum(r.seconds for r in results),
    )
    if gated:
        import time
        t0 = time.perf_counter()
        ensemble.gating = train_gating(ensemble, data.train, data.val,
                                       plan.metadata, cfg)
        system.gating_seconds = time.perf_counter() - t0
        system.train_seconds += system.gating_seconds
        if store is not None:
            _save_gating(system)
    return system


def _save_gating(system: SisaSystem) -> None:
    from .checkpoint import Checkpoint
    from .nn import adam_init
    from .rng import RngState
    gating = system.ensemble.gating
    ckpt = Checkpoint(params=gating, opt_state=adam_init(gating, system.cfg.adam()),
                      shard_id=-1, slice_index=-1, epoch=0,
                      rng=RngState(system.cfg.seed).child("gating"))
    save_checkpoint(ckpt, system.store.gating_path())


def train_sisa_from_scratch(data: DataBundle, K: int, L: int, policy: str,
                            cfg: TrainConfig, **kwargs) -> SisaSystem:
    plan = make_plan(data.train.labels, K, L, policy)
    return train_sisa(data, plan, cfg, **kwargs)


@dataclass
class BaselineModel:
    """Single model over every class, the full-retraining reference point."""

    params: ModelParameters
    train_seconds: float
    removed_classes: tuple[int, ...] = ()
    opt_state: object | None = None


def train_baseline(data: DataBundle, cfg: TrainConfig, *,
                   arch: Architecture | None = None,
                   classes=None) -> BaselineModel:
    head = sorted(classes) if classes is not None else sorted(set(int(c) for c in data.train.labels))
    params, opt, res = train_model(data.train, data.val, head, cfg, arch=arch)
    return BaselineModel(params=params, train_seconds=res.seconds, opt_state=opt)
