"""Command-line entry point: plan -> train -> unlearn -> eval -> bench.

Configuration is one JSON document; command-line flags override config
keys (flag > config > default). Run directories are self-contained:
config copy, plan, per-slice checkpoints, manifest, and reports.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .bench import BenchConfig, format_grid_table, run_benchmark_grid
from .checkpoint import Checkpoint, CheckpointStore, load_checkpoint, save_checkpoint
from .data import SplitSpec, channel_stats, load_cifar10, normalize, split
from .ensemble import MAX_CONFIDENCE, EnsembleModel
from .errors import SisaError, UnknownClassError
from .evaluation import evaluate
from .partition import PartitionPlan, make_plan, SEQUENTIAL_CLASS, POLICIES
from .pipeline import (BaselineModel, DataBundle, SisaSystem, max_workers,
                       synthetic_bundle, train_baseline, train_sisa)
from .rng import RngState
from .training import ShardTrainResult, TrainConfig
from .unlearning import (BASELINE_FULL, SISA_GATED, STRATEGIES,
                         run_unlearning)

_DATASET_KEYS = {
    "synthetic": {"kind", "n_per_class", "num_classes", "shape", "separation", "seed"},
    "cifar10": {"kind", "dir"},
}
_SPLIT_KEYS = {"train", "val", "test", "seed"}
_TRAIN_KEYS = {"max_epochs_per_slice", "patience", "eval_every", "batch_size",
               "learning_rate"}
_TOP_KEYS = {"dataset", "split", "K", "L", "policy", "strategy", "replay_ratio",
             "train", "seed", "out", "bench"}
_BENCH_KEYS = {"setups", "replay_ratios", "scls_replay_ratio", "seeds"}


def _reject_unknown(doc: dict, allowed: set[str], path: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown config key(s) at {path}: {sorted(unknown)}")


@dataclass
class RunConfig:
    dataset: dict
    split: SplitSpec
    K: int = 2
    L: int = 3
    policy: str = SEQUENTIAL_CLASS
    strategy: str = "sisa_scls_replay"
    replay_ratio: float = 0.3
    train: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "run"
    bench: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path, *, seed_override=None, out_override=None) -> "RunConfig":
        doc = json.loads(Path(path).read_text())
        _reject_unknown(doc, _TOP_KEYS, "top level")
        dataset = doc.get("dataset", {"kind": "synthetic"})
        kind = dataset.get("kind", "synthetic")
        if kind not in _DATASET_KEYS:
            raise ValueError(f"unknown dataset kind {kind!r}")
        _reject_unknown(dataset, _DATASET_KEYS[kind], "dataset")
        split_doc = doc.get("split", {})
        _reject_unknown(split_doc, _SPLIT_KEYS, "split")
        train_doc = doc.get("train", {})
        _reject_unknown(train_doc, _TRAIN_KEYS, "train")
        bench_doc = doc.get("bench", {})
        _reject_unknown(bench_doc, _BENCH_KEYS, "bench")
        seed = int(doc.get("seed", 0)) if seed_override is None else int(seed_override)
        spec = SplitSpec(split_doc.get("train", 0.7), split_doc.get("val", 0.1),
                         split_doc.get("test", 0.2), seed=split_doc.get("seed", seed))
        strategy = doc.get("strategy", "sisa_scls_replay")
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        default_policy = "balanced" if strategy == "sisa_balanced" else SEQUENTIAL_CLASS
        policy = doc.get("policy", default_policy)
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        if strategy == "sisa_balanced" and policy != "balanced":
            raise ValueError("strategy sisa_balanced requires policy 'balanced'")
        if strategy in ("sisa_scls_replay", SISA_GATED) and policy != SEQUENTIAL_CLASS:
            raise ValueError(f"strategy {strategy} requires policy 'sequential_class'")
        return cls(
            dataset={**dataset, "kind": kind}, split=spec,
            K=int(doc.get("K", 2)), L=int(doc.get("L", 3)), policy=policy,
            strategy=strategy, replay_ratio=float(doc.get("replay_ratio", 0.3)),
            train=train_doc, seed=seed,
            out=str(out_override or doc.get("out", "run")),
            bench=bench_doc,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        ratio = self.replay_ratio if self.strategy in ("sisa_scls_replay", SISA_GATED) else 0.0
        return TrainConfig(
            max_epochs_per_slice=int(t.get("max_epochs_per_slice", 15)),
            patience=t.get("patience", 7),
            eval_every=int(t.get("eval_every", 1)),
            replay_ratio=ratio,
            batch_size=int(t.get("batch_size", 64)),
            seed=self.seed,
            learning_rate=float(t.get("learning_rate", 1e-3)),
        )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "split": {"train": self.split.train_frac, "val": self.split.val_frac,
                      "test": self.split.test_frac, "seed": self.split.seed},
            "K": self.K, "L": self.L, "policy": self.policy,
            "strategy": self.strategy, "replay_ratio": self.replay_ratio,
            "train": self.train, "seed": self.seed, "out": self.out,
            "bench": self.bench,
        }


def build_bundle(cfg: RunConfig) -> DataBundle:
    ds_cfg = cfg.dataset
    if ds_cfg["kind"] == "cifar10":
        ds = load_cifar10(ds_cfg["dir"])
        train, val, test = split(ds, cfg.split)
        stats = channel_stats(train)   # train-only statistics, reused downstream
        return DataBundle(train=normalize(train, stats), val=normalize(val, stats),
                          test=normalize(test, stats))
    return synthetic_bundle(
        n_per_class=int(ds_cfg.get("n_per_class", 200)),
        num_classes=int(ds_cfg.get("num_classes", 10)),
        shape=tuple(ds_cfg.get("shape", [16])),
        separation=float(ds_cfg.get("separation", 3.0)),
        seed=int(ds_cfg.get("seed", cfg.seed)),
        split_spec=cfg.split,
    )


def _say(args, message: str) -> None:
    if not getattr(args, "quiet", False):
        print(message)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    tmp.replace(path)


# --- commands ----------------------------------------------------------------

def cmd_plan(args) -> int:
    cfg = RunConfig.from_file(args.config, seed_override=args.seed,
                              out_override=args.out)
    bundle = build_bundle(cfg)
    plan = make_plan(bundle.train.labels, cfg.K, cfg.L, cfg.policy)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "plan.json")
    _say(args, f"plan written to {out / 'plan.json'} "
               f"(imbalance ratio {plan.imbalance_ratio:.4f})")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config, seed_override=args.seed,
                              out_override=args.out)
    if args.strategy:
        if args.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {args.strategy!r}")
        cfg.strategy = args.strategy
        if args.strategy == "sisa_balanced":
            cfg.policy = "balanced"
        elif args.strategy in ("sisa_scls_replay", SISA_GATED):
            cfg.policy = "sequential_class"
    bundle = build_bundle(cfg)
    tcfg = cfg.train_config()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    store = CheckpointStore(out)
    _write_json(out / "config.json", cfg.to_dict())

    manifest: dict = {
        "strategy": cfg.strategy,
        "mode": MAX_CONFIDENCE,
        "class_names": bundle.class_names,
        "removed_classes": [],
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if cfg.strategy == BASELINE_FULL:
        model = train_baseline(bundle, tcfg)
        ckpt = Checkpoint(params=model.params, opt_state=model.opt_state,
                          shard_id=-1, slice_index=-1, epoch=0,
                          rng=RngState(tcfg.seed))
        save_checkpoint(ckpt, store.baseline_path())
        manifest["baseline"] = "baseline.ckpt"
        manifest["train_seconds"] = model.train_seconds
        target = model.params
    else:
        plan = make_plan(bundle.train.labels, cfg.K, cfg.L, cfg.policy)
        plan.save(out / "plan.json")
        system = train_sisa(bundle, plan, tcfg, store=store,
                            gated=(cfg.strategy == SISA_GATED),
                            workers=max_workers())
        manifest["K"], manifest["L"], manifest["policy"] = cfg.K, cfg.L, cfg.policy
        manifest["constituents"] = [
            {"shard_id": k,
             "output_classes": list(system.shard_results[k].head),
             "checkpoints": [f"shards/{k}/slice_{i}.ckpt"
                             for i in range(len(system.shard_results[k].checkpoints))]}
            for k in sorted(system.shard_results)
        ]
        manifest["gating"] = "gating.ckpt" if system.ensemble.gating is not None else None
        manifest["train_seconds"] = system.train_seconds
        target = system.ensemble
    _write_json(out / "manifest.json", manifest)
    report = evaluate(target, bundle.test,
                      config_tag={"K": cfg.K, "L": cfg.L, "strategy": cfg.strategy,
                                  "replay_ratio": cfg.replay_ratio})
    report.train_seconds = manifest["train_seconds"]
    _write_json(out / "reports" / "before.json", report.to_json_dict())
    _say(args, f"trained {cfg.strategy} -> {out} "
               f"(test accuracy {report.accuracy:.4f})")
    return 0


def _load_run(run_dir: Path):
    cfg = RunConfig.from_file(run_dir / "config.json")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    bundle = build_bundle(cfg)
    store = CheckpointStore(run_dir)
    tcfg = cfg.train_config()
    if manifest["strategy"] == BASELINE_FULL:
        ckpt = load_checkpoint(store.baseline_path())
        target = BaselineModel(params=ckpt.params, train_seconds=0.0,
                               removed_classes=tuple(manifest["removed_classes"]),
                               opt_state=ckpt.opt_state)
        return cfg, manifest, bundle, tcfg, store, target
    plan = PartitionPlan.load(run_dir / "plan.json")
    shard_results: dict[int, ShardTrainResult] = {}
    for entry in manifest["constituents"]:
        k = entry["shard_id"]
        ckpts = [load_checkpoint(run_dir / rel) for rel in entry["checkpoints"]]
        shard_results[k] = ShardTrainResult(
            shard_id=k, head=tuple(entry["output_classes"]), checkpoints=ckpts,
            replays=[], seconds_per_slice=[], histories=[],
            slices_trained=len(ckpts))
    shard_ids = sorted(shard_results)
    gating = None
    if manifest.get("gating"):
        gating = load_checkpoint(run_dir / manifest["gating"]).params
    ensemble = EnsembleModel(
        constituents=[shard_results[k].final.params for k in shard_ids],
        shard_ids=shard_ids, num_classes=bundle.num_classes,
        mode=manifest.get("mode", MAX_CONFIDENCE), gating=gating)
    system = SisaSystem(plan=plan, ensemble=ensemble, shard_results=shard_results,
                        cfg=tcfg, arch=ensemble.constituents[0].arch, store=store,
                        removed_classes=tuple(manifest["removed_classes"]))
    return cfg, manifest, bundle, tcfg, store, system


def cmd_unlearn(args) -> int:
    run_dir = Path(args.run_dir)
    cfg, manifest, bundle, tcfg, store, target = _load_run(run_dir)
    names = manifest["class_names"]
    if args.class_name not in names:
        raise UnknownClassError(
            f"unknown class {args.class_name!r}; valid names: {names}")
    class_id = names.index(args.class_name)
    if class_id in manifest["removed_classes"]:
        raise UnknownClassError(f"class {args.class_name!r} already removed")
    if args.seed is not None:
        tcfg = TrainConfig(
            max_epochs_per_slice=tcfg.max_epochs_per_slice, patience=tcfg.patience,
            eval_every=tcfg.eval_every, replay_ratio=tcfg.replay_ratio,
            batch_size=tcfg.batch_size, seed=int(args.seed),
            learning_rate=tcfg.learning_rate)

    new_target, outcome = run_unlearning(manifest["strategy"], target, bundle,
                                         class_id, tcfg)
    manifest["removed_classes"] = sorted(manifest["removed_classes"] + [class_id])
    if manifest["strategy"] == BASELINE_FULL:
        ckpt = Checkpoint(params=new_target.params, opt_state=new_target.opt_state,
                          shard_id=-1, slice_index=-1, epoch=0, rng=RngState(tcfg.seed))
        save_checkpoint(ckpt, store.baseline_path())
    else:
        manifest["constituents"] = [
            {"shard_id": k,
             "output_classes": list(new_target.shard_results[k].head),
             "checkpoints": [f"shards/{k}/slice_{i}.ckpt"
                             for i in range(len(new_target.shard_results[k].checkpoints))]}
            for k in sorted(new_target.shard_results)
        ]
        new_target.plan.save(run_dir / "plan.json")
    _write_json(run_dir / "manifest.json", manifest)   # atomic swap
    _write_json(run_dir / "reports" / f"unlearn_{args.class_name}.json",
                outcome.to_json_dict())
    _say(args, f"unlearned {args.class_name!r}: verdict "
               f"{'pass' if outcome.verdict else 'fail'}, "
               f"{outcome.slices_retrained} slice(s) retrained in "
               f"{outcome.seconds:.2f}s")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    cfg, manifest, bundle, _tcfg, _store, target = _load_run(run_dir)
    model = target.params if isinstance(target, BaselineModel) else target.ensemble
    report = evaluate(model, bundle.test,
                      config_tag={"strategy": manifest["strategy"]})
    _write_json(run_dir / "reports" / "eval.json", report.to_json_dict())
    _say(args, f"test accuracy {report.accuracy:.4f} "
               f"({len(bundle.test)} samples, "
               f"removed classes: {manifest['removed_classes']})")
    return 0


def cmd_bench(args) -> int:
    cfg = RunConfig.from_file(args.config, seed_override=args.seed,
                              out_override=args.out)
    seeds = tuple(cfg.seed + i for i in range(max(1, args.seeds)))
    bench_doc = cfg.bench
    train_doc = cfg.train
    bcfg = BenchConfig(
        setups=tuple(tuple(s) for s in bench_doc.get("setups",
                                                     [(2, 3), (2, 5), (3, 3), (3, 5)])),
        replay_ratios=tuple(bench_doc.get("replay_ratios", (0.2, 0.3, 0.4))),
        scls_replay_ratio=float(bench_doc.get("scls_replay_ratio", cfg.replay_ratio)),
        seeds=seeds,
        n_per_class=int(cfg.dataset.get("n_per_class", 200)),
        num_classes=int(cfg.dataset.get("num_classes", 10)),
        shape=tuple(cfg.dataset.get("shape", [16])),
        separation=float(cfg.dataset.get("separation", 3.0)),
        cifar_dir=cfg.dataset.get("dir"),
        train=TrainConfig(
            max_epochs_per_slice=int(train_doc.get("max_epochs_per_slice", 8)),
            patience=train_doc.get("patience", None),
            batch_size=int(train_doc.get("batch_size", 64)),
            learning_rate=float(train_doc.get("learning_rate", 1e-3)),
        ),
    )
    out = Path(cfg.out)
    report = run_benchmark_grid(bcfg, out_dir=out)
    _say(args, format_grid_table(report))
    _say(args, f"grid written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sisa-unlearn",
        description="Train sharded ensembles and remove whole classes from them.",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        # --quiet is also accepted after the subcommand; SUPPRESS keeps the
        # subparser from clobbering a --quiet given before it
        p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                       help="suppress progress output")
        if config:
            p.add_argument("--config", required=True, help="path to the JSON config")
            p.add_argument("--seed", type=int, default=None, help="override config seed")
            p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("plan", help="write the partition plan JSON")
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train checkpoints into a run directory")
    common(p)
    p.add_argument("--strategy", default=None, choices=STRATEGIES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unlearn", help="remove one class from a trained run")
    common(p, config=False)
    p.add_argument("run_dir", help="run directory produced by train")
    p.add_argument("--class", dest="class_name", required=True,
                   help="class name to remove")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("eval", help="evaluate the current run on the test split")
    common(p, config=False)
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run the benchmark grid")
    common(p)
    p.add_argument("--seeds", type=int, default=1,
                   help="number of seeds (rows per cell)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SisaError, ValueError, OSError) as exc:
        payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
