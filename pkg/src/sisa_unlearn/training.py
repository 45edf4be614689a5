"""Slice-by-slice training with replay, early stopping, and checkpoints.

A shard model trains on its slices in order; each slice's batch is the
slice itself merged with a replay buffer drawn once from all prior slices.
After every slice the full (parameters, optimizer, cursor, rng) state is
checkpointed, which is what makes rollback retraining exact: resuming from
checkpoint l with the same seeds reproduces the uninterrupted run bit for
bit, because every random stream is derived from (seed, shard, slice,
epoch) coordinates rather than consumed sequentially.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, CheckpointStore
from .data import LabeledDataset
from .errors import InvalidLabelError, NumericFault
from .nn import (AdamConfig, Architecture, ModelParameters, OptimizerState,
                 adam_init, adam_step, cnn_architecture, init_params,
                 loss_and_grad, mean_loss, mlp_architecture)
from .partition import PartitionPlan, SliceLayout
from .rng import RngState


@dataclass(frozen=True)
class TrainConfig:
    """Budget and hyperparameters for one training run.

    patience=None disables early stopping entirely (fixed epoch budget,
    final-epoch parameters kept); with a patience the best-validation
    parameters seen so far are the ones kept.
    """

    max_epochs_per_slice: int = 20
    patience: int | None = 7
    eval_every: int = 1            # epochs between validation checks
    replay_ratio: float = 0.0
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 (or None to disable)")
        if not 0.0 <= self.replay_ratio <= 1.0:
            raise ValueError("replay_ratio must lie in [0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.learning_rate)


@dataclass
class ReplayBuffer:
    """Sample indices drawn from a shard's earlier slices."""

    indices: np.ndarray
    source_slices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def early_stop_monitor(history, patience: int) -> bool:
    """True once the best loss has gone `patience` evaluations unimproved.

    Improvement is strict (<); equal losses count as stalls.
    """
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best = np.inf
    best_i = -1
    for i, v in enumerate(history):
        if v < best:
            best, best_i = v, i
    return (len(history) - 1 - best_i) >= patience


def sample_replay(layout: SliceLayout, slice_index: int, ratio: float,
                  rng: RngState, labels: np.ndarray) -> ReplayBuffer:
    """Replay buffer for a slice: round(ratio * total prior samples) indices.

    Composition is stratified per class proportionally to availability in
    the prior slices (largest-remainder, ties to the lower class id), drawn
    without replacement. Slice 0 yields an empty buffer.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("replay ratio must lie in [0, 1]")
    empty = ReplayBuffer(np.empty(0, np.int64), np.empty(0, np.int64))
    if slice_index == 0 or ratio == 0.0:
        return empty

    prior = [(j, layout.slices[j]) for j in range(slice_index) if len(layout.slices[j])]
    if not prior:
        return empty
    pool_idx = np.concatenate([s for _, s in prior])
    pool_src = np.concatenate([np.full(len(s), j, np.int64) for j, s in prior])
    total = int(np.floor(ratio * len(pool_idx) + 0.5))
    if total == 0:
        return empty

    pool_labels = labels[pool_idx]
    class_ids = np.unique(pool_labels)
    avail = {int(c): int((pool_labels == c).sum()) for c in class_ids}
    exact = {c: total * n / len(pool_idx) for c, n in avail.items()}
    quotas = {c: int(np.floor(q)) for c, q in exact.items()}
    leftover = total - sum(quotas.values())
    for c in sorted(exact, key=lambda c: (-(exact[c] - quotas[c]), c))[:leftover]:
        quotas[c] += 1

    picks = []
    for c in sorted(quotas):
        members = np.flatnonzero(pool_labels == c)
        perm = rng.child("class", c).generator().permutation(len(members))
        picks.append(members[perm[:quotas[c]]])
    chosen = np.sort(np.concatenate(picks))
    return ReplayBuffer(indices=pool_idx[chosen], source_slices=pool_src[chosen])


@dataclass
class FitResult:
    epochs: int
    steps: int
    history: list[float]
    best_val: float | None
    seconds: float


def fit(params: ModelParameters, opt: OptimizerState,
        x: np.ndarray, y: np.ndarray,
        x_val: np.ndarray | None, y_val: np.ndarray | None,
        cfg: TrainConfig, rng: RngState) -> FitResult:
    """Train in place for up to max_epochs_per_slice epochs.

    One deterministic permutation per epoch; validation loss is checked
    every `eval_every` epochs and drives the patience counter.
    """
    if len(x) == 0:
        return FitResult(0, 0, [], None, 0.0)
    has_val = x_val is not None and len(x_val) > 0
    history: list[float] = []
    best_val = np.inf
    best_snapshot = None
    steps = 0
    epochs_run = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs_per_slice):
        perm = rng.child("shuffle", epoch).generator().permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            take = perm[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(params, x[take], y[take])
            if not np.isfinite(loss):
                raise NumericFault(f"non-finite loss at epoch {epoch}")
            adam_step(params, grads, opt)
            steps += 1
        epochs_run = epoch + 1
        if has_val and (epoch + 1) % cfg.eval_every == 0:
            vloss = mean_loss(params, x_val, y_val)
            history.append(vloss)
            if cfg.patience is not None:
                if vloss < best_val:
                    best_val = vloss
                    best_snapshot = (params.copy(), opt.copy())
                if early_stop_monitor(history, cfg.patience):
                    break
    if cfg.patience is not None and best_snapshot is not None:
        best_params, best_opt = best_snapshot
        for k in params.tensors:
            params.tensors[k][...] = best_params.tensors[k]
        for k in opt.m:
            opt.m[k][...] = best_opt.m[k]
            opt.v[k][...] = best_opt.v[k]
        opt.step = best_opt.step
    seconds = time.perf_counter() - t0
    return FitResult(epochs_run, steps, history,
                     None if not history else float(min(history)), seconds)


@dataclass
class ShardTrainResult:
    shard_id: int
    head: tuple[int, ...]
    checkpoints: list[Checkpoint]        # one per trained slice, in order
    replays: list[ReplayBuffer]
    seconds_per_slice: list[float]
    histories: list[list[float]]
    slices_trained: int

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    @property
    def seconds(self) -> float:
        return float(sum(self.seconds_per_slice))


def default_architecture(input_shape: tuple[int, ...]) -> Architecture:
    if len(input_shape) == 1:
        return mlp_architecture(input_shape[0])
    return cnn_architecture(input_shape)


def _local_labels(labels: np.ndarray, head: tuple[int, ...]) -> np.ndarray:
    lut = {c: i for i, c in enumerate(head)}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        if int(lab) not in lut:
            raise InvalidLabelError(f"label {int(lab)} outside shard head {head}")
        out[i] = lut[int(lab)]
    return out


def train_shard(plan: PartitionPlan, shard_id: int,
                train_ds: LabeledDataset, val_ds: LabeledDataset,
                cfg: TrainConfig, *,
                arch: Architecture | None = None,
                store: CheckpointStore | None = None,
                start_slice: int = 0,
                initial: Checkpoint | None = None,
                head: tuple[int, ...] | None = None) -> ShardTrainResult:
    """Train one shard's model over slices start_slice..L-1.

    With `initial` given, training resumes from that checkpoint's exact
    parameter/optimizer state; otherwise the model is freshly initialized
    from the shard's seed. Validation is the global split filtered to the
    shard's classes. One checkpoint is produced per trained slice.
    """
    assignment = plan.assignments[shard_id]
    layout = plan.layouts[shard_id]
    if head is None:
        head = tuple(sorted(assignment.class_ids))
    if not head:
        raise ValueError(f"shard {shard_id} has no classes to train on")
    root = RngState(cfg.seed).child("shard", shard_id)
    if initial is not None:
        params = initial.params.copy()
        opt = initial.opt_state.copy()
        if params.output_classes != tuple(head):
            raise ValueError("initial checkpoint head does not match requested head")
    else:
        if arch is None:
            arch = default_architecture(train_ds.input_shape)
        params = init_params(arch, head, root.child("init"))
        opt = adam_init(params, cfg.adam())

    val_part = val_ds.restricted_to(head)
    x_val = val_part.inputs if len(val_part) else None
    y_val = _local_labels(val_part.labels, head) if len(val_part) else None

    labels = train_ds.labels
    checkpoints: list[Checkpoint] = []
    replays: list[ReplayBuffer] = []
    seconds: list[float] = []
    histories: list[list[float]] = []
    for ell in range(start_slice, plan.L):
        slice_rng = root.child("slice", ell)
        replay = sample_replay(layout, ell, cfg.replay_ratio,
                               slice_rng.child("replay"), labels)
        idx = np.concatenate([layout.slices[ell], replay.indices]) \
            if len(replay) else layout.slices[ell]
        x = train_ds.inputs[idx]
        y = _local_labels(labels[idx], head)
        try:
            res = fit(params, opt, x, y, x_val, y_val, cfg, slice_rng)
        except NumericFault as exc:
            raise NumericFault(f"shard {shard_id} slice {ell}: {exc}") from exc
        ckpt = Checkpoint(params=params.copy(), opt_state=opt.copy(),
                          shard_id=shard_id, slice_index=ell,
                          epoch=res.epochs, rng=root)
        if store is not None:
            store.save_slice(ckpt)
        checkpoints.append(ckpt)
        replays.append(replay)
        seconds.append(res.seconds)
        histories.append(res.history)
    return ShardTrainResult(shard_id=shard_id, head=tuple(head),
                            checkpoints=checkpoints, replays=replays,
                            seconds_per_slice=seconds, histories=histories,
                            slices_trained=plan.L - start_slice)


def train_model(train_ds: LabeledDataset, val_ds: LabeledDataset,
                classes, cfg: TrainConfig, *,
                arch: Architecture | None = None,
                rng: RngState | None = None):
    """Plain (non-sliced) training of one model over the given classes."""
    head = tuple(sorted(int(c) for c in classes))
    if arch is None:
        arch = default_architecture(train_ds.input_shape)
    root = rng if rng is not None else RngState(cfg.seed).child("model")
    params = init_params(arch, head, root.child("init"))
    opt = adam_init(params, cfg.adam())
    train_part = train_ds.restricted_to(head)
    val_part = val_ds.restricted_to(head)
    y = _local_labels(train_part.labels, head)
    x_val = val_part.inputs if len(val_part) else None
    y_val = _local_labels(val_part.labels, head) if len(val_part) else None
    res = fit(params, opt, train_part.inputs, y, x_val, y_val, cfg, root.child("fit"))
    return params, opt, res
