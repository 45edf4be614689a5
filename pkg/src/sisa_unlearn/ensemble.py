"""Ensemble inference: max-confidence / sum aggregation and gated routing.

Constituent heads cover disjoint global class sets. Aggregation evaluates
every constituent; gated inference asks a lightweight router which single
constituent to evaluate. An InferenceStats counter tracks forward passes
so the cost contract (1 constituent per gated query vs K per aggregated
query) is observable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import InvalidLabelError
from .nn import (Architecture, ModelParameters, cnn_architecture,
                 forward_batched, mlp_architecture)
from .partition import ClassLocation
from .rng import RngState
from .training import TrainConfig, fit
from . import nn

MAX_CONFIDENCE = "max_confidence"
SUM = "sum"
AGGREGATION_MODES = (MAX_CONFIDENCE, SUM)


@dataclass
class InferenceStats:
    """Forward-pass counters, incremented per query (per sample)."""

    constituent_forwards: int = 0
    gating_forwards: int = 0
    queries: int = 0

    def reset(self) -> None:
        self.constituent_forwards = 0
        self.gating_forwards = 0
        self.queries = 0


@dataclass
class EnsembleModel:
    constituents: list[ModelParameters]
    shard_ids: list[int]                # shard owning each constituent
    num_classes: int                    # size of the global class inventory
    mode: str = MAX_CONFIDENCE
    gating: ModelParameters | None = None
    stats: InferenceStats = field(default_factory=InferenceStats)

    def __post_init__(self):
        if self.mode not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if len(self.constituents) != len(self.shard_ids):
            raise ValueError("one shard id per constituent required")

    def covered_classes(self) -> set[int]:
        out: set[int] = set()
        for c in self.constituents:
            out.update(c.output_classes)
        return out

    def by_shard(self, shard_id: int) -> ModelParameters:
        return self.constituents[self.shard_ids.index(shard_id)]


def combine_scores(prob_rows: list[np.ndarray], heads: list[tuple[int, ...]],
                   num_classes: int, mode: str) -> np.ndarray:
    """Merge per-constituent probability rows into one (N, C) score grid.

    max_confidence keeps the highest probability any constituent assigns to
    a class; sum adds them, with constituents contributing 0 outside their
    own head. Argmax ties later resolve to the lowest class id.
    """
    n = prob_rows[0].shape[0]
    scores = np.zeros((n, num_classes), dtype=np.float64)
    for probs, head in zip(prob_rows, heads):
        cols = np.asarray(head, dtype=np.int64)
        if mode == SUM:
            scores[:, cols] += probs
        else:
            scores[:, cols] = np.maximum(scores[:, cols], probs)
    return scores


def aggregate_predict_batch(ensemble: EnsembleModel, x: np.ndarray,
                            mode: str | None = None):
    """Predicted global class per input plus each constituent's probabilities."""
    if not ensemble.constituents:
        raise RuntimeError("ensemble has no constituent models")
    mode = mode or ensemble.mode
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    prob_rows = [forward_batched(c, x) for c in ensemble.constituents]
    heads = [c.output_classes for c in ensemble.constituents]
    scores = combine_scores(prob_rows, heads, ensemble.num_classes, mode)
    ensemble.stats.queries += len(x)
    ensemble.stats.constituent_forwards += len(x) * len(ensemble.constituents)
    return scores.argmax(axis=1), prob_rows


def aggregate_predict(ensemble: EnsembleModel, x: np.ndarray,
                      mode: str | None = None):
    labels, prob_rows = aggregate_predict_batch(ensemble, x[None, ...], mode)
    return int(labels[0]), [p[0] for p in prob_rows]


def gated_predict_batch(ensemble: EnsembleModel, x: np.ndarray):
    """Route each input to one constituent; returns (class ids, shard ids).

    Exactly one constituent forward per query. Routing scores for shards
    without a live constituent (decommissioned after unlearning) are masked.
    """
    if ensemble.gating is None:
        raise RuntimeError("ensemble has no gating model")
    if not ensemble.constituents:
        raise RuntimeError("ensemble has no constituent models")
    gate_probs = forward_batched(ensemble.gating, x)
    ensemble.stats.gating_forwards += len(x)
    gate_shards = np.asarray(ensemble.gating.output_classes, dtype=np.int64)
    alive = np.isin(gate_shards, ensemble.shard_ids)
    masked = np.where(alive[None, :], gate_probs, -np.inf)
    choice = gate_shards[masked.argmax(axis=1)]

    labels = np.empty(len(x), dtype=np.int64)
    for k in np.unique(choice):
        member = ensemble.by_shard(int(k))
        rows = np.flatnonzero(choice == k)
        local = nn.predict_local(member, x[rows])
        lut = np.asarray(member.output_classes, dtype=np.int64)
        labels[rows] = lut[local]
        ensemble.stats.constituent_forwards += len(rows)
    ensemble.stats.queries += len(x)
    return labels, choice


def gated_predict(ensemble: EnsembleModel, x: np.ndarray):
    labels, shards = gated_predict_batch(ensemble, x[None, ...])
    return int(labels[0]), int(shards[0])


def predict_labels(model, x: np.ndarray) -> np.ndarray:
    """Global class predictions for a model, an ensemble, or a callable."""
    if isinstance(model, EnsembleModel):
        if model.gating is not None:
            return gated_predict_batch(model, x)[0]
        return aggregate_predict_batch(model, x)[0]
    if isinstance(model, ModelParameters):
        return nn.predict_global(model, x)
    return np.asarray(model(x), dtype=np.int64)


# --- gating -----------------------------------------------------------------

def gating_architecture(base: Architecture, constituent_params: int,
                        num_shards: int) -> Architecture:
    """Pick a hidden width landing the router in 10-15% of ensemble size.

    Walks final-dense widths upward and keeps the count closest to 12.5%
    of the summed constituent parameters, preferring in-band widths.
    """
    def count(width: int) -> int:
        arch = _resize(base, width)
        return sum(int(np.prod(s)) for s in arch.tensor_shapes(num_shards).values())

    lo, hi = 0.10 * constituent_params, 0.15 * constituent_params
    target = 0.125 * constituent_params
    best = None
    for width in range(1, 4097):
        c = count(width)
        key = (not lo <= c <= hi, abs(c - target))
        if best is None or key < best[0]:
            best = (key, width)
        if c > hi:
            break
    return _resize(base, best[1])


def _resize(base: Architecture, width: int) -> Architecture:
    hidden = tuple(base.hidden[:-1]) + (width,) if base.hidden else (width,)
    return Architecture(kind=base.kind, input_shape=base.input_shape,
                        conv_channels=base.conv_channels, hidden=hidden)


def shard_targets(labels: np.ndarray,
                  metadata: dict[int, ClassLocation]) -> np.ndarray:
    """Shard id for each sample, via the class -> location table."""
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        loc = metadata.get(int(lab))
        if loc is None:
            raise InvalidLabelError(f"class {int(lab)} missing from partition metadata")
        out[i] = loc.shard_id
    return out


def train_gating(ensemble: EnsembleModel, train_ds: LabeledDataset,
                 val_ds: LabeledDataset, metadata: dict[int, ClassLocation],
                 cfg: TrainConfig, *, arch: Architecture | None = None) -> ModelParameters:
    """Train the router on shard ids only; class labels never reach it."""
    total = sum(c.param_count() for c in ensemble.constituents)
    shard_ids = tuple(sorted(ensemble.shard_ids))
    if arch is None:
        base = mlp_architecture(train_ds.input_shape[0]) \
            if len(train_ds.input_shape) == 1 else cnn_architecture(train_ds.input_shape)
        arch = gating_architecture(base, total, len(shard_ids))
    root = RngState(cfg.seed).child("gating")
    params = nn.init_params(arch, shard_ids, root.child("init"))
    opt = nn.adam_init(params, cfg.adam())
    lut = np.full(max(shard_ids) + 1, -1, dtype=np.int64)
    for i, s in enumerate(shard_ids):
        lut[s] = i
    y = lut[shard_targets(train_ds.labels, metadata)]
    y_val = lut[shard_targets(val_ds.labels, metadata)] if len(val_ds) else None
    x_val = val_ds.inputs if len(val_ds) else None
    fit(params, opt, train_ds.inputs, y, x_val, y_val, cfg, root.child("fit"))
    return params
