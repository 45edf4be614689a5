"""Evaluation metrics: accuracy, per-class precision/recall, confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .ensemble import predict_labels


@dataclass
class EvaluationReport:
    accuracy: float
    precision: np.ndarray              # per original class id
    recall: np.ndarray
    confusion: np.ndarray              # rows true class, columns predicted
    train_seconds: float | None = None
    avg_retrain_seconds: float | None = None
    config_tag: dict | None = None

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "confusion_matrix": self.confusion.tolist(),
            "train_seconds": self.train_seconds,
            "avg_retrain_seconds": self.avg_retrain_seconds,
            "config": self.config_tag,
        }


def confusion_matrix(true_labels, predicted, num_classes: int) -> np.ndarray:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (true_labels, predicted), 1)
    return matrix


def evaluate(model, ds: LabeledDataset, config_tag: dict | None = None) -> EvaluationReport:
    """Deterministic metrics for a model, ensemble, or callable predictor."""
    if len(ds) == 0:
        raise ValueError("dataset must be nonempty")
    pred = predict_labels(model, ds.inputs)
    matrix = confusion_matrix(ds.labels, pred, ds.num_classes)
    diag = np.diag(matrix).astype(np.float64)
    col = matrix.sum(axis=0).astype(np.float64)
    row = matrix.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, diag / col, 0.0)
        recall = np.where(row > 0, diag / row, 0.0)
    return EvaluationReport(
        accuracy=float(diag.sum() / len(ds)),
        precision=precision, recall=recall, confusion=matrix,
        config_tag=config_tag,
    )
