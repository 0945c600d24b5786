"""Accuracy and support-weighted F1 from a confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1_per_class: np.ndarray
    support: np.ndarray
    confusion: np.ndarray  # rows: true class, columns: predicted class

    def f1(self, average: str = "weighted") -> float:
        if average == "weighted":
            return self.weighted_f1
        if average == "macro":
            return self.macro_f1
        raise ValueError(f"unknown F1 average {average!r}")

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "per_class": [
                {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
                for p, r, f, s in zip(self.precision, self.recall, self.f1_per_class, self.support)
            ],
            "confusion": self.confusion.tolist(),
        }


def compute_metrics(predictions, labels, num_classes: int) -> MetricsReport:
    preds = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise DataError(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        raise DataError("cannot compute metrics on an empty set")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise DataError(f"{name} outside 0..{num_classes - 1}")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    present = support > 0
    weighted = float(np.sum(f1[present] * support[present]) / support[present].sum())
    return MetricsReport(
        accuracy=float(tp.sum() / confusion.sum()),
        weighted_f1=weighted,
        macro_f1=float(f1[present].mean()),
        precision=precision,
        recall=recall,
        f1_per_class=f1,
        support=support,
        confusion=confusion,
    )
