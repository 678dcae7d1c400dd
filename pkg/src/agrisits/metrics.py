"""Confusion matrices and the accuracy measures derived from them.

Rows index the reference class, columns the predicted class. Per-class
precision, recall and F1 treat 0/0 as 0 and flag the affected classes so
absent classes cannot silently inflate the macro average. The macro mean
runs over all classes including Background.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K] int64, rows = reference, columns = predicted
    class_names: list[str] | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        if self.class_names is None:
            self.class_names = [f"class_{i}" for i in range(self.counts.shape[0])]
        if len(self.class_names) != self.counts.shape[0]:
            raise ValueError("class_names length does not match matrix size")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts, list(self.class_names))


def confusion(pred: np.ndarray, ref: np.ndarray, n_classes: int, class_names=None) -> ConfusionMatrix:
    """Count (reference, predicted) pairs over all pixels."""
    pred = np.asarray(pred).ravel()
    ref = np.asarray(ref).ravel()
    if pred.shape != ref.shape:
        raise ValueError(f"prediction and reference differ in size: {pred.shape} vs {ref.shape}")
    for name, ids in (("prediction", pred), ("reference", ref)):
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise IndexError(f"{name} contains ids outside [0, {n_classes})")
    counts = np.bincount(ref * n_classes + pred, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes), class_names)


@dataclass
class ClassScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    defined: np.ndarray  # False where any of the three ratios was 0/0


def class_scores(cm: ConfusionMatrix) -> ClassScores:
    diag = np.diag(cm.counts).astype(np.float64)
    colsum = cm.counts.sum(axis=0).astype(np.float64)
    rowsum = cm.counts.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, colsum, out=np.zeros_like(diag), where=colsum > 0)
    recall = np.divide(diag, rowsum, out=np.zeros_like(diag), where=rowsum > 0)
    pr = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr, out=np.zeros_like(diag), where=pr > 0)
    defined = (colsum > 0) & (rowsum > 0) & (pr > 0)
    return ClassScores(precision=precision, recall=recall, f1=f1, defined=defined)


def summary(cm: ConfusionMatrix) -> tuple[float, float]:
    """(macro-averaged F1 over all classes, overall accuracy)."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    scores = class_scores(cm)
    macro_f1 = float(scores.f1.mean())
    overall = float(np.trace(cm.counts) / cm.total)
    return macro_f1, overall


def report_dict(cm: ConfusionMatrix) -> dict:
    scores = class_scores(cm)
    macro_f1, overall = summary(cm)
    return {
        "matrix": cm.counts.tolist(),
        "classes": [
            {
                "name": cm.class_names[i],
                "f1": scores.f1[i],
                "recall": scores.recall[i],
                "precision": scores.precision[i],
                "defined": bool(scores.defined[i]),
            }
            for i in range(cm.n_classes)
        ],
        "macro_f1": macro_f1,
        "overall_accuracy": overall,
        "total_pixels": cm.total,
    }


def write_report_json(path, cm: ConfusionMatrix) -> None:
    Path(path).write_text(json.dumps(report_dict(cm), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report_csv(path, cm: ConfusionMatrix) -> None:
    """Per-class table in the F1 / recall / precision column layout."""
    scores = class_scores(cm)
    macro_f1, overall = summary(cm)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "f1", "recall", "precision"])
        for i in range(cm.n_classes):
            writer.writerow(
                [cm.class_names[i], f"{scores.f1[i]:.4f}", f"{scores.recall[i]:.4f}", f"{scores.precision[i]:.4f}"]
            )
        writer.writerow(["mean_f1", f"{macro_f1:.4f}", "", ""])
        writer.writerow(["overall_accuracy", f"{overall:.4f}", "", ""])
