"""Fairness-oriented evaluation metrics.

Macro accuracy weights every class equally regardless of class frequency;
worst-class accuracy is the headline fairness number for skewed data. Empty
classes raise instead of being skipped: silently dropping one would inflate
macro accuracy exactly where it matters most.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError, ParameterError


@dataclass(frozen=True)
class ConfusionCounts:
    """K x K confusion matrix; matrix[true, pred] tallies."""

    matrix: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def true_positives(self) -> np.ndarray:
        return np.diagonal(self.matrix)

    @property
    def class_totals(self) -> np.ndarray:
        return self.matrix.sum(axis=1)


def confusion_counts(preds, labels, num_classes: int) -> ConfusionCounts:
    """Tally matrix[true, pred] over the sample."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ParameterError(f"preds shape {preds.shape} != labels shape {labels.shape}")
    preds = preds.astype(np.int64)
    labels = labels.astype(np.int64)
    if preds.size and (preds.min() < 0 or preds.max() >= num_classes):
        raise ParameterError("prediction outside [0, num_classes)")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError("label outside [0, num_classes)")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, preds), 1)
    return ConfusionCounts(matrix)


def _per_class_accuracy(c: ConfusionCounts) -> np.ndarray:
    totals = c.class_totals
    empty = np.flatnonzero(totals == 0)
    if empty.size:
        raise MetricError(f"class {int(empty[0])} has no samples; per-class accuracy undefined")
    return c.true_positives / totals


def macro_accuracy(c: ConfusionCounts) -> float:
    """(1/K) * sum_k TP_k / N_k."""
    return float(np.mean(_per_class_accuracy(c)))


def worst_class_accuracy(c: ConfusionCounts) -> float:
    """min_k TP_k / N_k."""
    return float(np.min(_per_class_accuracy(c)))


def worst_class(c: ConfusionCounts) -> tuple[int, float]:
    """(class index, accuracy) of the worst class; ties go to the lowest index."""
    acc = _per_class_accuracy(c)
    idx = int(np.argmin(acc))
    return idx, float(acc[idx])


def micro_accuracy(c: ConfusionCounts) -> float:
    """sum_k TP_k / sum_k N_k (plain accuracy)."""
    total = int(c.matrix.sum())
    if total == 0:
        raise MetricError("no samples")
    return float(np.trace(c.matrix) / total)


def group_accuracy(preds, labels, groups) -> np.ndarray:
    """Accuracy restricted to each protected group, indexed by group id."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if groups is None:
        raise ParameterError("groups are required")
    groups = np.asarray(groups, dtype=np.int64)
    if not (preds.shape == labels.shape == groups.shape):
        raise ParameterError("preds, labels, groups must have equal shapes")
    num_groups = int(groups.max()) + 1 if groups.size else 0
    out = np.empty(num_groups, dtype=np.float64)
    correct = preds == labels
    for g in range(num_groups):
        mask = groups == g
        if not mask.any():
            raise MetricError(f"group {g} has no samples")
        out[g] = correct[mask].mean()
    return out
