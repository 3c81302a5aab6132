"""Multiclass evaluation: confusion matrices, per-class precision/recall/F1,
macro-F1, accuracy, and the 4-class -> binary collapse.

Labels here are 1-based (1..K), matching the external file convention.
Degenerate 0/0 ratios resolve to 0, and macro-F1 averages over all K
classes including absent ones.
"""

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predicted classes."""

    k: int
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionMatrix)
            and self.k == other.k
            and np.array_equal(self.counts, other.counts)
        )


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    per_class: list  # (precision, recall, f1) per class, in class order
    macro_f1: float
    accuracy: float

    def to_dict(self):
        return {
            "confusion": self.confusion.counts.tolist(),
            "per_class": [{"p": p, "r": r, "f1": f} for p, r, f in self.per_class],
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def format_table(self):
        """Aligned plain-text rendering (6 decimals, like the JSON)."""
        lines = []
        width = max(5, len(str(self.confusion.counts.max())))
        lines.append("confusion (rows=true, cols=predicted):")
        for row in self.confusion.counts:
            lines.append("  " + " ".join(f"{int(v):>{width}d}" for v in row))
        lines.append(f"{'class':>5} {'precision':>10} {'recall':>10} {'f1':>10}")
        for c, (p, r, f) in enumerate(self.per_class, start=1):
            lines.append(f"{c:>5} {p:>10.6f} {r:>10.6f} {f:>10.6f}")
        lines.append(f"macro_f1 {self.macro_f1:.6f}")
        lines.append(f"accuracy {self.accuracy:.6f}")
        return "\n".join(lines)


def confusion_matrix(true_labels, predicted_labels, k):
    """Count matrix from two equal-length 1-based label sequences."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError("label sequences must be 1-D and equal length")
    if t.size and (t.min() < 1 or t.max() > k or p.min() < 1 or p.max() > k):
        raise ValueError(f"labels must lie in 1..{k}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t - 1, p - 1), 1)
    return ConfusionMatrix(k=k, counts=counts)


def precision_recall_f1(cm, c):
    """(precision, recall, f1) for 1-based class ``c``; 0/0 -> 0."""
    if not 1 <= c <= cm.k:
        raise ValueError(f"class {c} outside 1..{cm.k}")
    i = c - 1
    tp = float(cm.counts[i, i])
    fp = float(cm.counts[:, i].sum()) - tp
    fn = float(cm.counts[i, :].sum()) - tp
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def macro_f1(cm):
    """Arithmetic mean of the class-wise F1 scores."""
    return sum(precision_recall_f1(cm, c)[2] for c in range(1, cm.k + 1)) / cm.k


def accuracy(cm):
    """trace / N; errors on an empty matrix."""
    n = cm.total
    if n == 0:
        raise ValueError("accuracy undefined for an empty confusion matrix")
    return float(np.trace(cm.counts)) / n


def collapse_to_binary(true_labels, predicted_labels):
    """2x2 matrix with class 1 (control) negative, classes 2-4 positive.

    Cross-subtype confusions among the pathogenic classes 2-4 count as
    correct positives. Binary labels: 1 = negative, 2 = positive.
    """
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.size and (t.min() < 1 or t.max() > 4 or p.min() < 1 or p.max() > 4):
        raise ValueError("labels must lie in 1..4")
    t2 = np.where(t == 1, 1, 2)
    p2 = np.where(p == 1, 1, 2)
    return confusion_matrix(t2, p2, 2)


def report(true_labels, predicted_labels, k):
    """Full MetricsReport for a prediction stream."""
    cm = confusion_matrix(true_labels, predicted_labels, k)
    per_class = [precision_recall_f1(cm, c) for c in range(1, k + 1)]
    return MetricsReport(
        confusion=cm,
        per_class=per_class,
        macro_f1=sum(f for _, _, f in per_class) / k,
        accuracy=accuracy(cm),
    )


def report_from_confusion(cm):
    """MetricsReport derived from an existing confusion matrix."""
    per_class = [precision_recall_f1(cm, c) for c in range(1, cm.k + 1)]
    return MetricsReport(
        confusion=cm,
        per_class=per_class,
        macro_f1=sum(f for _, _, f in per_class) / cm.k,
        accuracy=accuracy(cm),
    )
