"""Confusion counts and the headline classification metrics.

Ratios with a zero denominator are reported as ``None`` (printed as
``undefined``) instead of being silently coerced to 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

__all__ = ["Confusion", "BinaryMetrics", "confusion", "binary_metrics", "format_table", "format_kv"]


@dataclass
class Confusion:
    """counts[t][p] = number of samples of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ConfigurationError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ConfigurationError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def confusion(preds, labels, classes: int) -> Confusion:
    """Tally a confusion matrix from parallel prediction/label sequences."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ConfigurationError("predictions and labels must have equal length")
    for name, v in (("predictions", preds), ("labels", labels)):
        if v.size and (v.min() < 0 or v.max() >= classes):
            raise ConfigurationError(f"{name} must lie in [0, {classes})")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return Confusion(counts)


@dataclass
class BinaryMetrics:
    accuracy: float
    precision: float | None
    recall: float | None
    specificity: float | None
    error_rate: float  # percent
    n: int


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def _error_rate(accuracy: float) -> float:
    """Percent error making ``accuracy + error_rate/100 == 1.0`` when binary64 allows.

    ``100*(1-a)/100`` can land an ulp off; scanning a few neighbouring floats
    finds an exact value whenever one exists.  For some accuracies none does
    (the /100 quotient grid skips the required float, e.g. a = 1/6), in which
    case the candidate closest to restoring the identity is returned, off by
    at most one ulp of 1.0.
    """
    naive = 100.0 * (1.0 - accuracy)
    best, best_gap = naive, abs(accuracy + naive / 100.0 - 1.0)
    for offset in (0, 1, -1, 2, -2, 3, -3):
        candidate = naive
        for _ in range(abs(offset)):
            candidate = math.nextafter(candidate, math.copysign(math.inf, offset))
        gap = abs(accuracy + candidate / 100.0 - 1.0)
        if gap == 0.0:
            return candidate
        if gap < best_gap:
            best, best_gap = candidate, gap
    return best


def binary_metrics(c: Confusion, positive: int = 1) -> BinaryMetrics:
    """Accuracy, precision, recall, specificity, and error rate (percent).

    Multi-class confusions are reduced one-vs-rest around ``positive``.
    """
    counts = c.counts
    k = counts.shape[0]
    if not 0 <= positive < k:
        raise ConfigurationError(f"positive class {positive} out of range for {k} classes")
    n = c.n
    if n == 0:
        raise ConfigurationError("cannot compute metrics on an empty confusion")
    tp = int(counts[positive, positive])
    fn = int(counts[positive].sum()) - tp
    fp = int(counts[:, positive].sum()) - tp
    tn = n - tp - fn - fp
    accuracy = (tp + tn) / n
    return BinaryMetrics(
        accuracy=accuracy,
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        error_rate=_error_rate(accuracy),
        n=n,
    )


_FIELDS = ("accuracy", "precision", "recall", "specificity", "error_rate", "n")


def _fmt(value) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, int):
        return str(value)
    return f"{value:.6g}"


def format_table(m: BinaryMetrics) -> str:
    """Aligned two-column plain-text table."""
    rows = [(name, _fmt(getattr(m, name))) for name in _FIELDS]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)


def format_kv(m: BinaryMetrics) -> str:
    """Machine-readable key=value block, one metric per line."""
    return "\n".join(f"{name}={_fmt(getattr(m, name))}" for name in _FIELDS)
