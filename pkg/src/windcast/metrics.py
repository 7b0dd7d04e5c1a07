"""Forecast evaluation metrics."""

from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    pass


class MalformedIntervalError(ValueError):
    pass


def compute_mae(y_true, y_pred) -> tuple[float, float]:
    """Mean absolute error and its fraction of the mean truth."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y_true.size == 0 or y_true.size != y_pred.size:
        raise ValueError("inputs must be equal-length and non-empty")
    mae = float(np.mean(np.abs(y_true - y_pred)))
    mean_truth = float(np.mean(y_true))
    if mean_truth == 0.0:
        raise UndefinedMetricError("MAE percentage undefined: mean truth is 0")
    return mae, mae / mean_truth


def compute_coverage(y_true, lo, hi) -> float:
    """Fraction of truths inside [lo, hi]."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    lo = np.asarray(lo, dtype=float).ravel()
    hi = np.asarray(hi, dtype=float).ravel()
    if not (y_true.size == lo.size == hi.size):
        raise ValueError("inputs must have equal lengths")
    if np.any(lo > hi):
        raise MalformedIntervalError("interval with lo > hi")
    return float(np.mean((y_true >= lo) & (y_true <= hi)))
