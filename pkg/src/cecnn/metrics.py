"""Evaluation metrics: RMSE, MAE, accuracy and rank-based AUC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    n: int


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("metric of empty input")
    return a, b


def rmse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


def accuracy(probs, labels, threshold: float = 0.5) -> float:
    p, y = _pair(probs, labels)
    return float(np.mean((p >= threshold).astype(np.float64) == y))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score of a positive > score of a negative), ties count 1/2."""
    s, y = _pair(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks resolve ties as 1/2
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
