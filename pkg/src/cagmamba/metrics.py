"""Sentiment regression metrics on the [-3, 3] scale.

Binary protocols:
  * ``nn`` (negative / non-negative): every sample, class = value >= 0.
  * ``np`` (negative / positive): samples with label != 0 only, class = value > 0.

Ordinal accuracies clip to the class range and round half-to-even
(``numpy.round``).  Acc-3 buckets into (-inf, -0.1), [-0.1, 0.1], (0.1, inf).
F1 is the support-weighted mean of per-class F1 for each binary protocol.
Degenerate cases (no samples for a protocol, zero variance for Pearson)
report 0.0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class MetricReport:
    acc2_nn: float
    acc2_np: float
    f1_nn: float
    f1_np: float
    acc7: float
    acc5: float
    acc3: float
    mae: float
    corr: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def weighted_f1(truth: np.ndarray, pred: np.ndarray) -> float:
    if truth.size == 0:
        return 0.0
    total = 0.0
    for c in np.unique(truth):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
        total += f1 * np.sum(truth == c)
    return float(total / truth.size)


def _acc(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(a == b)) if a.size else 0.0


def three_class(x: np.ndarray) -> np.ndarray:
    return np.where(x < -0.1, 0, np.where(x > 0.1, 2, 1))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.sum(xc * yc) / denom, -1.0, 1.0))


def evaluate(preds, labels) -> MetricReport:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"evaluate: {p.size} predictions for {y.size} labels")
    if p.size < 2:
        raise ValueError("evaluate: need at least 2 points for correlation")

    nn_p, nn_y = p >= 0, y >= 0
    nz = y != 0
    np_p, np_y = p[nz] > 0, y[nz] > 0

    return MetricReport(
        acc2_nn=_acc(nn_p, nn_y),
        acc2_np=_acc(np_p, np_y),
        f1_nn=weighted_f1(nn_y, nn_p),
        f1_np=weighted_f1(np_y, np_p),
        acc7=_acc(np.round(np.clip(p, -3, 3)), np.round(np.clip(y, -3, 3))),
        acc5=_acc(np.round(np.clip(p, -2, 2)), np.round(np.clip(y, -2, 2))),
        acc3=_acc(three_class(p), three_class(y)),
        mae=float(np.mean(np.abs(p - y))),
        corr=pearson(p, y),
    )
