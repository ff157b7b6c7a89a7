"""Ranking metrics: pairwise AUC and top-k confusion counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._validation import check_binary_labels


def roc_auc(scores, labels) -> float:
    """Probability that a positive outranks a negative, ties counted 1/2.

    Equals the normalized Mann-Whitney U statistic.
    """
    scores = np.asarray(scores, dtype=float)
    y = check_binary_labels(labels)
    if scores.shape[0] != y.shape[0]:
        raise ValueError("scores and labels must agree in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc requires both classes present")
    ranks = rankdata(scores)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion_at_k(scores, labels, k: int) -> ConfusionCounts:
    """Confusion counts when the top-k scores are called positive.

    Ties are broken by ascending position (the package-wide tie-break order).
    """
    scores = np.asarray(scores, dtype=float)
    y = check_binary_labels(labels)
    n = len(scores)
    if not 0 < k <= n:
        raise ValueError(f"k must lie in (0, {n}]")
    order = np.argsort(-scores, kind="stable")
    predicted = np.zeros(n, dtype=bool)
    predicted[order[:k]] = True
    tp = int(np.sum(predicted & (y == 1)))
    fp = int(np.sum(predicted & (y == 0)))
    fn = int(np.sum(~predicted & (y == 1)))
    tn = int(np.sum(~predicted & (y == 0)))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)
