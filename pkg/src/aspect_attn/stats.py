"""Classification metrics and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError

METRICS = ("accuracy", "f1", "precision", "auc", "sensitivity", "specificity")
EXACT_MAX_N = 25


def auc_score(scores, labels) -> float | None:
    """
    Area under the ROC curve via the Mann-Whitney rank sum (ties count 1/2).

    Returns ``None`` when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = rankdata(s)  # average ranks
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float | None]:
    """
    Accuracy, F1, precision, AUC, sensitivity and specificity with PD (label 1)
    as the positive class; a score ``>= threshold`` predicts PD.

    Quantities whose denominator is empty are ``None`` (undefined), except
    precision, which is 0.0 when nothing is predicted positive.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0 or s.size != y.size:
        raise DomainError(f"need matching, non-empty scores and labels (got {s.size} and {y.size})")
    if not np.isin(y, (0, 1)).all():
        raise DomainError("labels must be 0 or 1")
    y = y.astype(bool)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return {
        "accuracy": (tp + tn) / s.size,
        "f1": 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else None,
        "precision": tp / (tp + fp) if (tp + fp) else 0.0,
        "auc": auc_score(s, y),
        "sensitivity": tp / (tp + fn) if (tp + fn) else None,
        "specificity": tn / (tn + fp) if (tn + fp) else None,
    }


class WilcoxonResult(NamedTuple):
    statistic: float  # min(W+, W-)
    pvalue: float     # two-sided
    n: int            # pairs left after dropping zero differences
    method: str       # "exact" or "approx"
    w_plus: float


def _signed_ranks(x, y) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    if d.ndim != 1:
        raise DomainError("x and y must be 1-D and of equal length")
    d = d[d != 0]
    if d.size == 0:
        raise DomainError("all paired differences are zero; the test is undefined")
    return rankdata(np.abs(d)), d > 0


def _exact_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign patterns giving each value of 2*W+ (index = 2*W+)."""
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x, y, method: str = "auto", min_n: int = 5) -> WilcoxonResult:
    """
    Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped. For ``n <= 25`` the null distribution of
    W+ is computed exactly (every one of the ``2**n`` sign patterns, counted
    by dynamic programming over average ranks); above that a normal
    approximation with tie and continuity corrections is used.
    """
    ranks, pos = _signed_ranks(x, y)
    n = ranks.size
    if n < min_n:
        raise DomainError(f"need at least {min_n} non-zero differences, got {n}")
    w_plus = float(ranks[pos].sum())
    w_minus = float(ranks[~pos].sum())
    stat = min(w_plus, w_minus)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_counts(doubled)
        k = int(round(2 * w_plus))
        lower = int(counts[:k + 1].sum())
        upper = int(counts[k:].sum())
        p = min(1.0, 2 * min(lower, upper) / 2 ** n)
    elif method == "approx":
        mu = n * (n + 1) / 4
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48
        if var <= 0:
            p = 1.0
        else:
            z = max(0.0, abs(w_plus - mu) - 0.5) / math.sqrt(var)
            p = min(1.0, math.erfc(z / math.sqrt(2)))
    else:
        raise DomainError(f"method must be 'auto', 'exact' or 'approx', got {method!r}")
    return WilcoxonResult(stat, p, n, method, w_plus)
