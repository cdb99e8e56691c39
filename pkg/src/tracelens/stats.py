"""Wilcoxon signed-rank test and rank-correlation helpers."""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats as sps

EXACT_MAX_N = 25


class WilcoxonResult(NamedTuple):
    statistic: float
    p_value: float
    n: int
    method: str


class RankAgreement(NamedTuple):
    spearman: float
    kendall: float


def _doubled_ranks(absdiff: np.ndarray) -> np.ndarray:
    # average ranks are integers or half-integers; doubling keeps them integral
    return np.rint(2.0 * sps.rankdata(absdiff, method="average")).astype(np.int64)


def _exact_lower_tail(ranks2: np.ndarray, t2: int) -> int:
    """Number of sign assignments whose positive-rank sum (doubled) is <= t2."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    upper = 0
    for r in ranks2.tolist():
        counts[r : upper + r + 1] = counts[r : upper + r + 1] + counts[: upper + 1]
        upper += r
    return int(sum(counts[: t2 + 1]))


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float] | None = None) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are discarded.  Absolute differences are ranked with
    average ranks for ties.  The statistic is ``min(W+, W-)``.  For at most
    25 non-zero pairs the p-value is exact (the null distribution is
    enumerated by counting sign assignments); above that a normal
    approximation with tie-corrected variance and continuity correction is
    used.  If every difference is zero the result is ``W = 0, p = 1``.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x if y is None else x - np.asarray(y, dtype=np.float64)
    if y is not None and np.shape(y) != x.shape:
        raise ValueError("x and y must have equal length")
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    ranks2 = _doubled_ranks(np.abs(d))
    w_plus2 = int(ranks2[d > 0].sum())
    w_minus2 = int(ranks2.sum()) - w_plus2
    t2 = min(w_plus2, w_minus2)
    if n <= EXACT_MAX_N:
        count = _exact_lower_tail(ranks2, t2)
        p = min(1.0, 2 * count / 2**n)
        return WilcoxonResult(t2 / 2.0, p, n, "exact")
    t = t2 / 2.0
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks2, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    if var <= 0:
        return WilcoxonResult(t, 1.0, n, "approx")
    z = (t - mean + 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * sps.norm.cdf(min(z, 0.0)))
    return WilcoxonResult(t, float(p), n, "approx")


def rank_agreement(scores_a: Sequence[float], scores_b: Sequence[float]) -> RankAgreement:
    """Spearman rho and Kendall tau-b with average-rank tie handling."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"score lists must be 1-d with equal length, got {a.shape} and {b.shape}")
    if a.size < 3:
        raise ValueError("need at least 3 scores")
    rho = sps.spearmanr(a, b).statistic
    tau = sps.kendalltau(a, b, variant="b").statistic
    return RankAgreement(float(rho), float(tau))
