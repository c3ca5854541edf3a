"""Error rates, weight concentration, rank correlation and importance aggregation."""
from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import stats

from .ensemble import compute_weights


def error_rate(predicted, truth) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.size < 1:
        raise ValueError("predicted and true labels must have equal, non-zero length")
    return float(np.count_nonzero(predicted != truth)) / predicted.size


def concentration_fraction(weights, mass=0.9) -> float:
    """Smallest fraction of classifiers whose largest weights reach ``mass`` of the total."""
    w = np.sort(np.asarray(weights, dtype=np.float64))[::-1]
    total = w.sum()
    csum = np.cumsum(w)
    # tolerate rounding in the cumulative sum right at the boundary
    need = int(np.searchsorted(csum, mass * total * (1 - 1e-12), side="left")) + 1
    return min(need, len(w)) / len(w)


def weight_concentration(distances, p_grid, mass=0.9):
    """``[(p, fraction)]`` for every ``p`` in ``p_grid``."""
    return [(float(p), concentration_fraction(compute_weights(distances, p).weights, mass)) for p in p_grid]


def spearman(a, b) -> float:
    """Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("spearman needs two equal-length vectors of length >= 2")
    ra = stats.rankdata(a, method="average")
    rb = stats.rankdata(b, method="average")
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0:
        raise ValueError("zero rank variance: all values tied")
    return float(np.clip(float(ra @ rb) / den, -1.0, 1.0))


def mean_spearman(D, D_ref, exclude_diagonal=False):
    """Average over columns of the per-column rank correlation of ``D`` with ``D_ref``.

    Columns with no rank variance in either matrix are skipped.
    """
    D = np.asarray(D)
    D_ref = np.asarray(D_ref)
    rhos = []
    for j in range(D.shape[1]):
        keep = np.ones(D.shape[0], bool)
        if exclude_diagonal and j < D.shape[0]:
            keep[j] = False
        try:
            rhos.append(spearman(D[keep, j], D_ref[keep, j]))
        except ValueError:
            continue
    return (float(np.mean(rhos)) if rhos else float("nan")), rhos


def aggregate_importance(importances, weights) -> np.ndarray:
    """Weighted mean of per-forest importances, renormalized to sum 1."""
    imp = np.asarray([np.asarray(i, dtype=np.float64) for i in importances])
    w = np.asarray(weights, dtype=np.float64)
    if imp.ndim != 2 or w.shape != (imp.shape[0],):
        raise ValueError("need one weight per importance vector")
    agg = w @ imp
    total = agg.sum()
    return agg / total if total > 0 else agg


def paired_ttest(a, b):
    """Two-sided paired t-test p-value; ``nan`` when undefined."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or np.all(a == b):
        return float("nan")
    with warnings.catch_warnings():
        # nearly constant differences only cost precision in the p-value
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(stats.ttest_rel(a, b).pvalue)


def mean_std(values):
    """Mean and sample standard deviation (``nan`` std for a single value)."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), (float(v.std(ddof=1)) if v.size > 1 else float("nan"))
