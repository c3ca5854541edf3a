"""Distance-to-weight conversion, posterior fusion and decision rules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .forest import TrainedForest, predict_proba

DEFAULT_P = 10.0


@dataclass(frozen=True, eq=False)
class WeightVector:
    weights: np.ndarray
    p: float
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.weights)


def compute_weights(distances, p=DEFAULT_P, provenance=None) -> WeightVector:
    """Weights proportional to ``(d_max - d_m)**p``, normalized to sum 1.

    Falls back to uniform weights when ``p == 0`` or all distances are equal.
    The farthest source always gets weight 0 otherwise.
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size < 1:
        raise ValueError("need at least one distance")
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    if p < 0:
        raise ValueError("p must be >= 0")
    M = d.size
    uniform = np.full(M, 1.0 / M)
    if p == 0:
        return WeightVector(uniform, float(p), dict(provenance or {}))
    gap = d.max() - d
    top = gap.max()
    if top <= 0:
        return WeightVector(uniform, float(p), dict(provenance or {}))
    # scaling by the largest gap first keeps (gap)**p in range for large p
    raw = (gap / top) ** p
    w = raw / math.fsum(raw.tolist())
    return WeightVector(w, float(p), dict(provenance or {}))


@dataclass(frozen=True)
class Ensemble:
    forests: List[TrainedForest]
    source_tags: tuple

    def __post_init__(self):
        if not self.forests:
            raise ValueError("an ensemble needs at least one forest")
        if len(self.source_tags) != len(self.forests):
            raise ValueError("one source tag per forest")
        f0 = self.forests[0]
        for f in self.forests[1:]:
            if f.n_features != f0.n_features or f.class_names != f0.class_names:
                raise ValueError("all forests must share n_features and class_names")

    @property
    def class_names(self):
        return self.forests[0].class_names

    def member_posteriors(self, X):
        return [predict_proba(f, X) for f in self.forests]


def fuse_posteriors(posteriors: Sequence[np.ndarray], weights) -> np.ndarray:
    """Weighted sum of member posteriors (weights are renormalized to sum 1)."""
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    if len(w) != len(posteriors):
        raise ValueError(f"{len(w)} weights for {len(posteriors)} classifiers")
    w = w / w.sum()
    out = np.zeros_like(np.asarray(posteriors[0], dtype=np.float64))
    for wm, P in zip(w, posteriors):
        if wm != 0.0:
            out += wm * P
    return out


def fuse(ensemble: Ensemble, weights, X) -> np.ndarray:
    """Fused class posteriors of ``ensemble`` on the rows of ``X``."""
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    if len(w) != len(ensemble.forests):
        raise ValueError(f"{len(w)} weights for {len(ensemble.forests)} classifiers")
    keep = [m for m in range(len(w)) if w[m] != 0.0]
    return fuse_posteriors([predict_proba(ensemble.forests[m], X) for m in keep], w[keep])


def classify(posteriors, mode="argmax", positive_class=1, tau=0.5) -> np.ndarray:
    """Labels from posteriors: ``argmax`` (ties to the lowest class) or ``threshold``."""
    P = np.asarray(posteriors, dtype=np.float64)
    if mode == "argmax":
        return np.argmax(P, axis=1)
    if mode == "threshold":
        if P.shape[1] != 2:
            raise ValueError("threshold mode is only defined for binary tasks")
        pos = P[:, positive_class] >= tau
        return np.where(pos, positive_class, 1 - positive_class)
    raise ValueError(f"unknown mode {mode!r}")


def informed_threshold(positive_posteriors, k) -> float:
    """Threshold at the ``k``-th largest posterior; ``inf`` for ``k == 0``."""
    p = np.asarray(positive_posteriors, dtype=np.float64).ravel()
    if not 0 <= k <= p.size:
        raise ValueError(f"k={k} outside [0, {p.size}]")
    if k == 0:
        return math.inf
    return float(np.sort(p)[::-1][k - 1])
