"""Image-to-image distances between voxel bags.

Four measures are provided: the supervised (oracle) posterior MSE, the same
MSE against k-means label estimates, a KDE cross-entropy and the mean
nearest-neighbour (bag) distance. The last two are asymmetric and can be
measured target-to-source (``t2s``), source-to-target (``s2t``) or as the
mean of both (``avg``).
"""
from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .forest import TrainedForest, predict_proba
from .volume.types import SampleBag

MEASURES = ("sup", "clu", "div", "bag")
DIRECTIONS = ("t2s", "s2t", "avg")


def _check_direction(direction):
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def _features(x):
    return x.features if isinstance(x, SampleBag) else np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def fmean(values) -> float:
    """Exactly rounded mean; independent of the order of ``values``."""
    values = np.asarray(values, dtype=np.float64).ravel()
    return math.fsum(values.tolist()) / len(values)


# supervised and clustering distances -----------------------------------------

def posterior_mse(posteriors, labels) -> float:
    """Mean of ``(1 - posterior of the given label)**2``."""
    P = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if P.shape[0] != labels.shape[0]:
        raise ValueError("posteriors and labels differ in length")
    hit = P[np.arange(len(labels)), labels]
    return fmean((1.0 - hit) ** 2)


def supervised_distance(forest: TrainedForest, target: SampleBag, posteriors=None) -> float:
    if target.labels is None:
        raise ValueError("supervised distance needs a labeled target")
    P = predict_proba(forest, target.features) if posteriors is None else posteriors
    return posterior_mse(P, target.labels)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    class_of_cluster: Optional[np.ndarray] = None

    @property
    def k(self):
        return self.centroids.shape[0]

    def estimated_classes(self):
        if self.class_of_cluster is None:
            raise ValueError("clusters are not matched to classes yet")
        return self.class_of_cluster[self.labels]


def _sq_to_centroids(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _greedy_pp_init(X, k, rng):
    """Greedy k-means++: each new centre is the best of a few D^2-sampled candidates."""
    n = X.shape[0]
    n_trials = 2 + int(math.log(k))
    centers = [int(rng.integers(n))]
    closest = _sq_to_centroids(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), centers)
            centers.append(int(remaining[0]))
            continue
        cand = np.searchsorted(np.cumsum(closest), rng.random(n_trials) * total)
        cand = np.minimum(cand, n - 1)
        d_cand = np.minimum(closest[:, None], _sq_to_centroids(X, X[cand]))
        pot = d_cand.sum(0)
        best = int(np.argmin(pot))
        centers.append(int(cand[best]))
        closest = d_cand[:, best]
    return X[centers].copy()


def _lloyd(X, C, max_iter):
    labels = None
    for _ in range(max_iter):
        d = _sq_to_centroids(X, C)
        new = np.argmin(d, axis=1)
        for j in range(C.shape[0]):
            if not np.any(new == j):
                # reseed an empty cluster at the point farthest from its centroid
                far = int(np.argmax(d[np.arange(len(X)), new]))
                new[far] = j
                d[far, :] = 0.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = np.stack([X[labels == j].mean(axis=0) for j in range(C.shape[0])])
    d = _sq_to_centroids(X, C)
    inertia = float(d[np.arange(len(X)), labels].sum())
    return labels, C, inertia


def kmeans(bag, k, seed=0, restarts=5, max_iter=300) -> ClusterAssignment:
    """Lloyd's algorithm from greedy k-means++ seeds; keeps the best of ``restarts``."""
    X = _features(bag)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples {n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        C = _greedy_pp_init(X, k, rng)
        labels, C, inertia = _lloyd(X, C, max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterAssignment(labels, C, inertia)
    return best


def match_clusters_to_classes(assignment: ClusterAssignment, bag, designated_index, class_order=None):
    """Give clusters the classes in order of increasing mean designated intensity.

    ``class_order`` lists the class indices from darkest to brightest; by
    default class ``j`` is the ``j``-th darkest.
    """
    X = _features(bag)
    k = assignment.k
    order = np.arange(k) if class_order is None else np.asarray(class_order, dtype=np.int64)
    if len(order) != k:
        raise ValueError("number of clusters must equal the number of classes")
    means = np.array([X[assignment.labels == j, designated_index].mean() for j in range(k)])
    if len(np.unique(means)) < k:
        warnings.warn("tied cluster means; ties broken by cluster index")
    rank = np.lexsort((np.arange(k), means))
    class_of_cluster = np.empty(k, dtype=np.int64)
    class_of_cluster[rank] = order
    return ClusterAssignment(assignment.labels, assignment.centroids, assignment.inertia, class_of_cluster)


def estimate_labels(target, k, designated_index, seed=0, class_order=None):
    a = kmeans(target, k, seed)
    return match_clusters_to_classes(a, target, designated_index, class_order).estimated_classes()


def clustering_distance(forest: TrainedForest, target: SampleBag, k=None, designated_index=0,
                        seed=0, estimated=None, posteriors=None) -> float:
    """Posterior MSE against cluster-estimated labels of the target."""
    X = _features(target)
    if X.shape[1] != forest.n_features:
        raise ValueError("feature dimensions differ")
    k = forest.n_classes if k is None else k
    if k != forest.n_classes:
        raise ValueError("k must equal the forest's class count")
    if estimated is None:
        estimated = estimate_labels(X, k, designated_index, seed)
    P = predict_proba(forest, X) if posteriors is None else posteriors
    return posterior_mse(P, estimated)


# kernel density / divergence -------------------------------------------------

def silverman_bandwidth(d, n, sigma):
    return (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0)) * sigma


def pooled_std(X):
    """Square root of the mean per-dimension sample variance."""
    return float(math.sqrt(np.mean(np.var(X, axis=0, ddof=1))))


@dataclass(frozen=True, eq=False)
class KdeModel:
    support: np.ndarray
    bandwidth: float
    sigma: float

    @property
    def d(self):
        return self.support.shape[1]

    @property
    def n(self):
        return self.support.shape[0]


def kde_fit(bag, bandwidth=None) -> KdeModel:
    """Isotropic Gaussian KDE with Silverman's bandwidth on the pooled scale.

    An explicit ``bandwidth`` skips the rule (and allows a single sample).
    """
    X = _features(bag)
    if bandwidth is not None:
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        sigma = pooled_std(X) if len(X) > 1 else float("nan")
        return KdeModel(X, float(bandwidth), sigma)
    if len(X) < 2:
        raise ValueError("KDE needs at least 2 samples")
    sigma = pooled_std(X)
    if not sigma > 0:
        raise ValueError("zero variance source: KDE bandwidth undefined")
    return KdeModel(X, silverman_bandwidth(X.shape[1], X.shape[0], sigma), sigma)


@numba.njit(cache=True, nogil=True)
def _logsumexp_kernels(Q, S, inv_two_h2):
    nq, d = Q.shape
    ns = S.shape[0]
    out = np.empty(nq)
    e = np.empty(ns)
    for i in range(nq):
        mx = -np.inf
        for j in range(ns):
            s = 0.0
            for k in range(d):
                t = Q[i, k] - S[j, k]
                s += t * t
            v = -s * inv_two_h2
            e[j] = v
            if v > mx:
                mx = v
        acc = 0.0
        for j in range(ns):
            acc += math.exp(e[j] - mx)
        out[i] = mx + math.log(acc)
    return out


def kde_log_density(model: KdeModel, query) -> np.ndarray:
    """Log density at each query row (a 1-D query is treated as one point)."""
    Q = np.asarray(query, dtype=np.float64)
    single = Q.ndim == 1
    Q = np.ascontiguousarray(Q.reshape(1, -1) if single else Q)
    if Q.shape[1] != model.d:
        raise ValueError("query dimension differs from the model")
    h = model.bandwidth
    lse = _logsumexp_kernels(Q, model.support, 1.0 / (2.0 * h * h))
    log_norm = -0.5 * model.d * math.log(2.0 * math.pi * h * h) - math.log(model.n)
    out = lse + log_norm
    return out[0] if single else out


def _directed(fn, source, target, direction):
    _check_direction(direction)
    if direction == "t2s":
        return fn(source, target)
    if direction == "s2t":
        return fn(target, source)
    return 0.5 * (fn(source, target) + fn(target, source))


def _div_t2s(source, target):
    return -fmean(kde_log_density(kde_fit(source), _features(target)))


def divergence_distance(source, target, direction="t2s") -> float:
    """Mean negative log source density at the target points (``t2s``)."""
    if _features(source).shape[1] != _features(target).shape[1]:
        raise ValueError("bags differ in dimensionality")
    return _directed(_div_t2s, source, target, direction)


# bag distance ----------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _nearest_sq(Q, R):
    nq, d = Q.shape
    out = np.empty(nq)
    for i in range(nq):
        best = np.inf
        for j in range(R.shape[0]):
            s = 0.0
            for k in range(d):
                t = Q[i, k] - R[j, k]
                s += t * t
            if s < best:
                best = s
        out[i] = best
    return out


def _sq_dist_rows(Q, R):
    s = np.zeros(Q.shape[0])
    for k in range(Q.shape[1]):
        t = Q[:, k] - R[:, k]
        s += t * t
    return s


def nearest_sq_distances(query, reference, method="brute"):
    """Squared distance from each query row to its nearest reference row."""
    Q, R = _features(query), _features(reference)
    if Q.shape[1] != R.shape[1]:
        raise ValueError("bags differ in dimensionality")
    if method == "brute":
        return _nearest_sq(Q, R)
    if method == "kdtree":
        from scipy.spatial import cKDTree

        _, j = cKDTree(R).query(Q, k=1)
        return _sq_dist_rows(Q, R[j])
    raise ValueError(f"unknown nearest-neighbour method {method!r}")


def bag_distance(source, target, direction="t2s", method="brute") -> float:
    """Mean squared distance from each target point to its nearest source point (``t2s``)."""
    return _directed(lambda s, t: fmean(nearest_sq_distances(t, s, method)), source, target, direction)


# matrices --------------------------------------------------------------------

def subsample_seed(seed, tag):
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode())]


def subsample(bag: SampleBag, count, seed):
    """Uniform random subset of ``count`` rows; the whole bag when it is not larger."""
    if count is None or count >= len(bag):
        return bag
    rng = np.random.default_rng(subsample_seed(seed, bag.source_tag))
    return bag.take(np.sort(rng.choice(len(bag), size=count, replace=False)))


@dataclass
class DistanceRecord:
    source_tag: str
    target_tag: str
    measure: str
    direction: str
    value: float


@dataclass
class DistanceMatrix:
    values: np.ndarray
    source_tags: list
    target_tags: list
    measure: str
    direction: str
    seed: int = 0
    subsample: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def records(self):
        for i, s in enumerate(self.source_tags):
            for j, t in enumerate(self.target_tags):
                yield DistanceRecord(s, t, self.measure, self.direction, float(self.values[i, j]))

    def column(self, target_tag):
        return self.values[:, self.target_tags.index(target_tag)]

    def __eq__(self, other):
        return (
            isinstance(other, DistanceMatrix)
            and np.array_equal(self.values, other.values, equal_nan=True)
            and list(self.source_tags) == list(other.source_tags)
            and list(self.target_tags) == list(other.target_tags)
            and (self.measure, self.direction, self.seed, self.subsample)
            == (other.measure, other.direction, other.seed, other.subsample)
        )


def distance_matrix(sources: Sequence[SampleBag], targets: Sequence[SampleBag], measure, direction="t2s",
                    count=2000, seed=0, forests=None, designated_index=0, class_order=None,
                    method="brute") -> DistanceMatrix:
    """Distances between every source bag (rows) and target bag (columns).

    Each bag is subsampled to ``count`` rows with a seed derived from ``seed``
    and the bag's tag, so an entry does not depend on which other bags are in
    the lists. ``sup`` and ``clu`` need ``forests`` aligned with ``sources``;
    both are only defined in the ``t2s`` direction.
    """
    if measure not in MEASURES:
        raise ValueError(f"measure must be one of {MEASURES}, got {measure!r}")
    _check_direction(direction)
    if measure in ("sup", "clu"):
        if forests is None or len(forests) != len(sources):
            raise ValueError(f"measure {measure} needs one forest per source")
        if direction != "t2s":
            raise ValueError(f"measure {measure} is only defined for direction t2s")
    if measure == "sup":
        for t in targets:
            if t.labels is None:
                raise ValueError(f"measure sup needs labeled targets ({t.source_tag or 'unnamed'})")
    dims = {b.n for b in list(sources) + list(targets)}
    if len(dims) > 1:
        raise ValueError(f"bags differ in dimensionality: {sorted(dims)}")

    subs = [subsample(b, count, seed) for b in sources]
    tgts = [subsample(b, count, seed) for b in targets]
    D = np.zeros((len(sources), len(targets)))
    for j, t in enumerate(tgts):
        if measure == "clu":
            est = estimate_labels(t, forests[0].n_classes, designated_index,
                                  seed=subsample_seed(seed, t.source_tag), class_order=class_order)
        for i, s in enumerate(subs):
            if measure == "sup":
                D[i, j] = supervised_distance(forests[i], t)
            elif measure == "clu":
                D[i, j] = clustering_distance(forests[i], t, estimated=est)
            elif measure == "div":
                D[i, j] = divergence_distance(s, t, direction)
            else:
                D[i, j] = bag_distance(s, t, direction, method)
    return DistanceMatrix(D, [b.source_tag for b in sources], [b.source_tag for b in targets],
                          measure, direction, int(seed), count)
