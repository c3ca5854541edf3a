import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from transferseg.distances import (
    ClusterAssignment,
    bag_distance,
    clustering_distance,
    distance_matrix,
    divergence_distance,
    estimate_labels,
    fmean,
    kde_fit,
    kde_log_density,
    kmeans,
    match_clusters_to_classes,
    nearest_sq_distances,
    pooled_std,
    posterior_mse,
    silverman_bandwidth,
    subsample,
    supervised_distance,
)
from transferseg.forest import TrainedForest, Tree, train_forest
from transferseg.volume import SampleBag


def naive_nearest(Q, R):
    out = []
    for q in Q:
        best = math.inf
        for r in R:
            s = 0.0
            for k in range(len(q)):
                s += (q[k] - r[k]) * (q[k] - r[k])
            best = min(best, s)
        out.append(best)
    return out


def naive_log_density(support, h, q):
    d = len(q)
    norm = (2 * math.pi * h * h) ** (-d / 2) / len(support)
    dens = sum(math.exp(-sum((q[k] - s[k]) ** 2 for k in range(d)) / (2 * h * h)) for s in support)
    return math.log(norm * dens)


def leaf_forest(posteriors):
    """Forest whose single tree routes each 1-D integer input ``i`` to a leaf with ``posteriors[i]``."""
    P = np.asarray(posteriors, dtype=float)
    n, C = P.shape
    counts = np.round(P * 1000).astype(np.int64)
    feature, threshold, left, right, rows = [], [], [], [], []

    def build(lo, hi):
        i = len(feature)
        feature.append(-1); threshold.append(0.0); left.append(-1); right.append(-1); rows.append(None)
        if hi - lo == 1:
            rows[i] = counts[lo]
            return i
        mid = (lo + hi) // 2
        feature[i] = 0
        threshold[i] = mid - 0.5
        left[i] = build(lo, mid)
        right[i] = build(mid, hi)
        rows[i] = counts[lo:hi].sum(axis=0)
        return i

    build(0, n)
    tree = Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(rows))
    return TrainedForest([tree], 1, tuple(f"c{k}" for k in range(C)), np.zeros(1), 0, 1, 1)


# supervised / clustering ---------------------------------------------------------------

def test_posterior_mse_cases():
    assert posterior_mse([[0.0, 1.0], [1.0, 0.0]], [1, 0]) == 0.0
    assert posterior_mse([[0.5, 0.5]] * 7, [0, 1, 0, 1, 1, 0, 0]) == 0.25
    assert posterior_mse([[1.0, 0.0], [1.0, 0.0]], [0, 1]) == 0.5


def test_supervised_distance_with_trees():
    forest = leaf_forest([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
    X = np.array([[0.0], [1.0], [2.0]])
    assert supervised_distance(forest, SampleBag(X, np.array([0, 1, 1]), ("a", "b"))) == pytest.approx(0.25 / 3)
    assert supervised_distance(forest, SampleBag(X[[0, 2]], np.array([0, 1]), ("a", "b"))) == 0.0
    with pytest.raises(ValueError):
        supervised_distance(forest, SampleBag(X))


def test_clustering_hand_case():
    # estimated classes (0, 1, 1); posteriors of those classes 1.0, 0.5, 0.0
    P = [[1.0, 0.0], [0.5, 0.5], [1.0, 0.0]]
    forest = leaf_forest(P)
    X = SampleBag(np.array([[0.0], [1.0], [2.0]]))
    got = clustering_distance(forest, X, estimated=np.array([0, 1, 1]))
    assert got == pytest.approx((0 + 0.25 + 1) / 3, rel=1e-15)


def gaussian_classes(n_per, centers, sd, seed):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(c, sd, size=(n_per, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return SampleBag(X, y, tuple(f"c{i}" for i in range(len(centers))))


def test_clu_equals_sup_when_clusters_recover_labels():
    bag = gaussian_classes(60, [(0, 0), (5, 0), (10, 0)], 0.3, 0)
    forest = train_forest(bag, 5, seed=0)
    target = gaussian_classes(40, [(0, 0), (5, 0), (10, 0)], 0.8, 1)
    est = estimate_labels(target, 3, designated_index=0, seed=0)
    assert np.array_equal(est, target.labels)
    assert clustering_distance(forest, target, designated_index=0) == supervised_distance(forest, target)


def test_clu_zero_when_forest_agrees_with_clusters():
    bag = gaussian_classes(50, [(0,), (10,)], 0.5, 2)
    forest = train_forest(bag, 5, seed=0)
    assert clustering_distance(forest, bag.unlabeled(), designated_index=0) == 0.0


def test_clu_range_and_k_check():
    bag = gaussian_classes(30, [(0,), (1,)], 1.0, 3)
    forest = train_forest(bag, 5, seed=0)
    v = clustering_distance(forest, bag.unlabeled())
    assert 0.0 <= v <= 1.0
    with pytest.raises(ValueError):
        clustering_distance(forest, bag.unlabeled(), k=3)


# k-means ---------------------------------------------------------------------------

def test_kmeans_k_equals_n():
    X = np.random.default_rng(0).random((7, 3))
    a = kmeans(X, 7, seed=1)
    assert a.inertia == 0.0
    assert sorted(a.labels.tolist()) == list(range(7))


def test_kmeans_k_one_is_mean():
    X = np.random.default_rng(0).random((50, 4))
    a = kmeans(X, 1)
    np.testing.assert_allclose(a.centroids[0], X.mean(axis=0), rtol=1e-12)


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(4)
    centers = np.array([[0.0, 0.0], [10.0, 0.0]])
    X = np.vstack([rng.normal(c, 1.0, size=(80, 2)) for c in centers])
    truth = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    a = kmeans(X, 2, seed=0)
    same = np.array_equal(a.labels, truth) or np.array_equal(a.labels, 1 - truth)
    assert same


def test_kmeans_clusters_non_empty_and_deterministic():
    X = np.random.default_rng(0).random((40, 2))
    X[:20] = 0.5  # many duplicates
    for k in (2, 5, 8):
        a = kmeans(X, k, seed=3)
        assert len(np.unique(a.labels)) == k
        b = kmeans(X, k, seed=3)
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)


def test_kmeans_rejects_k_above_n():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 1)), 4)


def test_cluster_matching_by_intensity():
    X = np.array([[0.8], [0.2], [0.5], [0.81], [0.19], [0.49]])
    a = ClusterAssignment(np.array([0, 1, 2, 0, 1, 2]), np.zeros((3, 1)), 0.0)
    m = match_clusters_to_classes(a, X, 0)
    # CSF < GM < WM in T1
    assert m.class_of_cluster.tolist() == [2, 0, 1]
    a2 = ClusterAssignment(np.array([0, 1]), np.zeros((2, 1)), 0.0)
    m2 = match_clusters_to_classes(a2, np.array([[0.9], [0.1]]), 0)
    assert m2.class_of_cluster.tolist() == [1, 0]  # WML, non-WML
    with pytest.warns(UserWarning):
        m3 = match_clusters_to_classes(a2, np.array([[0.4], [0.4]]), 0)
    assert m3.class_of_cluster.tolist() == [0, 1]
    with pytest.raises(ValueError):
        match_clusters_to_classes(a2, np.array([[0.4], [0.4]]), 0, class_order=[0, 1, 2])


# KDE / divergence ----------------------------------------------------------------------

def test_silverman_high_precision():
    mpmath.mp.dps = 50
    exact = mpmath.power(mpmath.mpf(4) / 3, mpmath.mpf(1) / 5) * mpmath.power(100, -mpmath.mpf(1) / 5) * 2
    got = silverman_bandwidth(1, 100, 2.0)
    assert abs(got - float(exact)) / float(exact) < 1e-12


def test_pooled_std():
    X = np.array([[0.0, 0.0], [2.0, 4.0]])
    # variances (ddof=1) are 2 and 8
    assert pooled_std(X) == pytest.approx(math.sqrt(5.0))
    model = kde_fit(X)
    assert model.bandwidth == pytest.approx(silverman_bandwidth(2, 2, math.sqrt(5.0)))


def test_single_kernel_peak():
    h = 0.7
    model = kde_fit(np.array([[0.0]]), bandwidth=h)
    assert kde_log_density(model, np.array([0.0])) == pytest.approx(-0.5 * math.log(2 * math.pi * h * h), rel=1e-15)
    # source {0}, target {0}: the divergence is minus the log of that peak
    assert -fmean(kde_log_density(model, np.array([[0.0]]))) == pytest.approx(0.5 * math.log(2 * math.pi * h * h))


def test_point_source_and_target_closed_form():
    # two coincident source points would have zero variance; use a symmetric pair instead
    S = np.array([[-1.0], [1.0]])
    h = silverman_bandwidth(1, 2, math.sqrt(2.0))
    expected = -math.log(math.exp(-1 / (2 * h * h)) / math.sqrt(2 * math.pi * h * h))
    assert divergence_distance(S, np.array([[0.0]])) == pytest.approx(expected, rel=1e-14)


def test_density_integrates_to_one():
    S = np.random.default_rng(0).normal(size=(30, 1))
    model = kde_fit(S)
    x = np.linspace(-12, 12, 24001)
    dens = np.exp(kde_log_density(model, x[:, None]))
    assert abs(np.trapezoid(dens, x) - 1.0) < 1e-4


def test_zero_variance_source_rejected():
    with pytest.raises(ValueError):
        kde_fit(np.ones((5, 2)))
    with pytest.raises(ValueError):
        kde_fit(np.ones((1, 2)))


@given(st.integers(0, 10_000))
def test_logsumexp_matches_naive_sum(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    S = rng.normal(size=(int(rng.integers(2, 60)), d))
    Q = rng.normal(size=(int(rng.integers(1, 30)), d)) * 1.5
    model = kde_fit(S)
    got = kde_log_density(model, Q)
    for q, g in zip(Q, got):
        ref = naive_log_density(S, model.bandwidth, q)
        assert abs(g - ref) <= 1e-9 * abs(ref) + 1e-12


def test_far_query_stays_finite():
    model = kde_fit(np.array([[0.0], [1.0]]))
    assert np.isfinite(kde_log_density(model, np.array([1e4])))


def test_divergence_directions():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(40, 3))
    B = rng.normal(size=(50, 3)) + 0.5
    assert divergence_distance(A, A, "t2s") == divergence_distance(A, A, "s2t")
    avg = divergence_distance(A, B, "avg")
    assert avg == pytest.approx(0.5 * (divergence_distance(A, B, "t2s") + divergence_distance(A, B, "s2t")), abs=1e-12)
    assert divergence_distance(A, B, "s2t") == divergence_distance(B, A, "t2s")


def test_divergence_can_be_negative():
    S = np.random.default_rng(0).normal(size=(200, 1)) * 0.01
    assert divergence_distance(S, S[:50]) < 0


# bag distance ----------------------------------------------------------------------

def test_bag_distance_basic():
    assert bag_distance(np.array([[0.0]]), np.array([[3.0]]), "t2s") == 9.0
    assert bag_distance(np.array([[0.0]]), np.array([[3.0]]), "s2t") == 9.0
    A = np.random.default_rng(0).random((30, 4))
    for d in ("t2s", "s2t", "avg"):
        assert bag_distance(A, A, d) == 0.0


@given(st.integers(0, 10_000))
def test_bag_distance_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    S = rng.normal(size=(int(rng.integers(1, 50)), n))
    T = rng.normal(size=(int(rng.integers(1, 50)), n))
    assert bag_distance(S, T, "t2s") == fmean(naive_nearest(T, S))
    assert bag_distance(S, T, "s2t") == fmean(naive_nearest(S, T))
    assert bag_distance(S, T, "avg") == pytest.approx(0.5 * (fmean(naive_nearest(T, S)) + fmean(naive_nearest(S, T))),
                                                      abs=1e-12)


@given(st.integers(0, 10_000))
def test_kdtree_agrees_with_brute_force(seed):
    rng = np.random.default_rng(seed)
    S = rng.integers(0, 3, size=(40, 3)).astype(float)
    T = rng.normal(size=(30, 3))
    assert np.array_equal(nearest_sq_distances(T, S, "kdtree"), nearest_sq_distances(T, S, "brute"))


def test_bag_distance_zero_iff_covered():
    T = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
    assert bag_distance(T, T[:2], "t2s") == 0.0
    assert bag_distance(T[:2], T, "t2s") > 0.0


def test_subset_toy_asymmetry():
    rng = np.random.default_rng(0)
    target = rng.normal(size=(30, 2))
    source = target[::3]
    assert bag_distance(source, target, "s2t") == 0.0
    assert bag_distance(source, target, "t2s") > 0.0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        bag_distance(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        divergence_distance(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        bag_distance(np.zeros((2, 2)), np.zeros((2, 2)), "both")


# matrices --------------------------------------------------------------------------

def tagged(n, dims, seed, labeled=True):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        X = rng.normal(size=(60, dims)) + i
        y = (X[:, 0] > i).astype(int) if labeled else None
        out.append(SampleBag(X, y, ("a", "b"), f"img{i}"))
    return out


def test_matrix_zero_diagonal_and_order_independence():
    bags = tagged(4, 3, 0)
    D = distance_matrix(bags, bags, "bag", "t2s", count=30, seed=1)
    assert np.all(np.diag(D.values) == 0)
    rev = distance_matrix(bags[::-1], bags[::-1], "bag", "t2s", count=30, seed=1)
    np.testing.assert_array_equal(rev.values, D.values[::-1, ::-1])
    again = distance_matrix(bags, bags, "bag", "t2s", count=30, seed=1)
    assert again == D
    assert len(list(D.records())) == 16


def test_matrix_full_subsample_matches_direct():
    bags = tagged(2, 2, 1)
    D = distance_matrix(bags, bags, "bag", "s2t", count=1000, seed=0)
    assert D.values[0, 1] == bag_distance(bags[0], bags[1], "s2t")
    assert subsample(bags[0], 1000, 0) is bags[0]


def test_matrix_measure_requirements():
    bags = tagged(2, 2, 2)
    forests = [train_forest(b, 3, seed=0) for b in bags]
    with pytest.raises(ValueError):
        distance_matrix(bags, tagged(2, 2, 3, labeled=False), "sup", forests=forests)
    with pytest.raises(ValueError):
        distance_matrix(bags, bags, "sup")
    with pytest.raises(ValueError):
        distance_matrix(bags, bags, "clu", "s2t", forests=forests)
    D = distance_matrix(bags, bags, "sup", forests=forests, count=1000)
    assert np.all((D.values >= 0) & (D.values <= 1))
    C = distance_matrix(bags, bags, "clu", forests=forests, count=1000)
    assert np.all((C.values >= 0) & (C.values <= 1))
    V = distance_matrix(bags, bags, "div", "avg", count=50)
    assert V.values.shape == (2, 2)
