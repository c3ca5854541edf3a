from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from transferseg.forest import (
    TrainedForest,
    Tree,
    default_mtry,
    dumps,
    feature_importance,
    gini,
    grow_tree,
    load_forest,
    loads,
    predict_proba,
    save_forest,
    train_forest,
)
from transferseg.volume import SampleBag


def blobs(n=200, seed=0, sep=6.0, d=2):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(size=(n, d)) + sep * y[:, None]
    return SampleBag(X, y, ("a", "b"))


def oracle_tree(X, y, n_classes):
    """Exhaustive exact-arithmetic split search; returns pre-order node lists."""
    nodes = []

    def imp(labels):
        m = len(labels)
        c = np.bincount(labels, minlength=n_classes)
        return 1 - sum(Fraction(int(k), m) ** 2 for k in c)

    def build(rows):
        i = len(nodes)
        nodes.append(None)
        labels = y[rows]
        counts = np.bincount(labels, minlength=n_classes)
        if np.count_nonzero(counts) <= 1:
            nodes[i] = ("L", tuple(counts))
            return i
        m = len(rows)
        parent = m * imp(labels)
        best = None
        for f in range(X.shape[1]):
            values = sorted(set(X[rows, f].tolist()))
            for a, b in zip(values, values[1:]):
                t = 0.5 * (a + b)
                if t >= b:
                    t = a
                go_left = X[rows, f] <= t
                dec = parent - go_left.sum() * imp(labels[go_left]) - (~go_left).sum() * imp(labels[~go_left])
                key = (-dec, f, t)
                if best is None or key < best:
                    best = key
        _, f, t = best
        go_left = X[rows, f] <= t
        l = build(rows[go_left])
        r = build(rows[~go_left])
        nodes[i] = ("I", f, t, l, r)
        return i

    build(np.arange(len(y)))
    return nodes


def as_nodes(tree: Tree):
    out = []
    for i in range(tree.n_nodes):
        if tree.feature[i] >= 0:
            out.append(("I", int(tree.feature[i]), float(tree.threshold[i]), int(tree.left[i]), int(tree.right[i])))
        else:
            out.append(("L", tuple(int(c) for c in tree.counts[i])))
    return out


def test_gini_values():
    assert gini([5, 0]) == 0.0
    assert gini([3, 3]) == 0.5
    assert gini([1, 1, 1]) == pytest.approx(2 / 3)


def test_blobs_fit_perfectly_and_match_oracle():
    bag = blobs()
    tree, _ = grow_tree(bag.features, bag.labels, 2, 2, np.random.default_rng(0), bootstrap=False)
    assert as_nodes(tree) == oracle_tree(bag.features, bag.labels, 2)
    forest = train_forest(bag, 10, seed=1)
    assert np.array_equal(predict_proba(forest, bag.features).argmax(1), bag.labels)


@given(st.integers(0, 10_000), st.integers(5, 40), st.integers(1, 4), st.integers(2, 3))
def test_tree_matches_oracle_on_random_data(seed, n, d, k):
    rng = np.random.default_rng(seed)
    # coarse values create ties between thresholds and between features
    X = rng.integers(0, 4, size=(n, d)).astype(float) / 2
    y = rng.integers(0, k, size=n)
    # duplicated feature vectors with conflicting labels can never be split
    keys = {}
    for i, row in enumerate(map(tuple, X)):
        y[i] = keys.setdefault(row, y[i])
    tree, _ = grow_tree(X, y, k, d, np.random.default_rng(seed), bootstrap=False)
    assert as_nodes(tree) == oracle_tree(X, y, k)


def test_oracle_handles_unsplittable_nodes():
    X = np.zeros((4, 2))
    y = np.array([0, 1, 0, 1])
    tree, dec = grow_tree(X, y, 2, 2, np.random.default_rng(0), bootstrap=False)
    assert tree.n_nodes == 1 and tuple(tree.counts[0]) == (2, 2)
    assert np.all(dec == 0)


def test_leaves_are_pure_when_possible():
    bag = blobs(100, sep=1.0, d=3)
    forest = train_forest(bag, 5, seed=0)
    for t in forest.trees:
        leaves = t.feature < 0
        assert np.all(np.count_nonzero(t.counts[leaves], axis=1) == 1)


def test_single_class_bag():
    bag = SampleBag(np.random.default_rng(0).random((20, 3)), np.zeros(20, int), ("only", "other"))
    forest = train_forest(bag, 5, seed=0)
    P = predict_proba(forest, np.random.default_rng(1).random((10, 3)) * 5)
    assert np.all(P == [1.0, 0.0])
    assert np.all(forest.importances == 0)


def test_single_leaf_posterior():
    t = Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([[3, 1]]))
    forest = TrainedForest([t], 2, ("a", "b"), np.zeros(2), 0, 1, 1)
    P = predict_proba(forest, np.random.default_rng(0).random((5, 2)))
    assert np.all(P == [0.75, 0.25])


@given(st.integers(0, 1000))
def test_posteriors_are_distributions(seed):
    rng = np.random.default_rng(seed)
    bag = SampleBag(rng.random((60, 4)), rng.integers(0, 3, 60), ("a", "b", "c"))
    forest = train_forest(bag, 7, seed=seed)
    P = predict_proba(forest, rng.normal(size=(50, 4)))
    assert np.all((P >= 0) & (P <= 1))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_deterministic_and_thread_independent():
    bag = blobs(150, sep=1.0, d=4)
    a = train_forest(bag, 12, seed=5)
    b = train_forest(bag, 12, seed=5)
    c = train_forest(bag, 12, seed=5, threads=3)
    assert dumps(a) == dumps(b) == dumps(c)
    assert dumps(train_forest(bag, 12, seed=6)) != dumps(a)


def test_monotone_transform_keeps_decisions():
    bag = blobs(120, seed=2, sep=1.0, d=3)
    warped = SampleBag(np.exp(bag.features) ** 3 + 2.0, bag.labels, bag.class_names)
    a = train_forest(bag, 9, seed=4)
    b = train_forest(warped, 9, seed=4)
    # same splits on the same order statistics: only the threshold values move
    for ta, tb in zip(a.trees, b.trees):
        assert np.array_equal(ta.feature, tb.feature)
        assert np.array_equal(ta.counts, tb.counts)
    ta, _ = grow_tree(bag.features, bag.labels, 2, 1, np.random.default_rng(0), bootstrap=False)
    tb, _ = grow_tree(warped.features, warped.labels, 2, 1, np.random.default_rng(0), bootstrap=False)
    fa = TrainedForest([ta], 3, bag.class_names, np.zeros(3), 0, 1, 1)
    fb = TrainedForest([tb], 3, bag.class_names, np.zeros(3), 0, 1, 1)
    assert np.array_equal(predict_proba(fa, bag.features), predict_proba(fb, warped.features))


def test_importance_properties():
    rng = np.random.default_rng(0)
    X = rng.random((200, 5))
    X[:, 3] = 0.25  # constant, can never be chosen
    y = (X[:, 0] > 0.5).astype(int)
    forest = train_forest(SampleBag(X, y, ("a", "b")), 20, seed=1)
    imp = feature_importance(forest)
    assert imp[3] == 0.0
    assert imp.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(imp >= 0)


def test_informative_feature_dominates_importance():
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = rng.random((120, 10))
        y = (X[:, 0] > 0.5).astype(int)
        forest = train_forest(SampleBag(X, y, ("a", "b")), 10, seed=seed)
        wins += int(np.argmax(forest.importances) == 0)
    assert wins >= 95


def test_importance_is_tree_average_of_decrease():
    bag = blobs(60, sep=1.0, d=3)
    forest = train_forest(bag, 4, seed=3)
    children = np.random.SeedSequence(3).spawn(4)
    total = np.zeros(3)
    for ss in children:
        _, dec = grow_tree(bag.features, bag.labels, 2, forest.mtry, np.random.default_rng(ss))
        total += dec
    np.testing.assert_allclose(forest.importances, total / total.sum(), rtol=1e-14)


def test_default_mtry():
    assert default_mtry(13) == 3
    assert default_mtry(30) == 5
    assert default_mtry(1) == 1


def test_training_errors():
    with pytest.raises(ValueError):
        train_forest(SampleBag(np.zeros((5, 2))))
    with pytest.raises(ValueError):
        train_forest(SampleBag(np.zeros((1, 2)), np.array([0]), ("a",)))
    with pytest.raises(ValueError):
        train_forest(blobs(20), mtry=5)
    forest = train_forest(blobs(20), 2)
    with pytest.raises(ValueError):
        predict_proba(forest, np.zeros((3, 3)))


def test_round_trip_bit_exact(tmp_path):
    forest = train_forest(blobs(80, sep=0.5, d=3), 6, seed=11)
    text = dumps(forest)
    again = loads(text)
    assert dumps(again) == text
    assert again == forest
    np.testing.assert_array_equal(again.importances, forest.importances)
    save_forest(tmp_path / "f.forest", forest)
    assert (tmp_path / "f.forest").read_text() == text
    assert load_forest(tmp_path / "f.forest") == forest
    X = np.random.default_rng(0).normal(size=(40, 3))
    assert np.array_equal(predict_proba(again, X), predict_proba(forest, X))


def test_corrupted_forest_names_the_file(tmp_path):
    path = tmp_path / "bad.forest"
    path.write_text("not a forest\n")
    with pytest.raises(ValueError, match="bad.forest"):
        load_forest(path)
    text = dumps(train_forest(blobs(20), 2))
    path.write_text(text.replace("tree 1", "tree 7"))
    with pytest.raises(ValueError, match="bad.forest"):
        load_forest(path)
