"""Random forest classifier with exact Gini split search.

Every tree is grown on a bootstrap sample until its leaves are pure. At each
node ``mtry`` non-constant features are examined in a random order and the
split with the largest decrease in Gini impurity wins; thresholds sit at the
midpoint between consecutive distinct values. Ties go to the lowest feature
index, then the lowest threshold.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional

import numba
import numpy as np

from .volume.types import SampleBag

FORMAT_VERSION = 1


class Tree(NamedTuple):
    """Flat pre-order node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)


@numba.njit(cache=True, nogil=True)
def _grow(X, y, n_classes, mtry, keys):
    n = X.shape[0]
    n_feat = X.shape[1]
    max_nodes = 2 * n - 1
    feature = np.full(max_nodes, -1, np.int64)
    threshold = np.zeros(max_nodes, np.float64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    counts = np.zeros((max_nodes, n_classes), np.int64)
    decrease = np.zeros(n_feat, np.float64)

    idx = np.arange(n)
    # stack entries: start, end, parent, is_left
    stack = np.empty((max_nodes, 4), np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = n
    stack[0, 2] = -1
    stack[0, 3] = 0
    top = 1
    n_nodes = 0
    cl = np.zeros(n_classes, np.int64)
    vals = np.empty(n, np.float64)
    labs = np.empty(n, np.int64)

    while top > 0:
        top -= 1
        start = stack[top, 0]
        end = stack[top, 1]
        parent = stack[top, 2]
        is_left = stack[top, 3]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if is_left == 1:
                left[parent] = node
            else:
                right[parent] = node

        m = end - start
        for i in range(start, end):
            counts[node, y[idx[i]]] += 1
        n_present = 0
        sq = 0.0
        for c in range(n_classes):
            if counts[node, c] > 0:
                n_present += 1
            sq += counts[node, c] * counts[node, c]
        if n_present <= 1 or m < 2:
            continue

        order = np.argsort(keys[node])
        best_score = -1.0
        best_f = -1
        best_t = 0.0
        evaluated = 0
        for oi in range(n_feat):
            if evaluated == mtry:
                break
            f = order[oi]
            vmin = X[idx[start], f]
            vmax = vmin
            for i in range(start, end):
                v = X[idx[i], f]
                if v < vmin:
                    vmin = v
                if v > vmax:
                    vmax = v
            if vmin == vmax:
                continue
            evaluated += 1
            for i in range(m):
                vals[i] = X[idx[start + i], f]
            srt = np.argsort(vals[:m], kind="mergesort")
            for i in range(m):
                labs[i] = y[idx[start + srt[i]]]
            for c in range(n_classes):
                cl[c] = 0
            for i in range(m - 1):
                cl[labs[i]] += 1
                a = vals[srt[i]]
                b = vals[srt[i + 1]]
                if a == b:
                    continue
                nl = i + 1
                nr = m - nl
                sl = 0.0
                sr = 0.0
                for c in range(n_classes):
                    l_c = cl[c]
                    r_c = counts[node, c] - l_c
                    sl += l_c * l_c
                    sr += r_c * r_c
                score = sl / nl + sr / nr
                thr = 0.5 * (a + b)
                if thr >= b:
                    thr = a
                better = False
                if score > best_score:
                    better = True
                elif score == best_score:
                    if f < best_f or (f == best_f and thr < best_t):
                        better = True
                if better:
                    best_score = score
                    best_f = f
                    best_t = thr
        if best_f < 0:
            continue

        gain = best_score - sq / m
        if gain > 0.0:
            decrease[best_f] += gain
        feature[node] = best_f
        threshold[node] = best_t
        # partition idx[start:end] so that x <= thr comes first
        i = start
        j = end - 1
        while i <= j:
            if X[idx[i], best_f] <= best_t:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        mid = i
        # push right first so the left child is popped (numbered) first
        stack[top, 0] = mid
        stack[top, 1] = end
        stack[top, 2] = node
        stack[top, 3] = 0
        top += 1
        stack[top, 0] = start
        stack[top, 1] = mid
        stack[top, 2] = node
        stack[top, 3] = 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), counts[:n_nodes].copy(), decrease)


def grow_tree(X, y, n_classes, mtry, rng, bootstrap=True):
    """Grow one tree; returns ``(tree, per-feature impurity decrease / n)``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    n = len(y)
    if bootstrap:
        rows = rng.integers(0, n, size=n)
        X, y = X[rows], y[rows]
    keys = rng.random((2 * n - 1, X.shape[1]))
    f, t, l, r, c, dec = _grow(X, y, int(n_classes), int(mtry), keys)
    return Tree(f, t, l, r, c), dec / n


@numba.njit(cache=True, nogil=True)
def _leaf_ids(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass(frozen=True, eq=False)
class TrainedForest:
    trees: List[Tree]
    n_features: int
    class_names: tuple
    importances: np.ndarray
    seed: int
    tree_count: int
    mtry: int

    @property
    def n_classes(self):
        return len(self.class_names)

    def predict_proba(self, X):
        return predict_proba(self, X)

    def __eq__(self, other):
        if not isinstance(other, TrainedForest):
            return NotImplemented
        return dumps(self) == dumps(other)


def default_mtry(n_features):
    return max(1, int(math.floor(math.sqrt(n_features))))


def train_forest(bag: SampleBag, tree_count=100, mtry: Optional[int] = None, seed=0, threads=1) -> TrainedForest:
    """Train a forest on a labeled bag.

    Tree ``k`` draws from its own child of ``SeedSequence(seed)``, so the
    result does not depend on ``threads``.
    """
    if bag.labels is None:
        raise ValueError("training needs a labeled bag")
    if len(bag) < 2:
        raise ValueError("training needs at least 2 samples")
    n = bag.n
    mtry = default_mtry(n) if mtry is None else int(mtry)
    if not 1 <= mtry <= n:
        raise ValueError(f"mtry must lie in [1, {n}]")
    n_classes = len(bag.class_names)
    children = np.random.SeedSequence(int(seed)).spawn(int(tree_count))

    def one(ss):
        return grow_tree(bag.features, bag.labels, n_classes, mtry, np.random.default_rng(ss))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, children))
    else:
        results = [one(ss) for ss in children]
    trees = [t for t, _ in results]
    imp = np.zeros(n)
    for _, dec in results:
        imp += dec
    imp /= max(len(results), 1)
    total = imp.sum()
    imp = imp / total if total > 0 else np.zeros(n)
    return TrainedForest(trees, n, tuple(bag.class_names), imp, int(seed), int(tree_count), mtry)


def predict_proba(forest: TrainedForest, X) -> np.ndarray:
    """Average of the trees' leaf class proportions."""
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ValueError(f"expected an N x {forest.n_features} matrix, got shape {X.shape}")
    out = np.zeros((X.shape[0], forest.n_classes))
    for tree in forest.trees:
        leaves = _leaf_ids(X, tree.feature, tree.threshold, tree.left, tree.right)
        c = tree.counts.astype(np.float64)
        out += (c / c.sum(axis=1, keepdims=True))[leaves]
    out /= len(forest.trees)
    # renormalize the rounding residue so rows sum to 1
    return out / out.sum(axis=1, keepdims=True)


def feature_importance(forest: TrainedForest) -> np.ndarray:
    """Mean decrease in Gini impurity per feature, normalized to sum 1."""
    return forest.importances.copy()


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


# persistence ------------------------------------------------------------------

def _hex(v):
    return float(v).hex()


def dumps(forest: TrainedForest) -> str:
    """Text format: a header, then each tree's nodes in pre-order.

    Internal nodes are ``I feature threshold left_offset right_offset`` with
    offsets relative to the node's own position; leaves are ``L counts...``.
    Reals are written in hex so the round trip is bit-exact.
    """
    lines = [
        f"transferseg-forest {FORMAT_VERSION}",
        f"seed {forest.seed}",
        f"tree_count {forest.tree_count}",
        f"mtry {forest.mtry}",
        f"n_features {forest.n_features}",
        "class_names " + ",".join(forest.class_names),
        "importances " + " ".join(_hex(v) for v in forest.importances),
    ]
    for k, tree in enumerate(forest.trees):
        lines.append(f"tree {k} {tree.n_nodes}")
        for i in range(tree.n_nodes):
            if tree.feature[i] >= 0:
                lines.append(
                    f"I {tree.feature[i]} {_hex(tree.threshold[i])} {tree.left[i] - i} {tree.right[i] - i}"
                )
            else:
                lines.append("L " + " ".join(str(int(c)) for c in tree.counts[i]))
    return "\n".join(lines) + "\n"


def loads(text: str) -> TrainedForest:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != "transferseg-forest" or int(head[1]) != FORMAT_VERSION:
        raise ValueError("not a transferseg forest file (or unsupported version)")

    def field(i, name):
        key, _, value = lines[i].partition(" ")
        if key != name:
            raise ValueError(f"line {i + 1}: expected '{name}'")
        return value

    seed = int(field(1, "seed"))
    tree_count = int(field(2, "tree_count"))
    mtry = int(field(3, "mtry"))
    n_features = int(field(4, "n_features"))
    class_names = tuple(field(5, "class_names").split(","))
    importances = np.array([float.fromhex(v) for v in field(6, "importances").split()], dtype=np.float64)
    C = len(class_names)
    pos = 7
    trees = []
    for k in range(tree_count):
        tag, kk, n_nodes = lines[pos].split()
        if tag != "tree" or int(kk) != k:
            raise ValueError(f"line {pos + 1}: expected header of tree {k}")
        n_nodes = int(n_nodes)
        pos += 1
        feature = np.full(n_nodes, -1, np.int64)
        threshold = np.zeros(n_nodes)
        left = np.full(n_nodes, -1, np.int64)
        right = np.full(n_nodes, -1, np.int64)
        counts = np.zeros((n_nodes, C), np.int64)
        for i in range(n_nodes):
            parts = lines[pos + i].split()
            if parts[0] == "I":
                feature[i] = int(parts[1])
                threshold[i] = float.fromhex(parts[2])
                left[i] = i + int(parts[3])
                right[i] = i + int(parts[4])
            elif parts[0] == "L":
                counts[i] = [int(v) for v in parts[1:]]
            else:
                raise ValueError(f"line {pos + i + 1}: bad node record")
        # internal-node counts are the sums over their subtree
        for i in range(n_nodes - 1, -1, -1):
            if feature[i] >= 0:
                counts[i] = counts[left[i]] + counts[right[i]]
        pos += n_nodes
        trees.append(Tree(feature, threshold, left, right, counts))
    return TrainedForest(trees, n_features, class_names, importances, seed, tree_count, mtry)


def save_forest(path, forest: TrainedForest):
    Path(path).write_text(dumps(forest))


def load_forest(path) -> TrainedForest:
    path = Path(path)
    try:
        return loads(path.read_text())
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: {exc}") from exc
