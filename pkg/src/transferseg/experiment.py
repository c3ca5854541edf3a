"""Transfer experiment: per-image forests fused with distance-derived weights.

Every image serves as target once. Its ensemble is built from the forests of
the source pool (by default all images of the other studies) and compared
against a pooled single forest, uniform weights, oracle weights and each
requested unsupervised distance in each direction.
"""
from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import io
from .config import RunConfig, derive_seed, snapshot
from .distances import (
    DIRECTIONS,
    DistanceMatrix,
    estimate_labels,
    fmean,
    kde_fit,
    kde_log_density,
    nearest_sq_distances,
    posterior_mse,
)
from .ensemble import classify, compute_weights, fuse_posteriors
from .forest import TrainedForest, predict_proba, train_forest
from .metrics import (
    aggregate_importance,
    concentration_fraction,
    error_rate,
    mean_std,
    paired_ttest,
    spearman,
)
from .volume import SampleBag, SamplingMode, sample_bag

NONDETERMINISTIC_FILES = ("timings.csv",)


def sampling_mode(config: RunConfig, purpose: str) -> SamplingMode:
    """Training/evaluation draws oversample lesions for WML; distance draws are uniform."""
    mode = SamplingMode.uniform()
    if purpose in ("train", "eval") and config.oversample_factor != 1.0:
        mode = SamplingMode.oversample(1, config.oversample_factor)
    if config.gate_threshold is not None:
        mode = mode.gated(config.recipe.designated_feature, config.gate_threshold)
    return mode


def protocol_sample(bag: SampleBag, config: RunConfig, purpose: str, master_seed: int) -> SampleBag:
    count = {"train": config.train_count, "eval": config.eval_count, "distance": config.distance_count}[purpose]
    seed = derive_seed(master_seed, "sample", purpose, bag.source_tag)
    return sample_bag(bag, count, sampling_mode(config, purpose), seed)


def train_seed(master_seed, tag):
    return derive_seed(master_seed, "train", tag) & 0xFFFFFFFF


def train_image_forest(bag: SampleBag, config: RunConfig, master_seed: int) -> TrainedForest:
    train = protocol_sample(bag, config, "train", master_seed)
    return train_forest(train, config.tree_count, config.mtry, train_seed(master_seed, bag.source_tag),
                        threads=config.threads)


class DistanceEngine:
    """Protocol-level image distances with cached samples, posteriors and KDEs.

    ``sup`` is measured on each target's evaluation sample; the unsupervised
    measures use the uniform distance-time samples.
    """

    def __init__(self, bags: List[SampleBag], config: RunConfig, master_seed: int,
                 forests: Optional[List[TrainedForest]] = None):
        self.bags = bags
        self.config = config
        self.seed = master_seed
        self.forests = forests
        self.tags = [b.source_tag for b in bags]
        self._eval = {}
        self._dist = {}
        self._post = {}
        self._kde = {}
        self._nn = {}
        self._est = {}
        self.seconds = defaultdict(float)

    def eval_sample(self, i):
        if i not in self._eval:
            self._eval[i] = protocol_sample(self.bags[i], self.config, "eval", self.seed)
        return self._eval[i]

    def distance_sample(self, i):
        if i not in self._dist:
            self._dist[i] = protocol_sample(self.bags[i], self.config, "distance", self.seed)
        return self._dist[i]

    def posteriors(self, m, z, sample="eval"):
        key = (m, z, sample)
        if key not in self._post:
            if self.forests is None:
                raise ValueError("this measure needs trained forests")
            bag = self.eval_sample(z) if sample == "eval" else self.distance_sample(z)
            self._post[key] = predict_proba(self.forests[m], bag.features)
        return self._post[key]

    def estimated_labels(self, z):
        if z not in self._est:
            k = next(f for f in self.forests if f is not None).n_classes
            self._est[z] = estimate_labels(self.distance_sample(z).features, k, self.config.recipe.designated_feature,
                                           seed=derive_seed(self.seed, "kmeans", self.tags[z]) & 0xFFFFFFFF)
        return self._est[z]

    def _bag_t2s(self, m, z):
        if (m, z) not in self._nn:
            self._nn[(m, z)] = fmean(nearest_sq_distances(self.distance_sample(z).features,
                                                          self.distance_sample(m).features, self.config.knn_method))
        return self._nn[(m, z)]

    def _div_t2s(self, m, z):
        if m not in self._kde:
            self._kde[m] = kde_fit(self.distance_sample(m).features)
        return -fmean(kde_log_density(self._kde[m], self.distance_sample(z).features))

    def value(self, measure, direction, m, z):
        """Distance of source ``m`` for target ``z``."""
        t0 = time.perf_counter()
        try:
            if measure == "sup":
                ev = self.eval_sample(z)
                if ev.labels is None:
                    raise ValueError(f"measure sup needs a labeled target ({self.tags[z]})")
                return posterior_mse(self.posteriors(m, z), ev.labels)
            if measure == "clu":
                return posterior_mse(self.posteriors(m, z, "distance"), self.estimated_labels(z))
            fn = {"bag": self._bag_t2s, "div": self._div_t2s}[measure]
            if direction == "t2s":
                return fn(m, z)
            if direction == "s2t":
                return fn(z, m)
            if direction == "avg":
                return 0.5 * (fn(m, z) + fn(z, m))
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        finally:
            self.seconds[measure] += time.perf_counter() - t0

    def matrix(self, measure, direction, rows=None, cols=None, pairs=None) -> DistanceMatrix:
        """Full matrix over all images; entries outside ``pairs`` (if given) are NaN."""
        if measure in ("sup", "clu") and direction != "t2s":
            raise ValueError(f"measure {measure} is only defined for direction t2s")
        rows = list(range(len(self.bags))) if rows is None else list(rows)
        cols = list(range(len(self.bags))) if cols is None else list(cols)
        D = np.full((len(rows), len(cols)), np.nan)
        for i, m in enumerate(rows):
            for j, z in enumerate(cols):
                if pairs is None or (m, z) in pairs:
                    D[i, j] = self.value(measure, direction, m, z)
        return DistanceMatrix(D, [self.tags[m] for m in rows], [self.tags[z] for z in cols], measure, direction,
                              int(self.seed) & 0xFFFFFFFFFFFFFFFF, self.config.distance_count)


@dataclass
class EvalReport:
    rows: List[dict]
    summary: List[dict]
    concentration: List[dict]
    spearman: List[dict]
    importance: Dict[str, List[dict]]
    timings: List[dict]
    strategies: List[str]
    distances: Dict[str, DistanceMatrix] = field(default_factory=dict)
    config_text: str = ""
    flags: List[str] = field(default_factory=list)

    def errors(self, strategy, studies=None):
        if isinstance(studies, str):
            studies = [studies]
        return np.array([r[strategy] for r in self.rows if studies is None or r["study"] in studies])

    def mean_error(self, strategy, studies=None):
        return float(self.errors(strategy, studies).mean())

    def mean_rho(self, name):
        for r in self.spearman:
            if r["target"] == "mean" and r["distance"] == name:
                return r["rho"]
        raise KeyError(name)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fields = ["target", "study"] + self.strategies + ["clu_label_error"]
        io.write_rows(out / "report.csv", self.rows, fields)
        io.write_rows(out / "summary.csv", self.summary)
        io.write_rows(out / "concentration.csv", self.concentration)
        io.write_rows(out / "spearman.csv", self.spearman, ["target", "distance", "rho"])
        for name, rows in self.importance.items():
            io.write_rows(out / f"importance_{name}.csv", rows)
        io.write_rows(out / "timings.csv", self.timings, ["phase", "seconds"])
        (out / "config.toml").write_text(self.config_text)
        (out / "flags.txt").write_text("".join(f + "\n" for f in self.flags))
        dist_dir = out / "distances"
        dist_dir.mkdir(exist_ok=True)
        for name, D in self.distances.items():
            io.write_distance_matrix(dist_dir / f"{name}.csv", D)
        return out


def source_pool(studies, z, mode):
    if mode == "different_study":
        return [m for m in range(len(studies)) if studies[m] != studies[z]]
    return [m for m in range(len(studies)) if m != z]


def distance_names(config: RunConfig):
    names = []
    for measure in config.measures:
        if measure == "sup":
            continue
        if measure == "clu":
            names.append(("clu", "t2s"))
        else:
            names += [(measure, d) for d in config.directions]
    return names


def transfer_experiment(bags: List[SampleBag], studies: List[str], config: RunConfig,
                        master_seed: Optional[int] = None, forests: Optional[List[TrainedForest]] = None
                        ) -> EvalReport:
    """Run the full evaluation over ``bags`` (one labeled bag per image)."""
    seed = config.seed if master_seed is None else master_seed
    n_img = len(bags)
    if n_img < 2:
        raise ValueError("the transfer experiment needs at least 2 images")
    if len(set(studies)) < 2 and config.source_pool == "different_study":
        raise ValueError("need at least 2 source studies")
    for b in bags:
        if b.labels is None:
            raise ValueError(f"image {b.source_tag} has no labels; evaluation and d_sup need them")
    tags = [b.source_tag for b in bags]
    timings = {}
    clock = time.perf_counter

    t0 = clock()
    if forests is None:
        forests = [train_image_forest(b, config, seed) for b in bags]
    timings["train"] = clock() - t0
    class_names = forests[0].class_names
    engine = DistanceEngine(bags, config, seed, forests)

    pools = [source_pool(studies, z, config.source_pool) for z in range(n_img)]
    pairs = {(m, z) for z in range(n_img) for m in pools[z]}

    t0 = clock()
    for m, z in sorted(pairs):
        engine.posteriors(m, z)
    timings["predict"] = clock() - t0

    D = {}
    if "sup" in config.measures:
        D["sup"] = engine.matrix("sup", "t2s", pairs=pairs)
    for measure, direction in distance_names(config):
        D[f"{measure}_{direction}"] = engine.matrix(measure, direction, pairs=pairs)
    for k, v in engine.seconds.items():
        timings[f"distance_{k}"] = v

    clu_label_error = [float("nan")] * n_img
    if "clu" in config.measures:
        for z in range(n_img):
            clu_label_error[z] = error_rate(engine.estimated_labels(z), engine.distance_sample(z).labels)

    unsupervised = [k for k in D if k != "sup"]
    strategies = ["all", "uni"] + (["sup"] if "sup" in D else []) + unsupervised

    t0 = clock()
    pooled = {}
    for z in range(n_img):
        key = tuple(pools[z])
        if key not in pooled:
            joined = [protocol_sample(bags[m], config, "train", seed) for m in key]
            pool_bag = SampleBag(np.vstack([b.features for b in joined]),
                                 np.concatenate([b.labels for b in joined]), class_names, "pooled")
            label = "pooled-" + ",".join(tags[m] for m in key)
            pooled[key] = train_forest(pool_bag, config.tree_count, config.mtry,
                                       derive_seed(seed, label) & 0xFFFFFFFF, threads=config.threads)
    timings["train_pooled"] = clock() - t0

    t0 = clock()
    rows = []
    weights = {}
    for z in range(n_img):
        pool = pools[z]
        ev = engine.eval_sample(z)
        posts = [engine.posteriors(m, z) for m in pool]
        row = {"target": tags[z], "study": studies[z]}
        row["all"] = error_rate(classify(predict_proba(pooled[tuple(pool)], ev.features)), ev.labels)
        for name in strategies[1:]:
            d = np.zeros(len(pool)) if name == "uni" else D[name].values[pool, z]
            w = compute_weights(d, config.p, {"measure": name, "target_tag": tags[z]})
            weights[(name, z)] = w
            row[name] = error_rate(classify(fuse_posteriors(posts, w)), ev.labels)
        row["clu_label_error"] = clu_label_error[z]
        rows.append(row)
    timings["fuse_evaluate"] = clock() - t0

    report = EvalReport(
        rows=rows,
        summary=_summary(rows, strategies, studies),
        concentration=_concentration(D, pools, config.p_grid, n_img),
        spearman=_spearman(D, pools, tags, n_img),
        importance=_importance(forests, weights, pools, studies, tags, unsupervised),
        timings=[{"phase": k, "seconds": float(v)} for k, v in timings.items()],
        strategies=strategies,
        distances=D,
        config_text=snapshot(config),
    )
    if "sup" in D and report.mean_error("sup") > report.mean_error("uni"):
        report.flags.append("oracle weights did worse than uniform weights on average")
    return report


def _summary(rows, strategies, studies):
    out = []
    groups = sorted(set(studies)) + ["All"]
    for g in groups:
        members = [r for r in rows if g == "All" or r["study"] == g]
        uni = [r["uni"] for r in members]
        for s in strategies:
            vals = [r[s] for r in members]
            mean, std = mean_std(vals)
            out.append({"strategy": s, "study": g, "n": len(vals), "mean": mean, "std": std,
                        "p_vs_uni": paired_ttest(vals, uni) if s != "uni" else float("nan")})
    return out


def _concentration(D, pools, p_grid, n_img):
    out = []
    for name in ["uni"] + list(D):
        for p in p_grid:
            fr = []
            for z in range(n_img):
                d = np.zeros(len(pools[z])) if name == "uni" else D[name].values[pools[z], z]
                fr.append(concentration_fraction(compute_weights(d, p).weights))
            out.append({"distance": name, "p": float(p), "fraction": float(np.mean(fr))})
    return out


def _spearman(D, pools, tags, n_img):
    if "sup" not in D:
        return []
    out = []
    for name in D:
        if name == "sup":
            continue
        rhos = []
        for z in range(n_img):
            try:
                rho = spearman(D[name].values[pools[z], z], D["sup"].values[pools[z], z])
            except ValueError:
                rho = float("nan")
            rhos.append(rho)
            out.append({"target": tags[z], "distance": name, "rho": rho})
        finite = [r for r in rhos if np.isfinite(r)]
        out.append({"target": "mean", "distance": name, "rho": float(np.mean(finite)) if finite else float("nan")})
    return out


def _importance(forests, weights, pools, studies, tags, unsupervised):
    n = forests[0].n_features
    out = defaultdict(list)
    for z in range(len(forests)):
        same = [m for m in range(len(forests)) if m != z and studies[m] == studies[z]]
        strategies = {}
        if same:
            strategies["same_study"] = (same, np.full(len(same), 1.0 / len(same)))
        pool = pools[z]
        strategies["different_study"] = (pool, np.full(len(pool), 1.0 / len(pool)))
        for name in unsupervised:
            strategies[name] = (pool, weights[(name, z)].weights)
        for name, (members, w) in strategies.items():
            agg = aggregate_importance([forests[m].importances for m in members], w)
            out[name].append({"target": tags[z], **{f"f{i}": float(agg[i]) for i in range(n)}})
    return dict(out)
