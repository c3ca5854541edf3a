"""Command-line pipeline: simulate, featurize, train, distance, predict, evaluate, reproduce.

Every command writes ``config.toml`` (the run configuration) next to its
outputs. Exit status is 0 on success, 2 for bad input and 3 for numerically
degenerate data such as a constant intensity range.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, load_config, snapshot
from .dataset import featurize, read_dataset, simulate_dataset, write_dataset
from .distances import DIRECTIONS, MEASURES
from .ensemble import classify, compute_weights, fuse_posteriors, informed_threshold
from .experiment import (
    DistanceEngine,
    protocol_sample,
    source_pool,
    train_image_forest,
    transfer_experiment,
)
from .forest import load_forest, predict_proba, save_forest
from .metrics import error_rate
from .volume import DegenerateInputError

EXIT_BAD_INPUT = 2
EXIT_DEGENERATE = 3


def _out(out_dir, config):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(snapshot(config))
    return out


def recipe_text(recipe):
    return (f"channels={','.join(recipe.channels)};scales={','.join(repr(float(s)) for s in recipe.scales)};"
            f"position={int(recipe.include_position)}")


# stages ------------------------------------------------------------------------

def cmd_simulate(config: RunConfig, out_dir):
    out = _out(out_dir, config)
    return write_dataset(simulate_dataset(config), out)


def cmd_featurize(data_dir, config: RunConfig, out_dir):
    out = _out(out_dir, config)
    (out / "bags").mkdir(exist_ok=True)
    recipe = config.recipe
    rows = []
    for rec in read_dataset(data_dir):
        bag = featurize(rec, config)
        rel = Path("bags") / f"{rec.image_id}.csv"
        io.write_bag(out / rel, bag)
        rows.append({
            "image_id": rec.image_id, "study": rec.study, "bag_path": rel.as_posix(),
            "source_tag": bag.source_tag, "class_names": ";".join(bag.class_names),
            "recipe": recipe_text(recipe), "n_features": recipe.n_features,
            "designated_channel": recipe.designated_channel,
            "designated_feature": recipe.designated_feature, "invert": int(rec.invert),
        })
    io.write_manifest(out / "manifest.csv", rows, io.BAG_MANIFEST_FIELDS)
    return rows


def load_bags(manifest):
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"no bag manifest at {manifest}")
    entries = io.read_manifest(manifest)
    if not entries:
        raise ValueError(f"{manifest}: empty manifest")
    bags = [io.load_bag_entry(e, manifest.parent) for e in entries]
    return entries, bags


def model_path(models_dir, tag):
    return Path(models_dir) / f"{tag}.forest"


def cmd_train(manifest, config: RunConfig, out_dir):
    """Train one forest per bag; existing model files are kept as they are."""
    out = _out(out_dir, config)
    entries, bags = load_bags(manifest)
    trained = []
    for bag in bags:
        path = model_path(out, bag.source_tag)
        if path.exists():
            continue
        if bag.labels is None:
            raise ValueError(f"bag {bag.source_tag} has no labels; cannot train")
        save_forest(path, train_image_forest(bag, config, config.seed))
        trained.append(bag.source_tag)
    return trained


def load_forests(models_dir, tags, required=True):
    out = []
    for tag in tags:
        path = model_path(models_dir, tag)
        if not path.exists():
            if required:
                raise FileNotFoundError(f"no model for {tag} at {path}")
            out.append(None)
            continue
        out.append(load_forest(path))
    return out


def _pairs(measure, direction):
    if measure in ("sup", "clu"):
        return [(measure, "t2s")]
    dirs = DIRECTIONS if direction is None else [direction]
    return [(measure, d) for d in dirs]


def cmd_distance(manifest, config: RunConfig, out_dir, models_dir=None, measures=None, direction=None,
                 targets=None):
    """Distance matrices (all sources by the selected targets) plus ``timings.csv``."""
    out = _out(out_dir, config)
    entries, bags = load_bags(manifest)
    tags = [b.source_tag for b in bags]
    measures = list(measures or [config.measure])
    for m in measures:
        if m not in MEASURES:
            raise ValueError(f"measure must be one of {MEASURES}, got {m!r}")
    forests = None
    if any(m in ("sup", "clu") for m in measures):
        if models_dir is None:
            raise ValueError("measures sup and clu need --models")
        forests = load_forests(models_dir, tags)
    cols = list(range(len(bags)))
    if targets:
        missing = [t for t in targets if t not in tags]
        if missing:
            raise ValueError(f"unknown target(s) {missing}")
        cols = [tags.index(t) for t in targets]
    engine = DistanceEngine(bags, config, config.seed, forests)
    timings = []
    written = {}
    for m in measures:
        t0 = time.perf_counter()
        for measure, d in _pairs(m, direction):
            D = engine.matrix(measure, d, cols=cols)
            io.write_distance_matrix(out / f"{measure}_{d}.csv", D)
            written[f"{measure}_{d}"] = D
        timings.append({"measure": m, "seconds": time.perf_counter() - t0})
    io.write_rows(out / "timings.csv", timings, ["measure", "seconds"])
    return written


def cmd_predict(manifest, models_dir, target, config: RunConfig, out_dir, weights_path=None,
                sources=None, informed_k=None, threshold=None, voxels="eval"):
    """Fused predictions for one target; weights come from a file or from the configured distance."""
    out = _out(out_dir, config)
    entries, bags = load_bags(manifest)
    tags = [b.source_tag for b in bags]
    if target not in tags:
        raise ValueError(f"unknown target {target!r}")
    z = tags.index(target)
    studies = [e["study"] for e in entries]

    if weights_path is not None:
        wtags, weights = io.read_weights(weights_path)
        sources = list(sources) if sources else wtags
        if len(weights) != len(sources):
            raise ValueError(f"{len(weights)} weights for {len(sources)} models")
    else:
        if sources is None:
            sources = [tags[m] for m in source_pool(studies, z, config.source_pool)]
        pool = [tags.index(s) for s in sources]
        forests = [None] * len(bags)
        if config.measure in ("sup", "clu"):
            for m, f in zip(pool, load_forests(models_dir, sources)):
                forests[m] = f
        engine = DistanceEngine(bags, config, config.seed, forests)
        direction = "t2s" if config.measure in ("sup", "clu") else config.direction
        d = [engine.value(config.measure, direction, m, z) for m in pool]
        weights = compute_weights(d, config.p, {"measure": config.measure, "direction": direction,
                                                "target_tag": target})
    io.write_weights(out / "weights.csv", sources, weights)

    forests = load_forests(models_dir, sources)
    bag = bags[z]
    if voxels == "eval":
        if bag.labels is None and config.oversample_factor != 1.0:
            raise ValueError("the evaluation sample needs labels; use --voxels all")
        bag = protocol_sample(bag, config, "eval", config.seed)
    elif voxels != "all":
        raise ValueError("voxels must be eval or all")
    posts = [predict_proba(f, bag.features) for f in forests]
    P = fuse_posteriors(posts, weights)
    if informed_k is not None:
        tau = informed_threshold(P[:, 1], int(informed_k)) if P.shape[1] == 2 else None
        if tau is None:
            raise ValueError("informed threshold is only defined for binary tasks")
        labels = classify(P, "threshold", tau=tau)
    elif threshold is not None:
        labels = classify(P, "threshold", tau=float(threshold))
    else:
        labels = classify(P)
    index = bag.index if bag.index is not None else np.arange(len(bag))
    io.write_predictions(out / "predictions.csv", index, P, labels, bag.labels, forests[0].class_names)
    return P, labels


def cmd_evaluate(predictions, out_dir, config: RunConfig = None):
    """Per-file error rates of predictions against their label column."""
    config = config or RunConfig()
    out = _out(out_dir, config)
    rows = []
    for path in predictions:
        _, _, predicted, labels, _ = io.read_predictions(path)
        if labels.size == 0 or np.any(labels < 0):
            raise ValueError(f"{path}: predictions lack ground-truth labels")
        rows.append({"predictions": str(path), "n": int(labels.size), "error": error_rate(predicted, labels)})
    io.write_rows(out / "report.csv", rows, ["predictions", "n", "error"])
    return rows


# reproduction --------------------------------------------------------------------

ACCEPTANCE_FIELDS = ["seed", "criterion", "quantity", "value", "passed"]


def acceptance_rows(report, config: RunConfig, seed):
    """Per-seed checks of the synthetic transfer claims."""
    rows = []
    strategies = report.strategies
    if not {"sup", "uni", "bag_t2s"} <= set(strategies):
        return rows
    sup, bag, uni = (report.mean_error(s) for s in ("sup", "bag_t2s", "uni"))
    rows.append({"seed": seed, "criterion": "4-ordering", "quantity": "sup<=bag_t2s<=uni",
                 "value": f"{sup!r}/{bag!r}/{uni!r}", "passed": int(sup <= bag <= uni)})
    matched = [s.name for s in config.simulation.studies if s.matches]
    if matched:
        u = report.mean_error("uni", matched)
        b = report.mean_error("bag_t2s", matched)
        gain = (u - b) / u if u > 0 else 0.0
        rows.append({"seed": seed, "criterion": "4-gain", "quantity": "relative gain on matched studies",
                     "value": repr(gain), "passed": int(gain >= 0.10)})
    dirs = [d for d in DIRECTIONS if f"bag_{d}" in strategies]
    if len(dirs) > 1 and report.spearman:
        rho = {d: report.mean_rho(f"bag_{d}") for d in dirs}
        err = {d: report.mean_error(f"bag_{d}") for d in dirs}
        best_rho = {d for d in dirs if rho[d] == max(rho.values())}
        best_err = {d for d in dirs if err[d] == min(err.values())}
        rows.append({"seed": seed, "criterion": "7-direction", "quantity": "best-rho vs best-error direction",
                     "value": f"{'/'.join(sorted(best_rho))} vs {'/'.join(sorted(best_err))}",
                     "passed": int(bool(best_rho & best_err))})
    return rows


def cmd_reproduce(config: RunConfig, out_dir):
    """Run the whole pipeline for every configured seed and write the acceptance table."""
    out = _out(out_dir, config)
    table = []
    for seed in config.seeds:
        cfg = config.replace(seed=int(seed), seeds=[int(seed)])
        root = out / f"seed_{seed}"
        cmd_simulate(cfg, root / "dataset")
        cmd_featurize(root / "dataset", cfg, root / "bags")
        cmd_train(root / "bags" / "manifest.csv", cfg, root / "models")
        entries, bags = load_bags(root / "bags" / "manifest.csv")
        forests = load_forests(root / "models", [b.source_tag for b in bags])
        report = transfer_experiment(bags, [e["study"] for e in entries], cfg, cfg.seed, forests)
        report.write(root / "report")
        table += acceptance_rows(report, cfg, seed)
    io.write_rows(out / "acceptance.csv", table, ACCEPTANCE_FIELDS)
    return table


# argument handling -------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--trees", type=int)
    common.add_argument("--p", type=float)
    common.add_argument("--out", required=True)

    parser = argparse.ArgumentParser(prog="transferseg")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common])
    p = sub.add_parser("featurize", parents=[common])
    p.add_argument("--data", required=True)
    p = sub.add_parser("train", parents=[common])
    p.add_argument("--manifest", required=True)
    p = sub.add_parser("distance", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--models")
    p.add_argument("--measure", action="append", choices=MEASURES)
    p.add_argument("--direction", choices=DIRECTIONS)
    p.add_argument("--target", action="append")
    p = sub.add_parser("predict", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--weights")
    p.add_argument("--sources", nargs="+")
    p.add_argument("--measure", choices=MEASURES)
    p.add_argument("--direction", choices=DIRECTIONS)
    p.add_argument("--informed-k", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--voxels", choices=["eval", "all"], default="eval")
    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--predictions", nargs="+", required=True)
    sub.add_parser("reproduce", parents=[common])
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes.update(seed=args.seed, seeds=[args.seed])
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.trees is not None:
        changes["tree_count"] = args.trees
    if args.p is not None:
        changes["p"] = args.p
    if getattr(args, "measure", None) and isinstance(args.measure, str):
        changes["measure"] = args.measure
    if getattr(args, "direction", None):
        changes["direction"] = args.direction
    return config.replace(**changes) if changes else config


def run(args):
    config = resolve_config(args)
    if args.command == "simulate":
        cmd_simulate(config, args.out)
    elif args.command == "featurize":
        cmd_featurize(args.data, config, args.out)
    elif args.command == "train":
        cmd_train(args.manifest, config, args.out)
    elif args.command == "distance":
        cmd_distance(args.manifest, config, args.out, args.models, args.measure, args.direction, args.target)
    elif args.command == "predict":
        cmd_predict(args.manifest, args.models, args.target, config, args.out, args.weights, args.sources,
                    args.informed_k, args.threshold, args.voxels)
    elif args.command == "evaluate":
        cmd_evaluate(args.predictions, args.out, config)
    elif args.command == "reproduce":
        cmd_reproduce(config, args.out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except DegenerateInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ValueError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
