"""CSV interchange formats and their JSON sidecars."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .distances import DistanceMatrix
from .ensemble import WeightVector
from .volume.types import SampleBag


def fmt(v) -> str:
    """Shortest round-trip text for a float (``repr``)."""
    return repr(float(v))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# sample bags -----------------------------------------------------------------

def write_bag(path, bag: SampleBag):
    """``f0,...,f{n-1},label`` rows (label -1 when unlabeled); voxel indices go to ``<stem>.index.csv``."""
    path = Path(path)
    labels = bag.labels if bag.labels is not None else np.full(len(bag), -1)
    with open(path, "w", newline="") as f:
        f.write(",".join([f"f{i}" for i in range(bag.n)] + ["label"]) + "\n")
        for row, lab in zip(bag.features.tolist(), labels.tolist()):
            f.write(",".join(map(repr, row)) + f",{int(lab)}\n")
    if bag.index is not None:
        with open(index_path(path), "w") as f:
            f.write("voxel_index\n")
            f.write("".join(f"{int(i)}\n" for i in bag.index))
    return path


def index_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".index.csv")


def read_bag(path, class_names=(), source_tag="") -> SampleBag:
    path = Path(path)
    try:
        with open(path) as f:
            header = f.readline().strip().split(",")
            if not header or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(len(header) - 1)]:
                raise ValueError("bad header")
            rows = [line.split(",") for line in f if line.strip()]
        if not rows:
            raise ValueError("no rows")
        data = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
        labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
        if data.shape[1] != len(header) - 1:
            raise ValueError("row width differs from header")
    except (ValueError, IndexError) as exc:
        raise ValueError(f"corrupted bag file {path}: {exc}") from exc
    index = None
    ip = index_path(path)
    if ip.exists():
        index = np.loadtxt(ip, skiprows=1, dtype=np.int64, ndmin=1)
    if np.all(labels == -1):
        labels = None
    elif np.any(labels < 0):
        raise ValueError(f"corrupted bag file {path}: partially missing labels")
    return SampleBag(data, labels, class_names, source_tag, index)


BAG_MANIFEST_FIELDS = ["image_id", "study", "bag_path", "source_tag", "class_names", "recipe",
                       "n_features", "designated_channel", "designated_feature", "invert"]


def write_manifest(path, rows, fields):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def read_manifest(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def load_bag_entry(entry, base_dir) -> SampleBag:
    names = tuple(entry["class_names"].split(";"))
    return read_bag(Path(base_dir) / entry["bag_path"], names, entry["source_tag"])


# distance matrices -------------------------------------------------------------

def write_distance_matrix(path, D: DistanceMatrix):
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["source_tag"] + list(D.target_tags))
        for tag, row in zip(D.source_tags, D.values):
            w.writerow([tag] + [fmt(v) for v in row])
    write_json(path.with_suffix(".json"), {
        "measure": D.measure, "direction": D.direction, "seed": D.seed,
        "subsample": D.subsample, **D.meta,
    })


def read_distance_matrix(path) -> DistanceMatrix:
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    targets = rows[0][1:]
    sources = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(sources), len(targets))
    meta = read_json(path.with_suffix(".json"))
    known = {k: meta.pop(k) for k in ("measure", "direction", "seed", "subsample")}
    return DistanceMatrix(values, sources, targets, known["measure"], known["direction"],
                          known["seed"], known["subsample"], meta)


# weights and predictions -----------------------------------------------------------

def write_weights(path, tags, weights: WeightVector):
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["source_tag", "weight"])
        for t, v in zip(tags, weights.weights):
            w.writerow([t, fmt(v)])
    write_json(path.with_suffix(".json"), {"p": weights.p, **weights.provenance})


def read_weights(path):
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    meta = read_json(path.with_suffix(".json")) if path.with_suffix(".json").exists() else {"p": float("nan")}
    p = meta.pop("p")
    return [r["source_tag"] for r in rows], WeightVector(np.array([float(r["weight"]) for r in rows]), p, meta)


def write_predictions(path, voxel_index, posteriors, predicted, labels, class_names):
    """``voxel_index, p_<class>..., predicted, label`` rows; label -1 when unknown."""
    labels = np.full(len(predicted), -1) if labels is None else labels
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["voxel_index"] + [f"p_{c}" for c in class_names] + ["predicted", "label"])
        for i, p, c, lab in zip(voxel_index, posteriors, predicted, labels):
            w.writerow([int(i)] + [fmt(v) for v in p] + [int(c), int(lab)])


def read_predictions(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    if header[0] != "voxel_index" or header[-2:] != ["predicted", "label"]:
        raise ValueError(f"{path}: not a predictions file")
    class_names = tuple(h[2:] for h in header[1:-2])
    body = rows[1:]
    index = np.array([int(r[0]) for r in body], dtype=np.int64)
    P = np.array([[float(v) for v in r[1:-2]] for r in body], dtype=np.float64).reshape(len(body), len(class_names))
    predicted = np.array([int(r[-2]) for r in body], dtype=np.int64)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return index, P, predicted, labels, class_names


def write_rows(path, rows, fields=None):
    """Generic CSV table; floats are written with ``repr``."""
    fields = fields or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([fmt(r[k]) if isinstance(r[k], (float, np.floating)) else r[k] for k in fields])
