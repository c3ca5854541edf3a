"""Simulated multi-study datasets and their preprocessing into voxel bags."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from .config import RunConfig, StudyConfig, derive_seed
from .volume import (
    LESION,
    Mask,
    PhantomGeometry,
    SampleBag,
    ScannerProfile,
    Volume,
    apply_scanner,
    extract_features,
    invert_intensities,
    percentile_normalize,
    read_mask,
    read_volume,
    simulate_phantom,
    write_mask,
    write_volume,
)

BT_LABEL_MAP = np.array([0, 1, 2, 2])      # lesions count as WM
WML_LABEL_MAP = np.array([0, 0, 0, 1])


@dataclass
class ImageRecord:
    image_id: str
    study: str
    channels: List[Volume]
    mask: Mask
    labels: Volume
    invert: bool = False


def study_profile(study: StudyConfig, channel: str, seed: int) -> ScannerProfile:
    return ScannerProfile(
        gamma=float(study.channel_gamma.get(channel, study.gamma)),
        gain=study.gain,
        offset=study.offset,
        bias_amplitude=study.bias_amplitude,
        bias_scale=study.bias_scale,
        noise_sigma=study.noise_sigma,
        prior_shift=tuple(study.prior_shift),
        seed=seed,
    )


def image_geometry(config: RunConfig, study: StudyConfig, rng) -> PhantomGeometry:
    sim = config.simulation
    base = PhantomGeometry()
    jitter = np.exp(sim.fraction_jitter * rng.standard_normal(3))
    fractions = np.asarray(base.tissue_fractions) * jitter * np.asarray(study.prior_shift[:3])
    fractions = fractions / fractions.sum()
    axes = np.asarray(base.semi_axes) * (1.0 + 0.04 * rng.standard_normal(3))
    lesion = study.lesion_fraction
    if lesion > 0 and study.lesion_fraction_spread > 0:
        lesion = lesion * float(np.exp(study.lesion_fraction_spread * rng.standard_normal()))
    return PhantomGeometry(
        semi_axes=tuple(float(a) for a in np.clip(axes, 0.6, 0.98)),
        tissue_fractions=tuple(float(f) for f in fractions),
        wobble=sim.wobble,
        lesion_fraction=float(min(lesion, 0.5)),
        channels=config.recipe.channels,
        tissue_noise=sim.tissue_noise,
    )


def simulate_image(config: RunConfig, study: StudyConfig, j: int, master_seed: int) -> ImageRecord:
    sim = config.simulation
    rng = np.random.default_rng(derive_seed(master_seed, "geometry", study.name, j))
    geometry = image_geometry(config, study, rng)
    channels, mask, labels = simulate_phantom(
        sim.dims, sim.spacing, geometry, seed=derive_seed(master_seed, "phantom", study.name, j)
    )
    scanned = []
    for ch in channels:
        profile = study_profile(study, ch.channel, derive_seed(master_seed, "scanner", study.name, j, ch.channel))
        out = apply_scanner(ch, profile)
        if study.invert:
            out = invert_intensities(out, mask)
        scanned.append(out)
    return ImageRecord(f"{study.name}{j:02d}", study.name, scanned, mask, labels, study.invert)


def simulate_dataset(config: RunConfig, master_seed=None) -> List[ImageRecord]:
    seed = config.seed if master_seed is None else master_seed
    records = []
    for study in config.simulation.studies:
        n = study.images if study.images is not None else config.simulation.images_per_study
        records += [simulate_image(config, study, j, seed) for j in range(n)]
    return records


def preprocess(channels, mask: Mask, invert=False):
    """Undo acquisition inversion if flagged, then [4, 96] percentile range matching."""
    out = []
    for ch in channels:
        if invert:
            ch = invert_intensities(ch, mask)
        out.append(percentile_normalize(ch, mask))
    return out


def task_labels(labels: Volume, task):
    raw = labels.data.astype(np.int64)
    lut = WML_LABEL_MAP if task == "wml" else BT_LABEL_MAP
    out = np.full(raw.shape, -1, dtype=np.int64)
    inside = raw >= 0
    out[inside] = lut[raw[inside]]
    return out


def featurize(record: ImageRecord, config: RunConfig) -> SampleBag:
    recipe = config.recipe
    by_name = {ch.channel: ch for ch in record.channels}
    missing = [c for c in recipe.channels if c not in by_name]
    if missing:
        raise ValueError(f"{record.image_id}: missing channel(s) {missing}")
    channels = preprocess([by_name[c] for c in recipe.channels], record.mask, record.invert)
    bag, _ = extract_features(channels, record.mask, recipe, task_labels(record.labels, config.task),
                              config.class_names, record.image_id)
    return bag


def lesion_count(record: ImageRecord):
    return int(np.count_nonzero(record.labels.data == LESION))


DATASET_FIELDS = ["image_id", "study", "channels", "invert", "sha256"]


def _stem(base, image_id, what):
    return Path(base) / "volumes" / f"{image_id}_{what}"


def write_dataset(records: List[ImageRecord], out_dir):
    """Volumes under ``volumes/`` plus ``manifest.csv``; returns the manifest rows."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        digest = hashlib.sha256()
        for ch in rec.channels:
            raw, _ = write_volume(_stem(out, rec.image_id, ch.channel), ch)
            digest.update(raw.read_bytes())
        spacing = rec.channels[0].spacing
        raw, _ = write_mask(_stem(out, rec.image_id, "mask"), rec.mask, spacing)
        digest.update(raw.read_bytes())
        raw, _ = write_volume(_stem(out, rec.image_id, "labels"), rec.labels)
        digest.update(raw.read_bytes())
        rows.append({"image_id": rec.image_id, "study": rec.study,
                     "channels": ";".join(ch.channel for ch in rec.channels),
                     "invert": int(rec.invert), "sha256": digest.hexdigest()})
    with open(out / "manifest.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=DATASET_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def read_dataset(data_dir) -> List[ImageRecord]:
    base = Path(data_dir)
    manifest = base / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    with open(manifest, newline="") as f:
        rows = list(csv.DictReader(f))
    records = []
    for r in rows:
        channels = [read_volume(_stem(base, r["image_id"], c)) for c in r["channels"].split(";")]
        mask = read_mask(_stem(base, r["image_id"], "mask"))
        labels = read_volume(_stem(base, r["image_id"], "labels"))
        records.append(ImageRecord(r["image_id"], r["study"], channels, mask, labels, bool(int(r["invert"]))))
    return records
