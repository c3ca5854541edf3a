"""Voxel feature extraction and voxel sampling."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .filters import gaussian_smooth, gradient_magnitude, laplacian
from .types import FeatureRecipe, Mask, SampleBag, Volume


def extract_features(channels: Sequence[Volume], mask: Mask, recipe: FeatureRecipe,
                     labels: Optional[np.ndarray] = None, class_names=(), source_tag=""):
    """Build the per-voxel feature matrix for all masked voxels.

    Column order, per channel in recipe order: intensity, then for every scale
    the smoothed intensity, gradient magnitude of the smoothed image and
    Laplacian (absolute by default) of the smoothed image. Position columns
    (x, y, z scaled to [0, 1] over the mask bounding box) come last.

    Returns the bag and the flat (C-order) voxel indices of its rows.
    """
    if len(channels) != len(recipe.channels):
        raise ValueError(f"recipe expects {len(recipe.channels)} channels, got {len(channels)}")
    ref = channels[0]
    for ch in channels:
        if ch.dims != ref.dims or ch.spacing != ref.spacing:
            raise ValueError("all channels must share dims and spacing")
    mask.check_matches(ref)
    if mask.count == 0:
        raise ValueError("empty mask")

    flags = mask.flags
    cols = []
    for ch in channels:
        cols.append(ch.data[flags])
        for s in recipe.scales:
            sm = gaussian_smooth(ch, s)
            cols.append(sm.data[flags])
            cols.append(gradient_magnitude(sm).data[flags])
            cols.append(laplacian(sm, absolute=recipe.absolute_laplacian).data[flags])
    coords = np.argwhere(flags)
    if recipe.include_position:
        lo = coords.min(axis=0)
        extent = coords.max(axis=0) - lo
        pos = (coords - lo) / np.where(extent > 0, extent, 1)
        cols += [pos[:, 0], pos[:, 1], pos[:, 2]]
    X = np.column_stack(cols)
    index = np.ravel_multi_index(coords.T, ref.dims)
    y = None
    if labels is not None:
        y = np.asarray(labels).reshape(ref.dims)[flags].astype(np.int64)
    bag = SampleBag(X, y, class_names, source_tag, index)
    return bag, index


@dataclass(frozen=True)
class SamplingMode:
    """How voxels are drawn from a bag.

    ``oversample_class`` makes that class ``factor`` times more likely per
    draw. ``gate_feature``/``gate_threshold`` first restrict the eligible
    voxels to those whose feature value exceeds the threshold.
    """

    oversample_class: Optional[int] = None
    factor: float = 1.0
    gate_feature: Optional[int] = None
    gate_threshold: Optional[float] = None

    @classmethod
    def uniform(cls):
        return cls()

    @classmethod
    def oversample(cls, cls_index, factor):
        return cls(oversample_class=cls_index, factor=float(factor))

    def gated(self, feature, threshold):
        return SamplingMode(self.oversample_class, self.factor, feature, float(threshold))


def eligible_rows(bag: SampleBag, mode: SamplingMode):
    if mode.gate_feature is None:
        return np.arange(len(bag))
    return np.flatnonzero(bag.features[:, mode.gate_feature] > mode.gate_threshold)


def sample_bag(bag: SampleBag, count: int, mode: SamplingMode = SamplingMode(), seed=0) -> SampleBag:
    """Draw ``count`` voxels from ``bag``.

    Without replacement while ``count`` fits in the eligible set, otherwise with
    replacement (and a warning).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rows = eligible_rows(bag, mode)
    if rows.size == 0:
        raise ValueError("no eligible voxels")
    rng = np.random.default_rng(seed)
    p = None
    if mode.oversample_class is not None and mode.factor != 1.0:
        if bag.labels is None:
            raise ValueError("oversampling needs a labeled bag")
        w = np.where(bag.labels[rows] == mode.oversample_class, mode.factor, 1.0)
        p = w / w.sum()
    replace = count > rows.size
    if replace:
        warnings.warn(f"requested {count} samples from {rows.size} eligible voxels; sampling with replacement")
    picked = rng.choice(rows.size, size=count, replace=replace, p=p)
    return bag.take(rows[picked])
