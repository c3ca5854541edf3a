"""Intensity normalization and the differential filters used for voxel features."""
from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import ndimage

from .types import DegenerateInputError, Mask, Volume


def percentile(values, pct):
    """Inclusive linear-interpolation percentile (Hyndman-Fan type 7)."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), pct, method="linear"))


def percentile_normalize(volume: Volume, mask: Mask, low_pct=4.0, high_pct=96.0) -> Volume:
    """Map the masked ``low_pct`` percentile to 0 and ``high_pct`` to 1.

    The map is applied to every voxel and is not clamped, so values beyond the
    percentile range extend linearly past [0, 1].
    """
    mask.check_matches(volume)
    if mask.count < 2:
        raise ValueError("percentile normalization needs at least 2 masked voxels")
    vals = volume.data[mask.flags]
    lo, hi = percentile(vals, low_pct), percentile(vals, high_pct)
    if not hi > lo:
        raise DegenerateInputError("degenerate intensity range")
    return volume.with_data((volume.data - lo) / (hi - lo))


def invert_intensities(volume: Volume, mask: Mask) -> Volume:
    mask.check_matches(volume)
    if mask.count == 0:
        raise ValueError("empty mask")
    data = volume.data.copy()
    top = data[mask.flags].max()
    data[mask.flags] = top - data[mask.flags]
    return volume.with_data(data)


def gaussian_kernel(sigma_vox):
    """Sampled Gaussian truncated at ``ceil(3 sigma)`` and renormalized to sum 1."""
    radius = max(int(math.ceil(3.0 * sigma_vox)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return w / w.sum()


def gaussian_smooth(volume: Volume, sigma_mm) -> Volume:
    """Separable Gaussian smoothing with replicate-nearest borders.

    Sigma is given in mm and converted per axis with the voxel spacing.
    """
    if sigma_mm <= 0:
        raise ValueError("sigma_mm must be positive")
    data = volume.data
    smoothed_any = False
    for axis, h in enumerate(volume.spacing):
        w = gaussian_kernel(sigma_mm / h)
        centre = len(w) // 2
        if w[centre] == 1.0 or np.all(w[np.arange(len(w)) != centre] < np.finfo(float).eps):
            continue
        data = ndimage.correlate1d(data, w, axis=axis, mode="nearest")
        smoothed_any = True
    if not smoothed_any:
        warnings.warn(f"sigma {sigma_mm} mm is below one voxel sample; smoothing is the identity")
        return volume
    return volume.with_data(data)


def _check_min_dims(volume, k=3):
    if min(volume.dims) < k:
        raise ValueError(f"derivative filters need at least {k} voxels per axis, got {volume.dims}")


def gradient_magnitude(volume: Volume) -> Volume:
    """Euclidean norm of central differences; one-sided at the borders."""
    _check_min_dims(volume)
    grads = np.gradient(volume.data, *volume.spacing, edge_order=1)
    return volume.with_data(np.sqrt(sum(g * g for g in grads)))


def _second_difference(data, axis, h):
    d = np.moveaxis(data, axis, 0)
    out = np.empty_like(d)
    out[1:-1] = (d[2:] - 2.0 * d[1:-1] + d[:-2]) / (h * h)
    # one-sided stencil at the borders coincides with the adjacent interior value
    out[0] = out[1]
    out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)


def laplacian(volume: Volume, absolute: bool = False) -> Volume:
    _check_min_dims(volume)
    lap = sum(_second_difference(volume.data, ax, h) for ax, h in enumerate(volume.spacing))
    return volume.with_data(np.abs(lap) if absolute else lap)
