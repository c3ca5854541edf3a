"""Synthetic multi-scanner brain phantoms.

A phantom is a set of nested ellipsoids: the outer one is the brain mask,
the shells are CSF and GM and the core is WM. Optional spherical lesions are
carved out of the WM. Each channel assigns a mean intensity per class; a
scanner profile then distorts the appearance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .types import Mask, ScannerProfile, Volume

CSF, GM, WM, LESION = 0, 1, 2, 3
TISSUE_NAMES = ("CSF", "GM", "WM", "WML")

DEFAULT_INTENSITIES = {
    # CSF, GM, WM, lesion
    "T1": (0.20, 0.55, 0.85, 0.60),
    "T2": (0.95, 0.60, 0.40, 0.80),
    "FLAIR": (0.15, 0.60, 0.50, 1.00),
}


@dataclass(frozen=True)
class PhantomGeometry:
    """Shape and appearance parameters of one phantom.

    ``tissue_fractions`` are the volume fractions of CSF, GM and WM inside the
    brain ellipsoid (before lesions); ``semi_axes`` are fractions of the
    half-extent of the grid along each axis.
    """

    semi_axes: tuple = (0.88, 0.92, 0.85)
    tissue_fractions: tuple = (0.2, 0.45, 0.35)
    wobble: float = 0.0
    wobble_scale_mm: float = 6.0
    lesion_fraction: float = 0.0
    lesion_radius_mm: tuple = (1.5, 3.0)
    channels: tuple = ("T1",)
    intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    tissue_noise: float = 0.04
    tissue_noise_scale_mm: float = 1.0
    partial_volume_sigma_mm: float = 0.7

    def shifted(self, prior_shift):
        """Tissue fractions reweighted by per-class multipliers and renormalized."""
        f = np.asarray(self.tissue_fractions, dtype=float) * np.asarray(prior_shift[:3], dtype=float)
        f = f / f.sum()
        return PhantomGeometry(
            self.semi_axes, tuple(float(v) for v in f), self.wobble, self.wobble_scale_mm,
            self.lesion_fraction, self.lesion_radius_mm, self.channels, self.intensities,
            self.tissue_noise, self.tissue_noise_scale_mm, self.partial_volume_sigma_mm,
        )


def shell_scales(tissue_fractions):
    """Linear scale factors of the GM/WM boundary and the WM boundary."""
    csf, gm, wm = (float(v) for v in tissue_fractions)
    total = csf + gm + wm
    return ((gm + wm) / total) ** (1.0 / 3.0), (wm / total) ** (1.0 / 3.0)


def _smooth_noise(rng, dims, spacing, scale_mm):
    field_ = rng.standard_normal(dims)
    sig = [scale_mm / h for h in spacing]
    field_ = ndimage.gaussian_filter(field_, sig, mode="wrap")
    sd = field_.std()
    return field_ / sd if sd > 0 else field_


def simulate_phantom(dims, spacing=(1.0, 1.0, 1.0), geometry: PhantomGeometry = PhantomGeometry(), seed=0):
    """Generate one phantom.

    Returns ``(channels, mask, labels)``: a list of intensity volumes in the
    order of ``geometry.channels``, the brain mask and a label volume holding
    CSF=0, GM=1, WM=2, lesion=3 inside the mask and -1 outside.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ValueError(f"phantom dims must be >= 16 per axis, got {dims}")
    if not 0 <= geometry.lesion_fraction <= 0.5:
        raise ValueError("requested lesion fraction must lie in [0, 0.5]")
    spacing = tuple(float(s) for s in spacing)
    rng = np.random.default_rng(seed)

    half = np.array([(d - 1) / 2.0 for d in dims])
    axes = half * np.asarray(geometry.semi_axes, dtype=float)
    s_gm, s_wm = shell_scales(geometry.tissue_fractions)
    if np.any(axes * s_wm < 2.0):
        raise ValueError("dims too small to contain the requested geometry")

    grid = np.indices(dims, dtype=np.float64)
    r = np.sqrt(sum(((grid[i] - half[i]) / axes[i]) ** 2 for i in range(3)))

    mask = r <= 1.0
    if mask.sum() < 8:
        raise ValueError("dims too small to contain the requested geometry")

    if geometry.wobble > 0:
        # smooth radial displacement of the inner boundaries, centred over the
        # brain so it reshapes the shells without growing or shrinking them
        wob = _smooth_noise(rng, dims, spacing, geometry.wobble_scale_mm)
        wob = wob - wob[mask].mean()
        sd = wob[mask].std()
        if sd > 0:
            wob = wob / sd
        r_inner = r * (1.0 + np.clip(geometry.wobble * wob, -0.5, 0.5))
    else:
        r_inner = r
    labels = np.full(dims, -1, dtype=np.int64)
    labels[mask] = CSF
    labels[mask & (r_inner <= s_gm)] = GM
    labels[mask & (r_inner <= s_wm)] = WM

    if geometry.lesion_fraction > 0:
        _place_lesions(labels, mask, spacing, geometry, rng)

    channels = []
    for name in geometry.channels:
        means = np.asarray(geometry.intensities[name], dtype=float)
        clean = np.zeros(dims)
        clean[mask] = means[labels[mask]]
        if geometry.tissue_noise > 0:
            tex = _smooth_noise(rng, dims, spacing, geometry.tissue_noise_scale_mm)
            clean[mask] += geometry.tissue_noise * tex[mask]
        if geometry.partial_volume_sigma_mm > 0:
            clean = ndimage.gaussian_filter(
                clean, [geometry.partial_volume_sigma_mm / h for h in spacing], mode="nearest"
            )
        channels.append(Volume(np.maximum(clean, 0.0), spacing, name))
    label_vol = Volume(labels.astype(np.float64), spacing, "labels")
    return channels, Mask(mask), label_vol


def _place_lesions(labels, mask, spacing, geometry, rng):
    target = int(round(geometry.lesion_fraction * mask.sum()))
    wm_idx = np.argwhere(labels == WM)
    if target == 0 or wm_idx.size == 0:
        return
    if target > len(wm_idx):
        raise ValueError("requested lesion fraction exceeds the white-matter volume")
    spacing = np.asarray(spacing)
    dims = np.asarray(labels.shape)
    placed = 0
    for _ in range(10_000):
        if placed >= target:
            break
        lo_r, hi_r = geometry.lesion_radius_mm
        radius = rng.uniform(lo_r, hi_r)
        cell = float(np.prod(spacing))
        needed = (target - placed) * cell
        radius = min(radius, (3.0 * needed / (4.0 * math.pi)) ** (1.0 / 3.0) + 0.5 * spacing.min())
        c = wm_idx[rng.integers(len(wm_idx))]
        ext = np.ceil(radius / spacing).astype(int)
        lo = np.maximum(c - ext, 0)
        hi = np.minimum(c + ext + 1, dims)
        sub = tuple(slice(a, b) for a, b in zip(lo, hi))
        g = np.indices(hi - lo, dtype=float)
        d2 = sum(((g[i] + lo[i] - c[i]) * spacing[i]) ** 2 for i in range(3))
        ball = d2 <= radius * radius
        region = labels[sub]
        hit = ball & (region == WM)
        region[hit] = LESION
        placed += int(hit.sum())


def bias_field(dims, spacing, amplitude, scale_mm, rng):
    """Smooth positive multiplicative field ``exp(amplitude * g)`` with max |g| = 1."""
    if amplitude == 0:
        return None
    g = ndimage.gaussian_filter(rng.standard_normal(dims), [scale_mm / h for h in spacing], mode="nearest")
    peak = np.abs(g).max()
    if peak > 0:
        g = g / peak
    return np.exp(amplitude * g)


def apply_scanner(volume: Volume, profile: ScannerProfile) -> Volume:
    """``gain * input**gamma * bias + offset + noise``, deterministic in ``profile.seed``."""
    x = volume.data
    if np.any(x < 0) and float(profile.gamma) != int(profile.gamma):
        raise ValueError("negative input with non-integer gamma")
    rng = np.random.default_rng(profile.seed)
    out = profile.gain * np.power(x, profile.gamma)
    bias = bias_field(volume.dims, volume.spacing, profile.bias_amplitude, profile.bias_scale, rng)
    if bias is not None:
        out = out * bias
    out = out + profile.offset
    if profile.noise_sigma > 0:
        out = out + rng.normal(0.0, profile.noise_sigma, size=volume.dims)
    return volume.with_data(out)
