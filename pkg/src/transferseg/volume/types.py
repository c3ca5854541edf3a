from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when an input is numerically degenerate (e.g. constant intensities)."""


def _triple(values, kind):
    out = tuple(kind(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"expected 3 values, got {len(out)}")
    return out


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid.

    ``data`` is indexed ``data[x, y, z]`` (axis order ``xyz``) and stored
    C-contiguous, so z varies fastest when flattened.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    channel: str = "intensity"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError("all dims must be >= 1")
        spacing = _triple(self.spacing, float)
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data, channel=None):
        return Volume(data, self.spacing, self.channel if channel is None else channel)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.channel == other.channel
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class Mask:
    flags: np.ndarray

    def __post_init__(self):
        flags = np.ascontiguousarray(np.asarray(self.flags, dtype=bool))
        if flags.ndim != 3:
            raise ValueError("mask must be 3D")
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @property
    def dims(self):
        return tuple(int(d) for d in self.flags.shape)

    @property
    def count(self):
        return int(self.flags.sum())

    def check_matches(self, volume: Volume):
        if self.dims != volume.dims:
            raise ValueError(f"mask dims {self.dims} do not match volume dims {volume.dims}")

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return np.array_equal(self.flags, other.flags)


@dataclass(frozen=True)
class ScannerProfile:
    """Appearance model of one scanner/protocol.

    ``prior_shift`` multiplies per-class tissue volumes when a study's
    phantoms are generated; :func:`apply_scanner` ignores it.
    """

    gamma: float = 1.0
    gain: float = 1.0
    offset: float = 0.0
    bias_amplitude: float = 0.0
    bias_scale: float = 40.0
    noise_sigma: float = 0.0
    prior_shift: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0 or self.gain <= 0 or self.bias_scale <= 0:
            raise ValueError("gamma, gain and bias_scale must be positive")
        if self.noise_sigma < 0 or self.bias_amplitude < 0:
            raise ValueError("noise_sigma and bias_amplitude must be >= 0")
        shift = tuple(float(s) for s in self.prior_shift)
        if any(s <= 0 for s in shift):
            raise ValueError("prior_shift entries must be > 0")
        object.__setattr__(self, "prior_shift", shift)


@dataclass(frozen=True)
class FeatureRecipe:
    scales: tuple
    include_position: bool
    channels: tuple
    designated_channel: int = 0
    absolute_laplacian: bool = True

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if not scales or any(s <= 0 for s in scales):
            raise ValueError("scales must be non-empty and strictly positive")
        channels = tuple(str(c) for c in self.channels)
        if not channels:
            raise ValueError("recipe needs at least one channel")
        if not 0 <= self.designated_channel < len(channels):
            raise ValueError("designated_channel out of range")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "channels", channels)

    @property
    def per_channel(self):
        return 1 + 3 * len(self.scales)

    @property
    def n_features(self):
        return len(self.channels) * self.per_channel + (3 if self.include_position else 0)

    @property
    def designated_feature(self):
        """Column holding the raw intensity of the designated channel."""
        return self.designated_channel * self.per_channel

    def feature_names(self):
        names = []
        for ch in self.channels:
            names.append(f"{ch}:I")
            for s in self.scales:
                names += [f"{ch}:G{s:g}", f"{ch}:grad{s:g}", f"{ch}:lap{s:g}"]
        if self.include_position:
            names += ["pos_x", "pos_y", "pos_z"]
        return names


BT_RECIPE = FeatureRecipe(scales=(1.0, 2.0, 3.0), include_position=True, channels=("T1",))
WML_RECIPE = FeatureRecipe(
    scales=(0.5, 1.0, 2.0), include_position=False, channels=("T1", "T2", "FLAIR"), designated_channel=2
)


@dataclass(frozen=True, eq=False)
class SampleBag:
    """One image as an unordered set of voxel feature vectors."""

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    class_names: tuple = ()
    source_tag: str = ""
    index: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError(f"features must be a non-empty N x n matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("bag contains non-finite features")
        X.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.labels is not None:
            y = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
            if y.shape != (X.shape[0],):
                raise ValueError("labels length must match number of samples")
            if y.size and (y.min() < 0 or y.max() >= len(self.class_names)):
                raise ValueError("labels must index class_names")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)
        if self.index is not None:
            idx = np.ascontiguousarray(np.asarray(self.index, dtype=np.int64))
            if idx.shape != (X.shape[0],):
                raise ValueError("index length must match number of samples")
            idx.setflags(write=False)
            object.__setattr__(self, "index", idx)

    @property
    def n(self):
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    @property
    def labeled(self):
        return self.labels is not None

    def take(self, rows: Sequence[int]) -> "SampleBag":
        rows = np.asarray(rows, dtype=np.int64)
        return SampleBag(
            self.features[rows],
            None if self.labels is None else self.labels[rows],
            self.class_names,
            self.source_tag,
            None if self.index is None else self.index[rows],
        )

    def unlabeled(self) -> "SampleBag":
        return SampleBag(self.features, None, self.class_names, self.source_tag, self.index)

    def __eq__(self, other):
        if not isinstance(other, SampleBag):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            np.array_equal(self.features, other.features)
            and same(self.labels, other.labels)
            and self.class_names == other.class_names
            and self.source_tag == other.source_tag
        )
