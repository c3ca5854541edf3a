"""Raw float32 volume files with a text sidecar header."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .types import Mask, Volume


def write_volume(path, volume: Volume):
    """Write ``<path>.raw`` (little-endian float32, C order over xyz) and ``<path>.hdr``."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    hdr = path.with_suffix(".hdr")
    volume.data.astype("<f4").tofile(raw)
    with open(hdr, "w") as f:
        f.write("format raw_float32_le\n")
        f.write("dims " + " ".join(str(d) for d in volume.dims) + "\n")
        f.write("spacing " + " ".join(repr(s) for s in volume.spacing) + "\n")
        f.write("axis_order xyz\n")
        f.write(f"channel {volume.channel}\n")
    return raw, hdr


def read_volume(path) -> Volume:
    path = Path(path)
    meta = {}
    with open(path.with_suffix(".hdr")) as f:
        for line in f:
            key, _, value = line.strip().partition(" ")
            if key:
                meta[key] = value
    if meta.get("format") != "raw_float32_le" or meta.get("axis_order") != "xyz":
        raise ValueError(f"{path}: unsupported volume header")
    dims = tuple(int(v) for v in meta["dims"].split())
    spacing = tuple(float(v) for v in meta["spacing"].split())
    data = np.fromfile(path.with_suffix(".raw"), dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} voxels, found {data.size}")
    return Volume(data.reshape(dims).astype(np.float64), spacing, meta.get("channel", "intensity"))


def write_mask(path, mask: Mask, spacing=(1.0, 1.0, 1.0)):
    return write_volume(path, Volume(mask.flags.astype(np.float64), spacing, "mask"))


def read_mask(path) -> Mask:
    return Mask(read_volume(path).data > 0.5)
