"""Volume type, the VOL3 binary format and per-volume intensity normalization.

VOL3 layout (all little-endian)::

    bytes 0-3    magic b"VOL3"
    bytes 4-15   three uint32 dims (x, y, z)
    bytes 16-    x*y*z float32 voxels, x fastest: index = (z*dimY + y)*dimX + x
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError, PreconditionError, ShapeError

VOL3_MAGIC = b"VOL3"
_HEADER = struct.Struct("<4sIII")
# refuse headers that would ask for more than 2**31 voxels
_MAX_VOXELS = 2**31


@dataclass(frozen=True, eq=False)
class Volume:
    """A dense 3D scalar field.

    ``data`` is indexed ``data[x, y, z]``; the on-disk/scan order is x-fastest.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume needs three positive dims, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NumericError("volume contains non-finite voxels")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @classmethod
    def from_voxels(cls, dims, voxels) -> "Volume":
        """Build from a flat x-fastest voxel sequence."""
        dims = tuple(int(d) for d in dims)
        voxels = np.asarray(voxels, dtype=np.float32).ravel()
        if len(dims) != 3 or voxels.size != dims[0] * dims[1] * dims[2]:
            raise ShapeError(f"{voxels.size} voxels do not fill dims {dims}")
        return cls(voxels.reshape(dims, order="F"))

    def voxels(self) -> np.ndarray:
        """Flat x-fastest view of the voxels."""
        return self.data.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)


def write_volume(volume: Volume, path) -> None:
    x, y, z = volume.dims
    payload = volume.voxels().astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VOL3_MAGIC, x, y, z))
        fh.write(payload)


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_volume(raw, name=os.fspath(path))


def parse_volume(raw: bytes, name: str = "<bytes>") -> Volume:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{name}: header truncated, {len(raw)} of {_HEADER.size} bytes", offset=len(raw))
    magic, x, y, z = _HEADER.unpack_from(raw, 0)
    if magic != VOL3_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {VOL3_MAGIC!r}", offset=0)
    if min(x, y, z) < 1:
        raise FormatError(f"{name}: zero dimension in header ({x}, {y}, {z})", offset=4)
    count = x * y * z
    if count > _MAX_VOXELS:
        raise FormatError(f"{name}: dims ({x}, {y}, {z}) overflow the voxel limit", offset=4)
    expected = _HEADER.size + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"{name}: payload length mismatch for dims ({x}, {y}, {z}): "
            f"file has {len(raw)} bytes, expected {expected}",
            offset=min(len(raw), expected),
        )
    voxels = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    try:
        return Volume.from_voxels((x, y, z), voxels)
    except NumericError as exc:
        raise FormatError(f"{name}: {exc}", offset=_HEADER.size) from exc


def normalize_intensity(volume) -> Volume:
    """Z-score a volume over all of its voxels.

    Accepts a ``Volume`` or a bare 3D array; always returns a ``Volume``.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    return Volume(_zscore(data))


def _zscore(data: np.ndarray) -> np.ndarray:
    d64 = data.astype(np.float64)
    mean = d64.mean()
    std = d64.std()
    if not std > 0 or std < 1e-12 * max(1.0, abs(mean)):
        raise PreconditionError("cannot normalize a constant volume (zero variance)")
    return ((d64 - mean) / std).astype(np.float32)
