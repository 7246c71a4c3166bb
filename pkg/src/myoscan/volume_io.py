"""MYOV volume and MYOM mask containers.

MYOV (little-endian): ``b"MYOV"``, u32 version, 3 x u32 dims (nx, ny, nz),
3 x f64 spacing in mm, then nx*ny*nz f32 voxels in C order (z fastest).

MYOM: ``b"MYOM"``, u32 version, 3 x u32 dims, u64 run count, then u32 run
lengths over the C-ordered voxels, alternating background/foreground and
starting with background (the first run may be empty).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff.serialize import FormatError, atomic_write

VOLUME_MAGIC = b"MYOV"
MASK_MAGIC = b"MYOM"
VERSION = 1


@dataclass
class Volume:
    """Scalar 3D grid with physical voxel spacing (mm)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self):
        return self.voxels.shape

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.spacing == other.spacing
                and np.array_equal(self.voxels, other.voxels))


def _header(magic, dims):
    return magic + struct.pack("<I3I", VERSION, *dims)


def _check_header(blob, magic):
    if len(blob) < 20 or blob[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file")
    version, nx, ny, nz = struct.unpack_from("<I3I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return (nx, ny, nz)


def dumps_volume(volume: Volume) -> bytes:
    return (_header(VOLUME_MAGIC, volume.dims) + struct.pack("<3d", *volume.spacing)
            + np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def loads_volume(blob: bytes) -> Volume:
    dims = _check_header(blob, VOLUME_MAGIC)
    if len(blob) < 44:
        raise FormatError("truncated MYOV header")
    spacing = struct.unpack_from("<3d", blob, 20)
    count = int(np.prod(dims))
    if len(blob) != 44 + 4 * count:
        raise FormatError(f"MYOV payload holds {len(blob) - 44} bytes, expected {4 * count}")
    voxels = np.frombuffer(blob, dtype="<f4", count=count, offset=44).reshape(dims)
    return Volume(voxels.astype(np.float32), spacing)


def dumps_mask(mask) -> bytes:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError("mask must be 3D")
    flat = mask.reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0]:
        runs = np.concatenate([[0], runs])
    return (_header(MASK_MAGIC, mask.shape) + struct.pack("<Q", runs.size)
            + runs.astype("<u4").tobytes())


def loads_mask(blob: bytes) -> np.ndarray:
    dims = _check_header(blob, MASK_MAGIC)
    if len(blob) < 28:
        raise FormatError("truncated MYOM header")
    (n_runs,) = struct.unpack_from("<Q", blob, 20)
    if len(blob) != 28 + 4 * n_runs:
        raise FormatError("MYOM run table is truncated or has trailing bytes")
    runs = np.frombuffer(blob, dtype="<u4", count=n_runs, offset=28).astype(np.int64)
    total = int(np.prod(dims))
    if runs.sum() != total:
        raise FormatError(f"MYOM runs cover {runs.sum()} voxels, expected {total}")
    values = np.arange(n_runs) % 2 == 1
    return np.repeat(values, runs).reshape(dims)


def save_volume(path, volume: Volume):
    atomic_write(path, dumps_volume(volume))


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        return loads_volume(fh.read())


def save_mask(path, mask):
    atomic_write(path, dumps_mask(mask))


def load_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads_mask(fh.read())
