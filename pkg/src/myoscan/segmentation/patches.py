"""Intensity normalisation and triplanar patch extraction.

Plane conventions for a voxel ``(x, y, z)``: the axial patch lies in slice
``z`` with rows along x and columns along y; the coronal patch lies in
slice ``y`` with rows along x and columns along z; the sagittal patch lies in
slice ``x`` with rows along y and columns along z. Patches have odd size and
the target voxel sits at the centre. Samples outside the volume are zero
after normalisation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

HU_LOW = -400.0
HU_HIGH = 1200.0
SMALL = 49
LARGE = 147
PLANES = ("axial", "coronal", "sagittal")
# the two in-plane axes of each orientation
PLANE_AXES = {"axial": (0, 1), "coronal": (0, 2), "sagittal": (1, 2)}


def normalize_intensity(voxels, low=HU_LOW, high=HU_HIGH):
    """Clamp to ``[low, high]`` and map affinely onto ``[0, 1]`` (float32)."""
    v = np.clip(np.asarray(voxels, dtype=np.float32), low, high)
    return ((v - np.float32(low)) / np.float32(high - low)).astype(np.float32)


@dataclass
class TriplanarPatchSet:
    """Axial, coronal and sagittal patches at two scales around one voxel."""

    small: np.ndarray  # (3, 49, 49)
    large: np.ndarray  # (3, 147, 147)
    voxel: tuple

    def pooled_large(self, size=3):
        """Large patches after non-overlapping ``size x size`` max pooling."""
        p, h, w = self.large.shape
        return self.large.reshape(p, h // size, size, w // size, size).max(axis=(2, 4))


class PatchExtractor:
    """Batched patch extraction from one volume.

    The volume is normalised once and zero-padded by half the largest patch
    so every voxel's patches are plain slices of the padded array.
    """

    def __init__(self, voxels, sizes=(SMALL, LARGE), normalized=False):
        self.shape = tuple(np.shape(voxels))
        self.sizes = tuple(sizes)
        self.pad = max(self.sizes) // 2
        norm = np.asarray(voxels, np.float32) if normalized else normalize_intensity(voxels)
        self.padded = np.pad(norm, self.pad)
        self._views = {}

    def _view(self, plane, size):
        key = (plane, size)
        if key not in self._views:
            self._views[key] = sliding_window_view(self.padded, (size, size), axis=PLANE_AXES[plane])
        return self._views[key]

    def check_voxels(self, voxels):
        voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        if ((voxels < 0) | (voxels >= np.array(self.shape))).any():
            bad = voxels[((voxels < 0) | (voxels >= np.array(self.shape))).any(axis=1)][0]
            raise IndexError(f"voxel {tuple(bad)} lies outside volume of shape {self.shape}")
        return voxels

    def extract(self, voxels, plane, size):
        """Patches ``(N, size, size)`` for one plane and size."""
        voxels = self.check_voxels(voxels)
        half = size // 2
        # index into the window view: window start = voxel + pad - half on
        # the in-plane axes, voxel + pad on the slice axis
        start = voxels + self.pad
        a, b = PLANE_AXES[plane]
        start[:, a] -= half
        start[:, b] -= half
        return self._view(plane, size)[start[:, 0], start[:, 1], start[:, 2]]

    def network_inputs(self, voxels):
        """Six arrays ``(N, 1, s, s)``: small axial/coronal/sagittal, then large."""
        voxels = self.check_voxels(voxels)
        out = []
        for size in self.sizes:
            for plane in PLANES:
                out.append(self.extract(voxels, plane, size)[:, None])
        return out


def extract_triplanar_patches(volume, voxel, small=SMALL, large=LARGE) -> TriplanarPatchSet:
    """Patch set around ``voxel`` of a raw-intensity volume (array or Volume)."""
    voxels = getattr(volume, "voxels", volume)
    ex = PatchExtractor(voxels, sizes=(small, large))
    v = ex.check_voxels([voxel])
    return TriplanarPatchSet(
        small=np.stack([ex.extract(v, p, small)[0] for p in PLANES]),
        large=np.stack([ex.extract(v, p, large)[0] for p in PLANES]),
        voxel=tuple(int(c) for c in v[0]),
    )
