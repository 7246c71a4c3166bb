"""Overlap and surface-distance metrics for binary masks."""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_SIX = ndimage.generate_binary_structure(3, 1)


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b):
    """Dice overlap ``2|a & b| / (|a| + |b|)``; 1.0 when both masks are empty."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask):
    """Foreground voxels with at least one 6-neighbour outside the mask.

    Voxels beyond the array border count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~interior


def mad(a, b, spacing=(1.0, 1.0, 1.0)):
    """Mean absolute surface distance in mm.

    Every surface voxel of either mask contributes its distance to the
    nearest surface voxel of the other mask; the result is the mean over the
    pooled set of both surfaces, so ``mad(a, b) == mad(b, a)``.
    """
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise ValueError("surface distance is undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface_voxels(a)) * sp
    pb = np.argwhere(surface_voxels(b)) * sp
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    return float((da.sum() + db.sum()) / (len(da) + len(db)))
