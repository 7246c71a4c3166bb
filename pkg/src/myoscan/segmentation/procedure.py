"""Sparse-grid localisation, smoothing, and iterative surface refinement.

Any object with ``predict_proba_voxels(volume, voxels) -> (N,)`` works as a
model here. Objects that also provide ``voxel_classifier(volume, roi)`` get
a per-volume cached classifier instead, which matters for refinement.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass
class ProbabilityGrid:
    """Foreground probabilities at every ``stride``-th voxel along each axis."""

    stride: int
    shape: tuple
    probabilities: np.ndarray  # (ceil(nx/s), ceil(ny/s), ceil(nz/s))

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        expected = tuple(-(-n // self.stride) for n in self.shape)
        if self.probabilities.shape != expected:
            raise ValueError(f"grid of shape {self.probabilities.shape} does not match {expected}")
        if self.probabilities.size == 0:
            raise ValueError("probability grid is empty")
        if (self.probabilities < 0).any() or (self.probabilities > 1).any():
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def coords(self):
        return grid_coords(self.shape, self.stride)


@dataclass
class SegmentationResult:
    mask: np.ndarray
    rough: np.ndarray
    grid: ProbabilityGrid = None
    iterations: int = 0
    status: str = "converged"
    classified: int = 0
    history: list = field(default_factory=list)


def grid_coords(shape, stride):
    axes = [np.arange(0, n, stride) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def _classifier(model, volume, roi=None):
    if hasattr(model, "voxel_classifier"):
        return model.voxel_classifier(volume, roi=roi).predict_proba
    return lambda voxels: np.asarray(model.predict_proba_voxels(volume, voxels), dtype=np.float64)


def _shape_of(volume):
    return np.shape(getattr(volume, "voxels", volume))


def classify_sparse_grid(model, volume, stride=5) -> ProbabilityGrid:
    """Classify every ``stride``-th voxel along x, y and z."""
    if stride < 1:
        raise ValueError("stride must be positive")
    shape = _shape_of(volume)
    coords = grid_coords(shape, stride)
    probs = _classifier(model, volume)(coords)
    return ProbabilityGrid(stride, tuple(shape), np.clip(probs, 0.0, 1.0).reshape(
        tuple(-(-n // stride) for n in shape)))


def upsample_nearest(grid: ProbabilityGrid):
    """Dense array where every voxel takes the value of its nearest grid point."""
    idx = [np.minimum(np.floor(np.arange(n) / grid.stride + 0.5).astype(int), g - 1)
           for n, g in zip(grid.shape, grid.probabilities.shape)]
    return grid.probabilities[np.ix_(*idx)]


def gaussian_kernel_1d(kernel_voxels=5, sigma=1.0):
    r = kernel_voxels // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(dense, kernel_voxels=5, sigma=1.0):
    """Separable truncated Gaussian, ``kernel_voxels`` taps, edge values replicated."""
    k = gaussian_kernel_1d(kernel_voxels, sigma)
    out = np.asarray(dense, dtype=np.float64)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return out


def rough_segmentation(grid: ProbabilityGrid, kernel_voxels=5, threshold=0.5, sigma=1.0):
    """Upsample, smooth and threshold a probability grid.

    Returns ``(mask, status)`` with status ``"ok"`` or ``"empty rough segmentation"``.
    """
    smoothed = smooth(upsample_nearest(grid), kernel_voxels, sigma)
    mask = smoothed >= threshold
    status = "ok" if mask.any() else "empty rough segmentation"
    if not mask.any():
        log.warning("empty rough segmentation")
    return mask, status


def _shells(mask):
    inner = mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    outer = ndimage.binary_dilation(mask, structure=_SIX) & ~mask
    return inner, outer


def refine_surface(model, volume, rough, max_iters=50, threshold=0.5, roi_margin=4):
    """Iteratively reclassify the 6-connected surface of ``rough``.

    Each iteration classifies the not-yet-classified voxels of the inner
    surface (mask voxels with a background neighbour) and the outer shell
    (background voxels next to the mask). Inner voxels classified as
    background are removed for good; outer voxels classified as foreground
    are added. A voxel is classified at most once. Voxels strictly inside
    the current mask are never queried.

    Returns a :class:`SegmentationResult` whose ``status`` is
    ``"converged"``, ``"max_iters"`` or ``"empty"``.
    """
    mask = np.asarray(rough, dtype=bool).copy()
    if not mask.any():
        raise ValueError("rough segmentation is empty")
    roi = None
    if roi_margin is not None:
        idx = np.argwhere(mask)
        roi = (idx.min(axis=0) - roi_margin, idx.max(axis=0) + roi_margin)
    classify = _classifier(model, volume, roi)
    known = np.zeros(mask.shape, dtype=bool)
    removed = np.zeros(mask.shape, dtype=bool)
    result = SegmentationResult(mask=mask, rough=np.asarray(rough, bool).copy(), status="max_iters")
    for it in range(1, max_iters + 1):
        inner, outer = _shells(mask)
        query = (inner | outer) & ~known & ~removed
        voxels = np.argwhere(query)
        added = removed_now = 0
        if len(voxels):
            fg = classify(voxels) >= threshold
            known[query] = True
            result.classified += len(voxels)
            v_in = inner[tuple(voxels.T)]
            drop = voxels[v_in & ~fg]
            grow = voxels[~v_in & fg]
            mask[tuple(drop.T)] = False
            removed[tuple(drop.T)] = True
            mask[tuple(grow.T)] = True
            added, removed_now = len(grow), len(drop)
        result.history.append((it, len(voxels), added, removed_now))
        result.iterations = it
        if not mask.any():
            result.status = "empty"
            break
        if added == 0 and removed_now == 0:
            result.status = "converged"
            break
    if result.status == "max_iters":
        log.warning("surface refinement stopped after %d iterations", max_iters)
    result.mask = mask
    return result


def segment_volume(model, volume, stride=5, kernel_voxels=5, sigma=1.0, threshold=0.5, max_iters=50):
    """Sparse grid, rough mask, refined mask; never raises on empty results."""
    grid = classify_sparse_grid(model, volume, stride)
    rough, status = rough_segmentation(grid, kernel_voxels, threshold, sigma)
    if status != "ok":
        return SegmentationResult(mask=rough.copy(), rough=rough, grid=grid, status="empty rough segmentation")
    result = refine_surface(model, volume, rough, max_iters=max_iters, threshold=threshold)
    result.grid = grid
    return result
