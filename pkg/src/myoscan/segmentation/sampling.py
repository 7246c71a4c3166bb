"""Class-balanced training-voxel sampling with distance-weighted negatives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import ndimage

from ..errors import ParameterError
from .patches import PatchExtractor


@dataclass
class _Pool:
    voxels: np.ndarray  # (n, 4): volume index, x, y, z
    cumulative: np.ndarray  # cumulative weights, None for uniform


class VoxelSampler:
    """Draws balanced positive/negative training voxels from several volumes.

    Positives are drawn uniformly from all mask voxels. Negatives closer than
    ``near_distance`` voxels (Euclidean, voxel units) to the mask are drawn
    ``near_weight`` times as often as any single farther negative.

    Parameters
    ----------
    masks : list of ndarray of bool
    near_distance : float
    near_weight : float
    min_shape : tuple of int, optional
        Smallest acceptable volume shape.
    """

    def __init__(self, masks: List[np.ndarray], near_distance=80.0, near_weight=4.0, min_shape=None):
        if not masks:
            raise ParameterError("at least one training mask is required")
        pos, neg, weights = [], [], []
        for i, mask in enumerate(masks):
            mask = np.asarray(mask, dtype=bool)
            if min_shape is not None and any(s < m for s, m in zip(mask.shape, min_shape)):
                raise ParameterError(f"volume {i} of shape {mask.shape} is smaller than {min_shape}")
            if not mask.any():
                raise ParameterError(f"mask {i} is empty")
            if mask.all():
                raise ParameterError(f"mask {i} has no background voxels to sample")
            dist = ndimage.distance_transform_edt(~mask)
            p = np.argwhere(mask)
            n = np.argwhere(~mask)
            pos.append(np.column_stack([np.full(len(p), i), p]))
            neg.append(np.column_stack([np.full(len(n), i), n]))
            weights.append(np.where(dist[~mask] < near_distance, near_weight, 1.0))
        self.positives = np.concatenate(pos)
        self.negatives = np.concatenate(neg)
        self.negative_weights = np.concatenate(weights)
        self._neg_cdf = np.cumsum(self.negative_weights)
        self.near_distance = near_distance
        self.near_weight = near_weight

    def draw_negatives(self, rng, n):
        u = rng.random(n) * self._neg_cdf[-1]
        idx = np.searchsorted(self._neg_cdf, u, side="right")
        return np.minimum(idx, len(self._neg_cdf) - 1)

    def sample(self, rng, batch_size):
        """``(voxels (B, 4), labels (B,))`` with ``batch_size // 2`` positives.

        Odd batch sizes give the extra sample to the negatives.
        """
        if batch_size < 2:
            raise ParameterError("batch_size must be at least 2 for a balanced batch")
        n_pos = batch_size // 2
        p = self.positives[rng.integers(len(self.positives), size=n_pos)]
        q = self.negatives[self.draw_negatives(rng, batch_size - n_pos)]
        voxels = np.concatenate([p, q])
        labels = np.concatenate([np.ones(n_pos, np.int64), np.zeros(batch_size - n_pos, np.int64)])
        return voxels, labels


def sample_training_batch(volume, mask, rng, batch_size, near_distance=80.0, near_weight=4.0):
    """One labelled batch of triplanar patches from a single volume.

    Returns ``(inputs, labels, voxels)`` where ``inputs`` holds the six
    network input arrays (see :meth:`PatchExtractor.network_inputs`).
    """
    voxels_arr = getattr(volume, "voxels", volume)
    if np.shape(voxels_arr) != np.shape(mask):
        raise ParameterError(f"volume shape {np.shape(voxels_arr)} differs from mask shape {np.shape(mask)}")
    sampler = VoxelSampler([mask], near_distance, near_weight)
    voxels, labels = sampler.sample(rng, batch_size)
    inputs = PatchExtractor(voxels_arr).network_inputs(voxels[:, 1:])
    return inputs, labels, voxels[:, 1:]
