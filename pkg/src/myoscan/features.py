"""Spatial clustering of myocardium voxels and per-patient encoding statistics.

The mask is split into ``k`` compact regions by k-means on physical (mm)
voxel coordinates. For every region and encoding channel the population
standard deviation over the region's voxels is computed; a patient's feature
vector is the per-channel maximum over regions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ParameterError


@dataclass
class ClusterAssignment:
    """Cluster label per voxel plus centroids in mm.

    ``indices`` are the C-order linear indices of the clustered voxels in
    ascending order, and ``labels[i]`` belongs to ``indices[i]``.
    """

    k: int
    centroids: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    shape: tuple
    spacing: tuple
    objective: float = float("nan")
    objective_trace: list = field(default_factory=list)

    def coordinates(self):
        vox = np.column_stack(np.unravel_index(self.indices.astype(np.int64), self.shape))
        return vox * np.asarray(self.spacing, dtype=np.float64)


@dataclass
class PatientFeatures:
    features: np.ndarray
    provenance: dict = field(default_factory=dict)


def _sq_dist(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest_centroid(x, centroids, chunk=8192):
    """Index of the nearest centroid for every row of ``x`` (ties: lowest index)."""
    out = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), chunk):
        out[s:s + chunk] = _sq_dist(x[s:s + chunk], centroids).argmin(axis=1)
    return out


def kmeans_objective(x, centroids, labels):
    return float(((x - centroids[labels]) ** 2).sum())


class MiniBatchKMeansVoxels(BaseEstimator):
    """Mini-batch k-means with per-centre learning rates and a Lloyd finish.

    Parameters
    ----------
    n_clusters : int
    batch_size : int, default=256
    max_iter : int, default=100
        Mini-batch steps per initialisation.
    n_init : int, default=10
        Random initialisations (``k`` distinct points each); the one with
        the lowest full-data objective after the mini-batch phase is kept.
    refine_iter : int, default=100
        Maximum full-batch passes. Each pass recomputes centroid means and
        reassigns every point; it stops once assignments no longer change.
    random_state : int, optional

    Attributes
    ----------
    cluster_centers_ : ndarray of shape (n_clusters, n_features)
    labels_ : ndarray of shape (n_samples,)
        Nearest centroid of every point (Voronoi consistent).
    inertia_ : float
    objective_trace_ : list of float
        Objective after the mini-batch phase and after each refinement pass.
    """

    def __init__(self, n_clusters, batch_size=256, max_iter=100, n_init=10, refine_iter=100, random_state=None):
        self.n_clusters = n_clusters
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.n_init = n_init
        self.refine_iter = refine_iter
        self.random_state = random_state

    def _minibatch(self, x, rng):
        k = self.n_clusters
        centers = x[rng.choice(len(x), size=k, replace=False)].copy()
        counts = np.zeros(k)
        b = min(self.batch_size, len(x))
        for _ in range(self.max_iter):
            batch = x[rng.integers(len(x), size=b)]
            lab = nearest_centroid(batch, centers)
            m = np.bincount(lab, minlength=k).astype(np.float64)
            sums = np.zeros_like(centers)
            np.add.at(sums, lab, batch)
            hit = m > 0
            # sequential updates with rate 1/count collapse to a running mean
            centers[hit] = (centers[hit] * counts[hit, None] + sums[hit]) / (counts[hit] + m[hit])[:, None]
            counts += m
        return centers

    def fit(self, x, y=None):
        x = np.asarray(x, dtype=np.float64)
        k = self.n_clusters
        if k < 1:
            raise ParameterError("n_clusters must be positive")
        if len(x) < k:
            raise ParameterError(f"{len(x)} points cannot form {k} clusters")
        rng = np.random.default_rng(self.random_state)
        if k == len(x):
            centers, labels = x.copy(), np.arange(k)
            self.cluster_centers_, self.labels_ = centers, labels
            self.inertia_ = 0.0
            self.objective_trace_ = [0.0]
            return self
        best = None
        for _ in range(self.n_init):
            c = self._minibatch(x, rng)
            obj = kmeans_objective(x, c, nearest_centroid(x, c))
            if best is None or obj < best[0]:
                best = (obj, c)
        centers = best[1]
        labels = nearest_centroid(x, centers)
        trace = [kmeans_objective(x, centers, labels)]
        for _ in range(self.refine_iter):
            counts = np.bincount(labels, minlength=k)
            sums = np.zeros_like(centers)
            np.add.at(sums, labels, x)
            filled = counts > 0
            centers[filled] = sums[filled] / counts[filled, None]
            for c in np.flatnonzero(~filled):
                centers[c] = x[rng.integers(len(x))]
            new = nearest_centroid(x, centers)
            trace.append(kmeans_objective(x, centers, new))
            if np.array_equal(new, labels) and filled.all():
                break
            labels = new
        self.cluster_centers_ = centers
        self.labels_ = labels
        self.inertia_ = trace[-1]
        self.objective_trace_ = trace
        return self


def default_cluster_count(n_voxels, full_scale=500, voxels_per_cluster=20):
    """``min(full_scale, n_voxels // voxels_per_cluster)``, at least 1."""
    return max(1, min(full_scale, n_voxels // voxels_per_cluster))


def cluster_voxels(mask, k, seed=None, spacing=(1.0, 1.0, 1.0), indices=None, **kmeans_params) -> ClusterAssignment:
    """Cluster mask voxels on mm-scaled coordinates.

    ``indices`` restricts clustering to a subset of mask voxels (C-order
    linear indices); by default every mask voxel is used.
    """
    mask = np.asarray(mask, dtype=bool)
    if indices is None:
        indices = np.flatnonzero(mask.reshape(-1))
    else:
        indices = np.unique(np.asarray(indices, dtype=np.int64))
        if not mask.reshape(-1)[indices].all():
            raise ParameterError("some indices lie outside the mask")
    if len(indices) < k:
        raise ParameterError(f"mask has {len(indices)} voxels, fewer than k={k}")
    spacing = tuple(float(s) for s in spacing)
    coords = np.column_stack(np.unravel_index(indices, mask.shape)) * np.asarray(spacing)
    km = MiniBatchKMeansVoxels(k, random_state=seed, **kmeans_params).fit(coords)
    return ClusterAssignment(k, km.cluster_centers_, km.labels_, indices.astype(np.uint64), mask.shape,
                             spacing, km.inertia_, km.objective_trace_)


def _aligned(encodings, assignment):
    e_idx = np.asarray(encodings.indices, dtype=np.int64)
    a_idx = np.asarray(assignment.indices, dtype=np.int64)
    eo, ao = np.argsort(e_idx, kind="stable"), np.argsort(a_idx, kind="stable")
    if len(e_idx) != len(a_idx) or not np.array_equal(e_idx[eo], a_idx[ao]):
        raise ParameterError("encodings and cluster assignment cover different voxels")
    return np.asarray(encodings.encodings, dtype=np.float64)[eo], np.asarray(assignment.labels)[ao]


def cluster_encoding_std(encodings, assignment):
    """``(k, d)`` population standard deviations per cluster (two-pass).

    Empty and singleton clusters give zero rows.
    """
    x, labels = _aligned(encodings, assignment)
    k = assignment.k
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    sq = np.zeros_like(sums)
    np.add.at(sq, labels, (x - means[labels]) ** 2)
    var = np.divide(sq, counts[:, None], out=np.zeros_like(sq), where=counts[:, None] > 0)
    return np.sqrt(var)


def aggregate_max_features(std_matrix, provenance=None) -> PatientFeatures:
    std_matrix = np.asarray(std_matrix, dtype=np.float64)
    if std_matrix.ndim != 2 or std_matrix.shape[0] < 1:
        raise ParameterError("need a (k >= 1, d) matrix")
    return PatientFeatures(std_matrix.max(axis=0), dict(provenance or {}))


def patient_features(encodings, spacing, k=None, seed=None, **kmeans_params) -> PatientFeatures:
    """Cluster the encoded voxels, then reduce to the per-channel max of cluster stds."""
    n = len(encodings.indices)
    k = default_cluster_count(n) if k is None else k
    mask = np.zeros(int(np.prod(encodings.shape)), dtype=bool)
    mask[np.asarray(encodings.indices, dtype=np.int64)] = True
    assignment = cluster_voxels(mask.reshape(encodings.shape), k, seed, spacing, **kmeans_params)
    return aggregate_max_features(cluster_encoding_std(encodings, assignment),
                                  {"k": k, "d": encodings.d, "seed": seed})


class RegionalStdMaxFeatures(TransformerMixin, BaseEstimator):
    """Turn a list of encoding maps into a ``(n_patients, d)`` feature matrix.

    Parameters
    ----------
    spacing : tuple of float
    n_clusters : int, optional
        Defaults to ``min(500, n_voxels // 20)`` per patient.
    random_state : int, optional
        Clustering seed, shared by all patients.
    """

    def __init__(self, spacing=(1.0, 1.0, 1.0), n_clusters=None, random_state=None):
        self.spacing = spacing
        self.n_clusters = n_clusters
        self.random_state = random_state

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.vstack([patient_features(e, self.spacing, self.n_clusters, self.random_state).features
                          for e in X])


__all__ = [
    "ClusterAssignment",
    "MiniBatchKMeansVoxels",
    "PatientFeatures",
    "RegionalStdMaxFeatures",
    "aggregate_max_features",
    "cluster_encoding_std",
    "cluster_voxels",
    "default_cluster_count",
    "nearest_centroid",
    "patient_features",
]
