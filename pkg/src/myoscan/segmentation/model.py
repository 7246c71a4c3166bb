"""Multiscale triplanar voxel classifier with an sklearn-style interface."""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..autodiff import Network, OptimizerState, load_weights, save_weights, sgd_nesterov_step
from ..errors import ParameterError, TrainingError
from .architecture import DEFAULT_FILTERS, DEFAULT_UNITS, build_segmentation_spec, input_names
from .dense import DenseVoxelClassifier
from .patches import PatchExtractor
from .sampling import VoxelSampler

log = logging.getLogger(__name__)


def _voxels_of(volume):
    return np.asarray(getattr(volume, "voxels", volume), dtype=np.float32)


class MultiscaleSegmenter(ClassifierMixin, BaseEstimator):
    """Voxel classifier over two scales of axial/coronal/sagittal patches.

    Parameters
    ----------
    filters : tuple of int, default=(16, 32, 64)
        Filter counts of the three convolution pairs in every stream.
    units : int, default=256
        Width of every dense fusion layer.
    drop_rate : float, default=0.5
        Dropout after every hidden dense layer.
    epochs : int, default=200
    minibatches_per_epoch : int, default=200
    batch_size : int, default=500
        Balanced: half foreground, half background voxels.
    learning_rate : float, default=0.1
    momentum : float, default=0.9
        Nesterov momentum.
    near_distance : float, default=80
        Background voxels closer than this (voxels) to the mask are drawn
        ``near_weight`` times as often as the rest.
    near_weight : float, default=4
    random_state : int, optional
        Seeds weight initialisation, dropout and batch sampling.

    Attributes
    ----------
    network_ : Network
    loss_trace_ : ndarray of shape (epochs,)
        Mean training loss per epoch.
    classes_ : ndarray
        ``[0, 1]`` (background, foreground).
    """

    def __init__(self, filters=DEFAULT_FILTERS, units=DEFAULT_UNITS, drop_rate=0.5, epochs=200,
                 minibatches_per_epoch=200, batch_size=500, learning_rate=0.1, momentum=0.9,
                 near_distance=80.0, near_weight=4.0, random_state=None):
        self.filters = filters
        self.units = units
        self.drop_rate = drop_rate
        self.epochs = epochs
        self.minibatches_per_epoch = minibatches_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.near_distance = near_distance
        self.near_weight = near_weight
        self.random_state = random_state

    def _build(self, seed):
        spec = build_segmentation_spec(tuple(self.filters), self.units, self.drop_rate)
        return Network(spec, dtype=np.float32, seed=seed)

    def fit(self, volumes, masks, callback=None):
        """Train on paired volumes and reference masks.

        ``callback(epoch, loss)`` is called after every epoch when given.
        """
        if len(volumes) != len(masks) or not volumes:
            raise ParameterError("need equally many (>= 1) volumes and masks")
        for v, m in zip(volumes, masks):
            if _voxels_of(v).shape != np.shape(m):
                raise ParameterError("volume and mask shapes differ")
        if self.epochs < 1 or self.minibatches_per_epoch < 1:
            raise ParameterError("epochs and minibatches_per_epoch must be positive")
        init_seq, sample_seq = np.random.SeedSequence(self.random_state).spawn(2)
        net = self._build(init_seq)
        rng = np.random.default_rng(sample_seq)
        sampler = VoxelSampler(masks, self.near_distance, self.near_weight)
        extractors = [PatchExtractor(_voxels_of(v)) for v in volumes]
        state = OptimizerState(self.learning_rate, self.momentum)
        trace = []
        net.train()
        for epoch in range(self.epochs):
            losses = []
            for _ in range(self.minibatches_per_epoch):
                voxels, labels = sampler.sample(rng, self.batch_size)
                inputs = self._batch_inputs(extractors, voxels)
                net.forward(inputs)
                loss = net.backward("cross_entropy_softmax", labels)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch)
                sgd_nesterov_step(net.params, state)
                losses.append(loss)
            trace.append(float(np.mean(losses)))
            log.info("segmentation epoch %d loss %.5f", epoch, trace[-1])
            if callback is not None:
                callback(epoch, trace[-1])
        net.eval()
        self.network_ = net
        self.loss_trace_ = np.asarray(trace)
        self.classes_ = np.array([0, 1])
        return self

    @staticmethod
    def _batch_inputs(extractors, voxels):
        n = len(voxels)
        out = None
        for vi in np.unique(voxels[:, 0]):
            sel = np.flatnonzero(voxels[:, 0] == vi)
            arrays = extractors[vi].network_inputs(voxels[sel, 1:])
            if out is None:
                out = [np.empty((n,) + a.shape[1:], np.float32) for a in arrays]
            for o, a in zip(out, arrays):
                o[sel] = a
        return out

    # -- inference ---------------------------------------------------------
    def voxel_classifier(self, volume, roi=None):
        """Cached dense classifier for one volume (see :class:`DenseVoxelClassifier`)."""
        check_is_fitted(self, "network_")
        return DenseVoxelClassifier(self.network_, _voxels_of(volume), roi=roi)

    def predict_proba_voxels(self, volume, voxels, method="dense"):
        """Foreground probability of each voxel in ``voxels`` ``(N, 3)``."""
        check_is_fitted(self, "network_")
        voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        if method == "dense":
            return self.voxel_classifier(volume).predict_proba(voxels)
        if method != "patch":
            raise ValueError(f"unknown method {method!r}")
        ex = PatchExtractor(_voxels_of(volume))
        out = np.empty(len(voxels))
        for start in range(0, len(voxels), 256):
            chunk = ex.network_inputs(voxels[start:start + 256])
            out[start:start + 256] = self.network_.predict(chunk)[:, 1]
        return out

    def predict_proba(self, inputs):
        """Class probabilities ``(N, 2)`` for six precomputed patch arrays."""
        check_is_fitted(self, "network_")
        return self.network_.predict(inputs).astype(np.float64)

    def predict(self, inputs):
        return self.predict_proba(inputs).argmax(axis=1)

    def segment(self, volume, **kwargs):
        """Full sparse-grid, smoothing and surface-refinement segmentation."""
        from .procedure import segment_volume

        return segment_volume(self, volume, **kwargs)

    # -- persistence -------------------------------------------------------
    def save(self, path):
        check_is_fitted(self, "network_")
        save_weights(path, self.network_.state_dict())

    def load(self, path):
        """Load weights saved by :meth:`save` into a model with matching parameters."""
        net = self._build(0)
        net.load_state_dict(load_weights(path))
        net.eval()
        self.network_ = net
        self.classes_ = np.array([0, 1])
        return self


__all__ = ["MultiscaleSegmenter", "input_names"]
