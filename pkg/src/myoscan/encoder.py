"""Convolutional autoencoder for 48x48 axial patches and per-voxel encodings.

Layer ladder (input 1x48x48)::

    encoder  conv 16 5x5 same -> BN -> ELU -> maxpool 2x2      16x24x24
             dense d -> ELU                                    the encoding
    decoder  dense 10816 -> ELU, reshaped to 16x26x26
             upsample 2x2 (nearest)                            16x52x52
             conv 1 5x5 valid                                  1x48x48

The "same" convolution pads 2 rows/cols on each side; the valid output
convolution trims 52 back to 48, which is what makes the 16*26*26 = 10816
bottleneck-to-decoder width work out. The output layer has no activation.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import (
    DimensionError,
    Network,
    NetworkSpec,
    OptimizerState,
    StateError,
    batch_norm,
    conv2d,
    elu,
    fully_connected,
    load_weights,
    max_pool2d,
    save_weights,
    sgd_nesterov_step,
    upsample2d,
)
from .autodiff.serialize import FormatError, atomic_write
from .errors import ParameterError, TrainingError
from .segmentation.patches import PatchExtractor, normalize_intensity

log = logging.getLogger(__name__)

PATCH = 48
DECODER_SHAPE = (16, 26, 26)
ENCODING_NODE = "code_elu"
ALLOWED_D = (128, 512, 1024)


def build_cae_spec(d=512):
    spec = NetworkSpec({"patch": (1, PATCH, PATCH)})
    spec.add("enc_conv", conv2d(16, (5, 5), padding="same", bias=False), "patch")
    spec.add("enc_bn", batch_norm(), "enc_conv")
    spec.add("enc_elu", elu(), "enc_bn")
    spec.add("enc_pool", max_pool2d(2), "enc_elu")
    spec.add("code", fully_connected(d), "enc_pool")
    spec.add(ENCODING_NODE, elu(), "code")
    spec.add("dec_fc", fully_connected(int(np.prod(DECODER_SHAPE)), output_shape=DECODER_SHAPE), ENCODING_NODE)
    spec.add("dec_elu", elu(), "dec_fc")
    spec.add("dec_up", upsample2d(2), "dec_elu")
    spec.add("output", conv2d(1, (5, 5)), "dec_up")
    return spec


def encoder_spec(full: NetworkSpec):
    """Sub-spec ending at the encoding layer."""
    spec = NetworkSpec(dict(full.inputs))
    for n in full.ancestors(ENCODING_NODE):
        spec.add(n.name, n.spec, *n.inputs)
    return spec


def _as_patches(X):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (1, PATCH, PATCH):
        raise DimensionError(f"expected 48x48 patches, got array of shape {X.shape}")
    return X


class ConvAutoencoder(TransformerMixin, BaseEstimator):
    """Autoencoder whose bottleneck provides d-dimensional patch encodings.

    Parameters
    ----------
    d : int, default=512
        Encoding width.
    epochs : int, default=750
    train_minibatches : int, default=200
        Training minibatches per epoch, drawn at random from the training split.
    val_minibatches : int, default=20
        Validation minibatches; drawn once and re-scored after every epoch.
    batch_size : int, default=500
    learning_rate : float, default=1e-5
    momentum : float, default=0.9
    validation_fraction : float, default=0.1
    random_state : int, optional

    Attributes
    ----------
    network_ : Network
        Full autoencoder, or the encoder alone after :meth:`drop_decoder`.
    train_loss_ : ndarray of shape (epochs,)
    val_loss_ : ndarray of shape (epochs,)
    val_indices_ : ndarray
        Rows of the training input held out for validation.
    """

    def __init__(self, d=512, epochs=750, train_minibatches=200, val_minibatches=20, batch_size=500,
                 learning_rate=1e-5, momentum=0.9, validation_fraction=0.1, random_state=None):
        self.d = d
        self.epochs = epochs
        self.train_minibatches = train_minibatches
        self.val_minibatches = val_minibatches
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _new_network(self, seed):
        if self.d < 1:
            raise ParameterError("d must be positive")
        return Network(build_cae_spec(self.d), dtype=np.float32, seed=seed)

    def fit(self, X, y=None):
        """Train on normalised patches ``X`` of shape (N, 48, 48)."""
        X = _as_patches(X)
        if len(X) < 2:
            raise ParameterError("need at least two patches for a train/validation split")
        init_seq, split_seq, batch_seq = np.random.SeedSequence(self.random_state).spawn(3)
        order = np.random.default_rng(split_seq).permutation(len(X))
        n_val = min(max(1, int(round(self.validation_fraction * len(X)))), len(X) - 1)
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        rng = np.random.default_rng(batch_seq)
        val_batches = [val_idx[rng.integers(len(val_idx), size=min(self.batch_size, len(val_idx)))]
                       for _ in range(self.val_minibatches)]

        net = self._new_network(init_seq)
        state = OptimizerState(self.learning_rate, self.momentum)
        train_trace, val_trace = [], []
        for epoch in range(self.epochs):
            net.train()
            losses = []
            for _ in range(self.train_minibatches):
                batch = X[train_idx[rng.integers(len(train_idx), size=self.batch_size)]]
                net.forward(batch)
                loss = net.backward("mean_squared_error", batch)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite reconstruction loss at epoch {epoch}", epoch)
                sgd_nesterov_step(net.params, state)
                losses.append(loss)
            train_trace.append(float(np.mean(losses)) if losses else float("nan"))
            val_trace.append(float(np.mean([self._val_mse(net, X[b]) for b in val_batches]))
                             if val_batches else float("nan"))
            log.info("cae epoch %d train %.6f val %.6f", epoch, train_trace[-1], val_trace[-1])
        net.eval()
        self.network_ = net
        self.decoder_retained_ = True
        self.train_loss_ = np.asarray(train_trace)
        self.val_loss_ = np.asarray(val_trace)
        self.val_indices_ = val_idx
        return self

    @staticmethod
    def _val_mse(net, patches):
        # batch statistics, running averages left alone: the score then
        # depends on the weights only, so lr=0 gives a flat trace
        net.update_running_stats = False
        try:
            out = net.forward(patches)
        finally:
            net.update_running_stats = True
        return float(np.mean((out.astype(np.float64) - patches) ** 2))

    def untrained(self, seed=None):
        """A fresh, randomly initialised copy (for comparison baselines)."""
        other = ConvAutoencoder(**self.get_params())
        other.network_ = other._new_network(seed).eval()
        other.decoder_retained_ = True
        return other

    def drop_decoder(self):
        """Replace the network by its encoder; the encoding becomes the output."""
        check_is_fitted(self, "network_")
        if not self.decoder_retained_:
            return self
        enc = Network(encoder_spec(self.network_.spec), dtype=np.float32)
        enc.load_state_dict({k: v for k, v in self.network_.state_dict().items()
                             if k in enc.params or k in enc.buffers})
        self.network_ = enc.eval()
        self.decoder_retained_ = False
        return self

    def transform(self, X, batch_size=512):
        """Encodings ``(N, d)`` of normalised patches."""
        check_is_fitted(self, "network_")
        X = _as_patches(X)
        if self.decoder_retained_:
            enc = Network(encoder_spec(self.network_.spec), dtype=np.float32)
            enc.load_state_dict({k: v for k, v in self.network_.state_dict().items()
                                 if k in enc.params or k in enc.buffers})
        else:
            enc = self.network_
        return enc.predict(X, batch_size=batch_size).astype(np.float32)

    def reconstruct(self, patch):
        """``(reconstruction, |patch - reconstruction|)``; needs the decoder."""
        check_is_fitted(self, "network_")
        if not self.decoder_retained_:
            raise StateError("decoder was discarded; reconstruction is unavailable")
        X = _as_patches(patch)
        out = self.network_.predict(X)[:, 0]
        rec = out[0] if np.ndim(patch) == 2 else out
        return rec, np.abs(np.asarray(patch, dtype=np.float32) - rec)

    # -- persistence -------------------------------------------------------
    def save(self, path):
        check_is_fitted(self, "network_")
        save_weights(path, self.network_.state_dict())

    def load(self, path):
        state = load_weights(path)
        net = self._new_network(0)
        if "output.weight" not in state:
            net = Network(encoder_spec(net.spec), dtype=np.float32)
        net.load_state_dict(state)
        self.network_ = net.eval()
        self.decoder_retained_ = "output.weight" in state
        return self


def encode_patch(model: ConvAutoencoder, patch):
    """Encoding vector ``(d,)`` of one normalised 48x48 patch."""
    patch = np.asarray(patch, dtype=np.float32)
    if patch.shape != (PATCH, PATCH):
        raise DimensionError(f"expected a 48x48 patch, got {patch.shape}")
    return model.transform(patch[None])[0]


def axial_patches(volume, voxels, normalized=False):
    """48x48 axial patches; the voxel sits at row/column 24 (rows x, columns y)."""
    raw = getattr(volume, "voxels", volume)
    ex = PatchExtractor(raw, sizes=(PATCH + 1,), normalized=normalized)
    # a 49-wide window centred on the voxel, minus its last row/column
    return ex.extract(voxels, "axial", PATCH + 1)[:, :PATCH, :PATCH]


@dataclass
class EncodingMap:
    """Per-voxel encodings; ``indices`` are C-order linear indices, ascending."""

    shape: tuple
    indices: np.ndarray
    encodings: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint64)
        self.encodings = np.asarray(self.encodings, dtype=np.float32)
        if self.encodings.ndim != 2 or len(self.encodings) != len(self.indices):
            raise ValueError("encodings must be (n_voxels, d) and match the index list")

    @property
    def d(self):
        return self.encodings.shape[1]

    def voxels(self):
        return np.column_stack(np.unravel_index(self.indices.astype(np.int64), self.shape))


def sample_mask_voxels(mask, step=1):
    """Every ``step``-th mask voxel in C order (deterministic)."""
    if step < 1:
        raise ParameterError("step must be positive")
    idx = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    return idx[::step]


def encode_myocardium(model: ConvAutoencoder, volume, mask, step=1, batch_size=512) -> EncodingMap:
    """Encode the mask voxels of ``volume`` (raw intensities)."""
    mask = np.asarray(mask, dtype=bool)
    raw = getattr(volume, "voxels", volume)
    if np.shape(raw) != mask.shape:
        raise ParameterError(f"volume shape {np.shape(raw)} differs from mask shape {mask.shape}")
    if not mask.any():
        raise ParameterError("cannot encode an empty mask")
    idx = sample_mask_voxels(mask, step)
    voxels = np.column_stack(np.unravel_index(idx, mask.shape))
    norm = normalize_intensity(raw)
    out = np.empty((len(idx), model.d), np.float32)
    for start in range(0, len(idx), 4096):
        patches = axial_patches(norm, voxels[start:start + 4096], normalized=True)
        out[start:start + len(patches)] = model.transform(patches, batch_size=batch_size)
    return EncodingMap(mask.shape, idx, out)


MAGIC = b"MYOE"


def dumps_encodings(emap: EncodingMap) -> bytes:
    rec = np.zeros(len(emap.indices), dtype=np.dtype([("i", "<u8"), ("v", "<f4", (emap.d,))]))
    rec["i"] = emap.indices
    rec["v"] = emap.encodings
    return MAGIC + struct.pack("<IQ", emap.d, len(emap.indices)) + rec.tobytes()


def loads_encodings(blob: bytes, shape) -> EncodingMap:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a MYOE file")
    d, n = struct.unpack_from("<IQ", blob, 4)
    dt = np.dtype([("i", "<u8"), ("v", "<f4", (d,))])
    if len(blob) != 16 + n * dt.itemsize:
        raise FormatError(f"MYOE payload size mismatch for {n} records of width {d}")
    rec = np.frombuffer(blob, dtype=dt, count=n, offset=16)
    return EncodingMap(tuple(shape), rec["i"].copy(), rec["v"].copy())


def save_encodings(path, emap):
    atomic_write(path, dumps_encodings(emap))


def load_encodings(path, shape):
    with open(path, "rb") as fh:
        return loads_encodings(fh.read(), shape)


__all__ = [
    "ConvAutoencoder",
    "EncodingMap",
    "axial_patches",
    "build_cae_spec",
    "encode_myocardium",
    "encode_patch",
    "load_encodings",
    "save_encodings",
]
