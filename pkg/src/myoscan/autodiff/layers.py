"""Layer specifications and the numpy kernels behind them.

Every kernel comes as a ``*_forward`` / ``*_backward`` pair. Forward returns
``(out, cache)``; backward consumes the cache and the upstream gradient.
Activations are laid out NCHW for spatial layers and NF for dense layers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

LAYER_KINDS = (
    "conv2d",
    "max_pool2d",
    "upsample2d",
    "fully_connected",
    "batch_norm",
    "elu",
    "dropout",
    "softmax",
    "identity",
)

ELU_ALPHA = 1.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``kernel``/``filters`` belong to ``conv2d`` only, ``units`` to
    ``fully_connected`` only and ``drop_rate`` to ``dropout`` only.
    ``stride`` is the pooling/upsampling factor. ``output_shape`` lets a dense
    layer hand a (C, H, W) map to the next spatial layer.
    """

    kind: str
    kernel: Optional[Tuple[int, int]] = None
    filters: Optional[int] = None
    stride: Optional[Tuple[int, int]] = None
    units: Optional[int] = None
    drop_rate: Optional[float] = None
    padding: str = "valid"
    bias: bool = True
    output_shape: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        is_conv = self.kind == "conv2d"
        if is_conv != (self.kernel is not None) or is_conv != (self.filters is not None):
            raise ValueError("kernel/filters are required for conv2d and only conv2d")
        if (self.kind == "fully_connected") != (self.units is not None):
            raise ValueError("units are required for fully_connected and only fully_connected")
        if (self.kind == "dropout") != (self.drop_rate is not None):
            raise ValueError("drop_rate is required for dropout and only dropout")
        if self.drop_rate is not None and not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.kind in ("max_pool2d", "upsample2d") and self.stride is None:
            raise ValueError(f"{self.kind} needs a stride")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.output_shape is not None:
            if self.kind != "fully_connected":
                raise ValueError("output_shape only applies to fully_connected")
            if int(np.prod(self.output_shape)) != self.units:
                raise ValueError(f"output_shape {self.output_shape} does not hold {self.units} units")


def conv2d(filters, kernel, padding="valid", bias=True):
    return LayerSpec("conv2d", kernel=tuple(kernel), filters=filters, padding=padding, bias=bias)


def max_pool2d(size):
    return LayerSpec("max_pool2d", stride=(size, size))


def upsample2d(size):
    return LayerSpec("upsample2d", stride=(size, size))


def fully_connected(units, output_shape=None, bias=True):
    return LayerSpec("fully_connected", units=units, bias=bias,
                     output_shape=None if output_shape is None else tuple(output_shape))


def batch_norm():
    return LayerSpec("batch_norm")


def elu():
    return LayerSpec("elu")


def dropout(rate):
    return LayerSpec("dropout", drop_rate=rate)


def softmax():
    return LayerSpec("softmax")


def identity():
    return LayerSpec("identity")


# ---------------------------------------------------------------------------
# convolution (stride 1, zero padding)
# ---------------------------------------------------------------------------

_COLS_BUDGET = 1 << 24  # floats per im2col chunk


def _same_pad(kh, kw):
    return (kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2


def _im2col(x, kh, kw):
    """(N, C, H, W) -> (C*kh*kw, N*Ho*Wo) matrix of valid-correlation windows."""
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(dcols, shape, kh, kw):
    n, c, h, w = shape
    ho, wo = h - kh + 1, w - kw + 1
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    dxt = np.zeros((c, n, h, w), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxt[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
    return dxt.transpose(1, 0, 2, 3)


def _chunks(x, kh, kw):
    n, c, h, w = x.shape
    per_sample = c * kh * kw * (h - kh + 1) * (w - kw + 1)
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    return [slice(s, min(s + step, n)) for s in range(0, n, step)]


def _correlate(x, w):
    """Valid cross-correlation of (N, C, H, W) with (F, C, kh, kw)."""
    f, c, kh, kw = w.shape
    n, _, h, wd = x.shape
    ho, wo = h - kh + 1, wd - kw + 1
    w2 = w.reshape(f, -1)
    out = np.empty((n, f, ho, wo), dtype=np.result_type(x, w))
    for sl in _chunks(x, kh, kw):
        part = w2 @ _im2col(x[sl], kh, kw)
        out[sl] = part.reshape(f, -1, ho, wo).transpose(1, 0, 2, 3)
    return out


def conv2d_forward(x, w, b, padding):
    kh, kw = w.shape[2:]
    pads = _same_pad(kh, kw) if padding == "same" else (0, 0, 0, 0)
    if any(pads):
        x = np.pad(x, ((0, 0), (0, 0), pads[:2], pads[2:]))
    out = _correlate(x, w)
    if b is not None:
        out += b[None, :, None, None]
    return out, (x, w, pads, b is not None)


def conv2d_backward(dout, cache, need_dx=True):
    x, w, pads, has_bias = cache
    f, c, kh, kw = w.shape
    w2 = w.reshape(f, -1)
    dw = np.zeros_like(w2)
    dx = np.empty(x.shape, dtype=dout.dtype) if need_dx else None
    for sl in _chunks(x, kh, kw):
        cols = _im2col(x[sl], kh, kw)
        d2 = dout[sl].transpose(1, 0, 2, 3).reshape(f, -1)
        dw += d2 @ cols.T
        if need_dx:
            dx[sl] = _col2im(w2.T @ d2, x[sl].shape, kh, kw)
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    if need_dx and any(pads):
        top, bottom, left, right = pads
        dx = dx[:, :, top:dx.shape[2] - bottom, left:dx.shape[3] - right]
    return dx, dw.reshape(w.shape), db


# ---------------------------------------------------------------------------
# pooling / upsampling
# ---------------------------------------------------------------------------

def max_pool2d_forward(x, size):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    sh, sw = size
    n, c, h, w = x.shape
    ho, wo = h // sh, w // sw
    if ho == 0 or wo == 0:
        raise ValueError(f"input {h}x{w} smaller than pooling window {sh}x{sw}")
    blocks = x[:, :, :ho * sh, :wo * sw].reshape(n, c, ho, sh, wo, sw)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, sh * sw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, size, arg)


def max_pool2d_backward(dout, cache):
    shape, (sh, sw), arg = cache
    n, c, h, w = shape
    ho, wo = arg.shape[2:]
    routed = np.zeros((n, c, ho, wo, sh * sw), dtype=dout.dtype)
    np.put_along_axis(routed, arg[..., None], dout[..., None], axis=-1)
    routed = routed.reshape(n, c, ho, wo, sh, sw).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :ho * sh, :wo * sw] = routed.reshape(n, c, ho * sh, wo * sw)
    return dx


def upsample2d_forward(x, size):
    sh, sw = size
    return x.repeat(sh, axis=2).repeat(sw, axis=3), size


def upsample2d_backward(dout, size):
    sh, sw = size
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // sh, sh, w // sw, sw).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# dense, normalisation, activations
# ---------------------------------------------------------------------------

def fully_connected_forward(xs, w, b):
    flat = np.concatenate([x.reshape(x.shape[0], -1) for x in xs], axis=1)
    out = flat @ w
    if b is not None:
        out += b
    return out, (flat, [x.shape for x in xs])


def fully_connected_backward(dout, cache, w, need_dx=True):
    flat, shapes = cache
    dw = flat.T @ dout
    db = dout.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dflat = dout @ w.T
    dxs, start = [], 0
    for shape in shapes:
        size = int(np.prod(shape[1:]))
        dxs.append(dflat[:, start:start + size].reshape(shape))
        start += size
    return dxs, dw, db


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, ndim):
    return v if ndim == 2 else v[None, :, None, None]


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train, update_running=True):
    axes = _bn_axes(x)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            running_mean *= BN_MOMENTUM
            running_mean += (1.0 - BN_MOMENTUM) * mean
            running_var *= BN_MOMENTUM
            running_var += (1.0 - BN_MOMENTUM) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    out = xhat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)
    return out, (xhat, inv_std, gamma, axes)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, axes = cache
    ndim = dout.ndim
    m = dout.size // dout.shape[1]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * _bn_view(gamma, ndim)
    dx = (_bn_view(inv_std, ndim) / m) * (
        m * dxhat
        - _bn_view(dxhat.sum(axis=axes), ndim)
        - xhat * _bn_view((dxhat * xhat).sum(axis=axes), ndim)
    )
    return dx, dgamma, dbeta


def elu_forward(x):
    neg = np.expm1(np.minimum(x, 0.0)) * ELU_ALPHA
    return np.where(x > 0, x, neg), (x, neg)


def elu_backward(dout, cache):
    x, neg = cache
    return dout * np.where(x > 0, 1.0, neg + ELU_ALPHA).astype(dout.dtype, copy=False)


def softmax_forward(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True), logits


def softmax_backward(dout, probs):
    return probs * (dout - (dout * probs).sum(axis=1, keepdims=True))


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
