"""Dense evaluation of the patch classifier over whole slices.

Evaluating a patch-wise CNN independently at neighbouring voxels repeats
almost all of the work. Each stream is instead run once per slice as a
fully convolutional chain: a pooling layer of size ``k`` becomes a ``k``-tap
max filter at the current dilation and multiplies the dilation by ``k``;
later convolutions are dilated accordingly. The value at output position
``p`` then equals the per-patch value for the patch whose top-left corner is
``p``. The stream's final map is sampled at the taps the dense fusion layer
would see, and the remaining layers run as usual (eval mode).

Results match per-patch evaluation up to float rounding.
"""
from __future__ import annotations

import numpy as np

from ..autodiff.layers import BN_EPS, ELU_ALPHA
from .architecture import SCALES, input_names
from .patches import LARGE, PLANE_AXES, PLANES, SMALL, PatchExtractor

_SIZES = {"small": SMALL, "large": LARGE}


def _dilated_conv(x, w, d):
    c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = h - (kh - 1) * d, wd - (kw - 1) * d
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i * d:i * d + ho, j * d:j * d + wo]
    return (w.reshape(f, -1) @ cols.reshape(-1, ho * wo)).reshape(f, ho, wo)


def _dilated_max(x, k, d):
    _, h, w = x.shape
    ho, wo = h - (k - 1) * d, w - (k - 1) * d
    out = x[:, :ho, :wo].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                np.maximum(out, x[:, i * d:i * d + ho, j * d:j * d + wo], out=out)
    return out


class StreamProgram:
    """Dense form of one stream: an op list plus the final tap geometry."""

    def __init__(self, net, stream):
        spec = net.spec
        consumers = {}
        for n in spec.nodes:
            for i in n.inputs:
                consumers.setdefault(i, []).append(n)
        self.ops, d = [], 1
        node = stream
        while True:
            nxt = consumers.get(node, [])
            if len(nxt) != 1 or nxt[0].spec.kind == "fully_connected":
                break
            n = nxt[0]
            s = n.spec
            if s.kind == "conv2d":
                if s.padding != "valid":
                    raise ValueError("dense evaluation needs valid convolutions")
                b = net.params.get(f"{n.name}.bias")
                self.ops.append(("conv", net.params[f"{n.name}.weight"].data,
                                 None if b is None else b.data, d))
            elif s.kind == "max_pool2d":
                k = s.stride[0]
                self.ops.append(("max", k, d))
                d *= k
            elif s.kind == "batch_norm":
                scale = net.params[f"{n.name}.gamma"].data / np.sqrt(
                    net.buffers[f"{n.name}.running_var"] + net.dtype.type(BN_EPS))
                shift = net.params[f"{n.name}.beta"].data - net.buffers[f"{n.name}.running_mean"] * scale
                self.ops.append(("affine", scale, shift))
            elif s.kind == "elu":
                self.ops.append(("elu",))
            elif s.kind in ("identity", "dropout"):
                pass
            else:
                raise ValueError(f"layer kind {s.kind!r} has no dense form")
            node = n.name
        self.output_node = node
        self.tap_shape = net.shapes[node]  # (C, h, w) per patch
        self.tap_step = d

    def run(self, image):
        """Dense final map of a 2D image ``(H, W)``."""
        x = image[None]
        for op in self.ops:
            kind = op[0]
            if kind == "conv":
                _, w, b, d = op
                x = _dilated_conv(x, w, d)
                if b is not None:
                    x += b[:, None, None]
            elif kind == "max":
                x = _dilated_max(x, op[1], op[2])
            elif kind == "affine":
                x = x * op[1][:, None, None] + op[2][:, None, None]
            else:
                x = np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0)))
        return x

    def gather(self, fmap, rows, cols):
        """Per-patch final maps ``(N, C, h, w)`` at patch top-left ``(rows, cols)``."""
        _, h, w = self.tap_shape
        t = self.tap_step
        ri = rows[:, None, None] + t * np.arange(h)[None, :, None]
        ci = cols[:, None, None] + t * np.arange(w)[None, None, :]
        return fmap[:, ri, ci].transpose(1, 0, 2, 3)


class DenseVoxelClassifier:
    """Foreground probabilities for arbitrary voxels of one volume.

    Stream feature maps are computed per (plane, slice) over an in-plane
    window and cached, so repeated queries (surface refinement) reuse them.
    ``roi`` (``(lo, hi)`` inclusive voxel bounds) sets the initial window; a
    query outside the cached window recomputes that slice over the union.
    """

    def __init__(self, net, voxels, roi=None, batch_size=2048):
        self.net = net
        self.extractor = PatchExtractor(voxels)
        self.shape = self.extractor.shape
        self.roi = None if roi is None else (np.asarray(roi[0]), np.asarray(roi[1]))
        self.batch_size = batch_size
        self.programs = {name: StreamProgram(net, name) for name in input_names()}
        self._cache = {}
        self.slices_computed = 0

    def _window(self, plane, lo_r, hi_r, lo_c, hi_c):
        a, b = PLANE_AXES[plane]
        if self.roi is not None:
            lo_r, hi_r = min(lo_r, self.roi[0][a]), max(hi_r, self.roi[1][a])
            lo_c, hi_c = min(lo_c, self.roi[0][b]), max(hi_c, self.roi[1][b])
        lo_r, lo_c = max(lo_r, 0), max(lo_c, 0)
        hi_r, hi_c = min(hi_r, self.shape[a] - 1), min(hi_c, self.shape[b] - 1)
        return lo_r, hi_r, lo_c, hi_c

    def _slice_maps(self, plane, t, rows, cols):
        key = (plane, t)
        entry = self._cache.get(key)
        lo_r, hi_r, lo_c, hi_c = rows.min(), rows.max(), cols.min(), cols.max()
        if entry is not None:
            w = entry["window"]
            if w[0] <= lo_r and hi_r <= w[1] and w[2] <= lo_c and hi_c <= w[3]:
                return entry
            lo_r, hi_r = min(lo_r, w[0]), max(hi_r, w[1])
            lo_c, hi_c = min(lo_c, w[2]), max(hi_c, w[3])
        window = self._window(plane, lo_r, hi_r, lo_c, hi_c)
        lo_r, hi_r, lo_c, hi_c = window
        ex = self.extractor
        pad = ex.pad
        a, b = PLANE_AXES[plane]
        s_axis = 3 - a - b
        index = [slice(None)] * 3
        index[s_axis] = t + pad
        image = ex.padded[tuple(index)]  # 2D, axes (a, b) in order
        maps = {}
        for scale in SCALES:
            half = _SIZES[scale] // 2
            r0, c0 = lo_r + pad - half, lo_c + pad - half
            crop = image[r0:hi_r + pad + half + 1, c0:hi_c + pad + half + 1]
            maps[scale] = self.programs[f"{scale}_{plane}"].run(np.ascontiguousarray(crop))
        entry = {"window": window, "maps": maps}
        self._cache[key] = entry
        self.slices_computed += 1
        return entry

    def stream_features(self, voxels):
        """Final per-patch maps of every stream for ``voxels`` ``(N, 3)``."""
        voxels = self.extractor.check_voxels(voxels)
        n = len(voxels)
        feats = {name: None for name in input_names()}
        for plane in PLANES:
            a, b = PLANE_AXES[plane]
            s_axis = 3 - a - b
            for t in np.unique(voxels[:, s_axis]):
                sel = np.flatnonzero(voxels[:, s_axis] == t)
                rows, cols = voxels[sel, a], voxels[sel, b]
                entry = self._slice_maps(plane, int(t), rows, cols)
                w = entry["window"]
                for scale in SCALES:
                    name = f"{scale}_{plane}"
                    prog = self.programs[name]
                    g = prog.gather(entry["maps"][scale], rows - w[0], cols - w[2])
                    if feats[name] is None:
                        feats[name] = np.empty((n,) + g.shape[1:], dtype=g.dtype)
                    feats[name][sel] = g
        return {self.programs[name].output_node: f for name, f in feats.items()}

    def predict_proba(self, voxels):
        """Foreground probability per voxel, shape ``(N,)``."""
        voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        out = np.empty(len(voxels), dtype=np.float64)
        for start in range(0, len(voxels), self.batch_size):
            chunk = voxels[start:start + self.batch_size]
            known = self.stream_features(chunk)
            out[start:start + len(chunk)] = self.net.forward_from(known)[:, 1]
        return out
