"""Multiscale triplanar CNN for voxel classification.

Each of the six streams (two scales x three planes) runs the same ladder::

    conv f1 5x5, conv f1 5x5, maxpool 2x2,
    conv f2 3x3, conv f2 3x3, maxpool 2x2,
    conv f3 3x3, conv f3 3x3

with valid padding, batch norm after every convolution and ELU activations.
A 49x49 input leaves a 64x4x4 map per stream at the default filters
(16, 32, 64). Large-scale streams start with a 3x3 max pool that reduces
147x147 inputs to 49x49. The three streams of a scale meet in a dense
fusion layer, the two scales meet in a second one, and a two-unit softmax
follows. Dense hidden layers are followed by batch norm, ELU and dropout.
"""
from __future__ import annotations

from ..autodiff import NetworkSpec, batch_norm, conv2d, dropout, elu, fully_connected, max_pool2d, softmax
from .patches import LARGE, PLANES, SMALL

DEFAULT_FILTERS = (16, 32, 64)
DEFAULT_UNITS = 256
SCALES = ("small", "large")


def stream_ladder(filters=DEFAULT_FILTERS):
    """``(kind, filters, kernel)`` tuples of one stream, pooling as ``("pool", None, 2)``."""
    f1, f2, f3 = filters
    return [
        ("conv", f1, 5), ("conv", f1, 5), ("pool", None, 2),
        ("conv", f2, 3), ("conv", f2, 3), ("pool", None, 2),
        ("conv", f3, 3), ("conv", f3, 3),
    ]


def input_names():
    return [f"{scale}_{plane}" for scale in SCALES for plane in PLANES]


def _add_dense(spec, name, units, drop_rate, *inputs):
    spec.add(name, fully_connected(units, bias=False), *inputs)
    spec.add(f"{name}_bn", batch_norm(), name)
    spec.add(f"{name}_elu", elu(), f"{name}_bn")
    if drop_rate:
        spec.add(f"{name}_drop", dropout(drop_rate), f"{name}_elu")
        return f"{name}_drop"
    return f"{name}_elu"


def build_segmentation_spec(filters=DEFAULT_FILTERS, units=DEFAULT_UNITS, drop_rate=0.5):
    """Network spec of the two-scale, three-plane classifier.

    Stream ``<scale>_<plane>`` nodes are named ``<stream>_c1 .. _c6`` for the
    convolutions (each followed by ``_bn`` and ``_elu``) and ``_p1``/``_p2``
    for the pools; the large streams also have ``<stream>_p0``.
    """
    sizes = {"small": SMALL, "large": LARGE}
    spec = NetworkSpec({f"{scale}_{plane}": (1, sizes[scale], sizes[scale])
                        for scale in SCALES for plane in PLANES})
    scale_outputs = []
    for scale in SCALES:
        stream_outputs = []
        for plane in PLANES:
            stream = f"{scale}_{plane}"
            prev = stream
            if scale == "large":
                prev = spec.add(f"{stream}_p0", max_pool2d(3), prev)
            conv_i = pool_i = 0
            for kind, nf, k in stream_ladder(filters):
                if kind == "conv":
                    conv_i += 1
                    name = f"{stream}_c{conv_i}"
                    spec.add(name, conv2d(nf, (k, k), bias=False), prev)
                    spec.add(f"{name}_bn", batch_norm(), name)
                    prev = spec.add(f"{name}_elu", elu(), f"{name}_bn")
                else:
                    pool_i += 1
                    prev = spec.add(f"{stream}_p{pool_i}", max_pool2d(k), prev)
            stream_outputs.append(prev)
        scale_outputs.append(_add_dense(spec, f"{scale}_fuse", units, drop_rate, *stream_outputs))
    top = _add_dense(spec, "fuse", units, drop_rate, *scale_outputs)
    spec.add("logits", fully_connected(2), top)
    spec.add("prob", softmax(), "logits")
    return spec
