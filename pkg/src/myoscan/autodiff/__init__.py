"""Minimal reverse-mode engine covering the layers both networks need."""
from .gradcheck import finite_difference_check
from .layers import (
    LayerSpec,
    batch_norm,
    conv2d,
    dropout,
    elu,
    fully_connected,
    identity,
    max_pool2d,
    softmax,
    upsample2d,
)
from .network import DimensionError, Network, NetworkSpec, Node, StateError, Tensor, count_parameters
from .optim import OptimizerState, sgd_nesterov_step
from .serialize import FormatError, load_weights, save_weights

__all__ = [
    "DimensionError",
    "FormatError",
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "Node",
    "OptimizerState",
    "StateError",
    "Tensor",
    "batch_norm",
    "conv2d",
    "count_parameters",
    "dropout",
    "elu",
    "finite_difference_check",
    "fully_connected",
    "identity",
    "load_weights",
    "max_pool2d",
    "save_weights",
    "sgd_nesterov_step",
    "softmax",
    "upsample2d",
]
