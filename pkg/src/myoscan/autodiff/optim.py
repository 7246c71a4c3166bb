"""Stochastic gradient descent with Nesterov momentum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .network import StateError


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_nesterov_step(params, state: OptimizerState):
    """One Nesterov step over ``params`` (a name -> Tensor mapping); clears grads.

    The lookahead form is  v <- mu*v - lr*grad f(theta + mu*v),  theta <- theta + v.
    Parameters are stored at the lookahead point phi = theta + mu*v, where the
    gradient is evaluated, which turns the recurrence into

        v'   = mu*v - lr*g(phi)
        phi' = phi + mu*v' - lr*g(phi)
    """
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise StateError(f"no gradient for parameters {missing[:5]}")
    mu, lr = state.momentum, state.learning_rate
    for name, t in params.items():
        g = t.grad
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        v = mu * v - lr * g
        t.data += (mu * v - lr * g).astype(t.data.dtype, copy=False)
        state.velocity[name] = v.astype(t.data.dtype, copy=False)
        t.grad = None
    return params
