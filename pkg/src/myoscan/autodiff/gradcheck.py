"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .network import Network


def finite_difference_check(net: Network, inputs, target, loss_kind, epsilon=1e-5,
                            max_entries=None, seed=0):
    """Largest relative error between analytic and numeric parameter gradients.

    The check runs in train mode on a 64-bit copy of ``net``: dropout masks
    drawn by the first forward pass are reused by every perturbed pass and
    running statistics are left untouched. The relative error of one entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    Parameters
    ----------
    max_entries : int, optional
        Probe at most this many randomly chosen entries per parameter tensor.

    Returns
    -------
    float
    """
    net64 = net.astype(np.float64)
    net64.train()
    net64.update_running_stats = False
    net64.freeze_dropout = True
    net64._dropout_masks = {}

    net64.zero_grad()
    net64.forward(inputs)
    net64.backward(loss_kind, target)
    analytic = {k: t.grad.copy() for k, t in net64.params.items()}

    def loss_at():
        net64.forward(inputs)
        loss = net64.backward(loss_kind, target)
        net64.zero_grad()
        return loss

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in net64.params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = loss_at()
            flat[i] = orig - epsilon
            minus = loss_at()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
