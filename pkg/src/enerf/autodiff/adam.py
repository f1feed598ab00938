"""Adam optimizer acting on flat name->array maps."""

from __future__ import annotations

import numpy as np


class AdamState:
    """First/second moment buffers, lazily allocated per parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``params`` and ``grads`` are dicts name -> ndarray with matching shapes.
    """
    if t < 1:
        raise ValueError("adam_step: t must be >= 1")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"adam_step: gradient shape {g.shape} != param shape {p.shape} "
                f"for '{name}'"
            )
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
