"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, record


def numeric_grad(fn, inputs, wrt, h=1e-6):
    """Central finite differences of scalar fn w.r.t. inputs[wrt] (float64)."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    target = base[wrt]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = target[ix]
        target[ix] = orig + h
        fp = fn(*[Tensor(b, dtype=np.float64) for b in base])
        target[ix] = orig - h
        fm = fn(*[Tensor(b, dtype=np.float64) for b in base])
        target[ix] = orig
        grad[ix] = (float(fp.data) - float(fm.data)) / (2 * h)
        it.iternext()
    return grad


def analytic_grad(fn, inputs, wrt):
    """Reverse-mode gradient of scalar fn w.r.t. inputs[wrt] (float64)."""
    tensors = [
        Tensor(np.array(x, dtype=np.float64), requires_grad=(i == wrt))
        for i, x in enumerate(inputs)
    ]
    with record() as g:
        loss = fn(*tensors)
    backward(g, loss)
    grad = tensors[wrt].grad
    return grad if grad is not None else np.zeros_like(tensors[wrt].data)


def max_rel_error(fn, inputs, wrt, h=1e-6, floor=1e-4):
    """Max relative error between analytic and numeric gradients.

    The denominator is floored so near-zero entries are compared absolutely.
    """
    num = numeric_grad(fn, inputs, wrt, h=h)
    ana = analytic_grad(fn, inputs, wrt)
    denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), floor)
    return float(np.max(np.abs(num - ana) / denom))
