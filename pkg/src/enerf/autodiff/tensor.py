"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

A Tensor wraps a row-major float array.  Operations executed inside a
``record()`` block append op records to a Graph (the tape); insertion order is
a valid topological order, and ``backward`` replays it once in reverse.
Outside a recording block every op is eager-only, which doubles as the
inference fast path.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

# When true, every op output is checked for NaN/Inf (slow; used by tests).
DEBUG_CHECK_FINITE = False

_TAPE: "Graph | None" = None


class Tensor:
    """Dense float tensor, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # reductions / shaping ---------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Graph:
    """Append-only op tape; node order is a topological order."""

    def __init__(self):
        self.nodes = []


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


@contextmanager
def record(graph=None):
    """Activate a tape.  Yields the Graph collecting op records."""
    global _TAPE
    g = graph if graph is not None else Graph()
    prev = _TAPE
    _TAPE = g
    try:
        yield g
    finally:
        _TAPE = prev


def recording():
    return _TAPE is not None


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # python scalars must not promote float32 graphs to float64
        return Tensor(np.float32(x))
    return Tensor(x, dtype=dtype)


def register(out_data, inputs, vjp):
    """Create the output Tensor of an op and record it on the active tape.

    ``vjp(g)`` must return one gradient array (or None) per input, each with
    that input's exact shape.  Also the extension point for custom ops.
    """
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values in op output")
    track = _TAPE is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    if track:
        _TAPE.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def backward(graph, loss):
    """Reverse sweep over the tape; returns {tensor: gradient array}.

    Every requires_grad leaf that fed a recorded op receives a gradient
    (zeros when unreachable from the loss); intermediates also get ``.grad``.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in graph.nodes}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    out = {}
    for node in graph.nodes:
        for inp in node.inputs:
            if not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if id(inp) in produced or inp in out:  # not a leaf / already done
                continue
            g = grads.get(id(inp))
            inp.grad = g if g is not None else np.zeros_like(inp.data)
            out[inp] = inp.grad
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return register(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return register(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return register(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return register(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return register(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return register(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = as_tensor(a)
    return register(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return register(out_data, (a,), lambda g: (g / (2.0 * out_data),))


def square(a):
    a = as_tensor(a)
    return register(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def pow_scalar(a, p):
    a = as_tensor(a)
    return register(
        a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),)
    )


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return register(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a):
    """log(1 + e^x), computed stably; derivative is the sigmoid."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data).astype(a.data.dtype)
    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-a.data))
        return (g * sig,)
    return register(out_data, (a,), vjp)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return register(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def clip_min(a, lo):
    """max(a, lo) with pass-through gradient where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo
    return register(np.maximum(a.data, lo), (a,), lambda g: (g * mask,))


def where(mask, a, b):
    """Select by a constant boolean mask (no gradient w.r.t. mask)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return register(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.data.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.data.shape),
        ),
    )


# ---------------------------------------------------------------------------
# linear algebra / reductions / shaping
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    return register(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)
    return register(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)
    return register(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return register(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),)
    )


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return register(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def vjp(g):
        return tuple(
            np.ascontiguousarray(
                np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            )
            for i in range(len(tensors))
        )
    return register(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors))
        )
    return register(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def take(a, idx):
    """Basic slicing or integer-array indexing, with scatter-add gradient."""
    a = as_tensor(a)
    out_data = a.data[idx]
    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)
    def vjp(g):
        ga = np.zeros_like(a.data)
        if basic:  # no duplicate destinations
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        return (ga,)
    return register(np.ascontiguousarray(out_data), (a,), vjp)


def softmax_axis(a, axis):
    """Numerically stable softmax along ``axis``."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)
    return register(p, (a,), vjp)


def norm_last(a, eps=0.0):
    """Euclidean norm along the last axis, keepdims."""
    a = as_tensor(a)
    return sqrt(tsum(square(a), axis=-1, keepdims=True) + eps)
