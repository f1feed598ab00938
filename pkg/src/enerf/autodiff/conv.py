"""2-D/3-D convolution and transposed convolution with reverse-mode gradients.

Layouts are channel-first and batchless: conv2d works on [C,H,W], conv3d on
[C,D,H,W].  Kernels are iterated by spatial offset (9 or 27 slices), which
keeps memory flat and lets BLAS do the channel contraction.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor import Tensor, as_tensor, register


def _out_size(n, k, stride, pad):
    span = n + 2 * pad - k
    if span < 0:
        raise ValueError(
            f"spatial size {n} too small for kernel {k} with padding {pad}"
        )
    return span // stride + 1


def _pad_spatial(x, pad, nd):
    if pad == 0:
        return x
    width = [(0, 0)] + [(pad, pad)] * nd
    return np.pad(x, width)


def _conv_forward(x, w, stride, pad):
    """x: [C_in, *S], w: [C_out, C_in, *K] -> [C_out, *S']."""
    nd = x.ndim - 1
    kshape = w.shape[2:]
    out_shape = tuple(
        _out_size(x.shape[1 + i], kshape[i], stride, pad) for i in range(nd)
    )
    xp = _pad_spatial(x, pad, nd)
    out = np.zeros((w.shape[0],) + out_shape, dtype=x.dtype)
    for off in itertools.product(*(range(k) for k in kshape)):
        sl = tuple(
            slice(off[i], off[i] + stride * out_shape[i], stride) for i in range(nd)
        )
        patch = xp[(slice(None),) + sl]  # [C_in, *S']
        out += np.tensordot(w[(slice(None), slice(None)) + off], patch, axes=1)
    return out


def _conv_grad_input(g, w, stride, pad, in_spatial):
    """Adjoint of _conv_forward w.r.t. its input."""
    nd = len(in_spatial)
    kshape = w.shape[2:]
    out_shape = g.shape[1:]
    gp = np.zeros(
        (w.shape[1],) + tuple(in_spatial[i] + 2 * pad for i in range(nd)),
        dtype=g.dtype,
    )
    wt = np.swapaxes(w, 0, 1)  # [C_in, C_out, *K]
    for off in itertools.product(*(range(k) for k in kshape)):
        sl = tuple(
            slice(off[i], off[i] + stride * out_shape[i], stride) for i in range(nd)
        )
        contrib = np.tensordot(wt[(slice(None), slice(None)) + off], g, axes=1)
        gp[(slice(None),) + sl] += contrib
    if pad == 0:
        return gp
    core = tuple(slice(pad, pad + in_spatial[i]) for i in range(nd))
    return np.ascontiguousarray(gp[(slice(None),) + core])


def _conv_grad_weight(x, g, stride, pad, kshape):
    """Adjoint of _conv_forward w.r.t. the kernel."""
    nd = x.ndim - 1
    out_shape = g.shape[1:]
    xp = _pad_spatial(x, pad, nd)
    gw = np.zeros((g.shape[0], x.shape[0]) + tuple(kshape), dtype=x.dtype)
    sp_axes = tuple(range(1, nd + 1))
    for off in itertools.product(*(range(k) for k in kshape)):
        sl = tuple(
            slice(off[i], off[i] + stride * out_shape[i], stride) for i in range(nd)
        )
        patch = xp[(slice(None),) + sl]
        gw[(slice(None), slice(None)) + off] = np.tensordot(
            g, patch, axes=(sp_axes, sp_axes)
        )
    return gw


def _check_conv_shapes(x, w, b, nd, op):
    if x.ndim != nd + 1:
        raise ValueError(f"{op}: input must be {nd + 1}-D [C,...], got {x.shape}")
    if w.ndim != nd + 2:
        raise ValueError(f"{op}: weight must be {nd + 2}-D, got {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ValueError(
            f"{op}: input channels {x.shape[0]} != weight C_in {w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"{op}: bias shape {b.shape} != ({w.shape[0]},)")
    for k in w.shape[2:]:
        if k % 2 == 0 and op.startswith("conv") and not op.endswith("transposed"):
            raise ValueError(f"{op}: even kernel size {k} not supported")


def _convnd(x, w, b, stride, padding, nd, op):
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    _check_conv_shapes(x.data, w.data, b.data if b is not None else None, nd, op)
    out_data = _conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        out_data += b.data.reshape((-1,) + (1,) * nd)
    in_spatial = x.data.shape[1:]
    kshape = w.data.shape[2:]

    def vjp(g):
        gx = _conv_grad_input(g, w.data, stride, padding, in_spatial)
        gw = _conv_grad_weight(x.data, g, stride, padding, kshape)
        gb = g.sum(axis=tuple(range(1, nd + 1))) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return register(out_data, inputs, vjp)


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of [C_in,H,W] with [C_out,C_in,kh,kw]."""
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    return _convnd(x, w, b, stride, padding, 2, "conv2d")


def conv3d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of [C_in,D,H,W] with [C_out,C_in,kd,kh,kw]."""
    if stride < 1 or padding < 0:
        raise ValueError("conv3d: stride must be >= 1 and padding >= 0")
    return _convnd(x, w, b, stride, padding, 3, "conv3d")


def _convnd_transposed(x, w, b, stride, padding, nd, op):
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != nd + 1 or w.ndim != nd + 2:
        raise ValueError(f"{op}: bad ranks {x.shape} / {w.shape}")
    if x.shape[0] != w.shape[0]:
        raise ValueError(
            f"{op}: input channels {x.shape[0]} != weight C_in {w.shape[0]}"
        )
    c_out = w.data.shape[1]
    if b is not None and b.data.shape != (c_out,):
        raise ValueError(f"{op}: bias shape {b.data.shape} != ({c_out},)")
    kshape = w.data.shape[2:]
    out_spatial = tuple(
        (x.data.shape[1 + i] - 1) * stride + kshape[i] - 2 * padding
        for i in range(nd)
    )
    # Transposed conv is the adjoint of a conv that maps C_out -> C_in, whose
    # weight in conv layout is exactly w; reuse the input-gradient kernel.
    out_data = _conv_grad_input(x.data, w.data, stride, padding, out_spatial)
    if b is not None:
        out_data = out_data + b.data.reshape((-1,) + (1,) * nd)

    def vjp(g):
        gx = _conv_forward(g, w.data, stride, padding)
        gw_c = _conv_grad_weight(g, x.data, stride, padding, kshape)  # [C_in,C_out,*K]
        gb = g.sum(axis=tuple(range(1, nd + 1))) if b is not None else None
        return (gx, gw_c, gb) if b is not None else (gx, gw_c)

    inputs = (x, w, b) if b is not None else (x, w)
    return register(out_data, inputs, vjp)


def conv2d_transposed(x, w, b=None, stride=2, padding=0):
    """Adjoint of conv2d; weight layout [C_in, C_out, kh, kw].

    Output spatial size is (H-1)*stride + kh - 2*padding, so a 2x2 kernel at
    stride 2 and padding 0 exactly doubles the resolution.
    """
    return _convnd_transposed(x, w, b, stride, padding, 2, "conv2d_transposed")


def conv3d_transposed(x, w, b=None, stride=2, padding=0):
    return _convnd_transposed(x, w, b, stride, padding, 3, "conv3d_transposed")
