"""Bilinear / trilinear sampling ops, differentiable in both feature and coords.

Coordinates are continuous pixel (voxel) units with the origin at the center
of the first element.  Out-of-bounds samples contribute zero and are reported
through a per-sample validity mask (a plain bool array, not part of the
gradient path).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, register


def _scatter_add(n_cells, c, idx_list, wgt_list, g):
    """Accumulate weighted cotangents into a flat [n_cells, c] grid."""
    flat_idx = np.concatenate([i for i in idx_list])
    contrib = np.concatenate([g * wt[:, None] for wt in wgt_list])
    base = flat_idx[:, None] * c + np.arange(c)[None, :]
    acc = np.bincount(
        base.ravel(), weights=contrib.astype(np.float64).ravel(), minlength=n_cells * c
    )
    return acc.reshape(n_cells, c).astype(g.dtype)


def _gather_corners(shape_limits, coords):
    """Floor/frac decomposition plus in-bounds masks per axis."""
    x0 = np.floor(coords)
    frac = coords - x0
    x0 = x0.astype(np.int64)
    x1 = x0 + 1
    m0 = [(x0[:, i] >= 0) & (x0[:, i] < shape_limits[i]) for i in range(coords.shape[1])]
    m1 = [(x1[:, i] >= 0) & (x1[:, i] < shape_limits[i]) for i in range(coords.shape[1])]
    x0c = [np.clip(x0[:, i], 0, shape_limits[i] - 1) for i in range(coords.shape[1])]
    x1c = [np.clip(x1[:, i], 0, shape_limits[i] - 1) for i in range(coords.shape[1])]
    return x0c, x1c, m0, m1, frac


def grid_sample_2d(feature, coords, return_valid=False):
    """Sample [C,H,W] at coords [M,2] given as (u, v) = (column, row).

    Returns [M,C]; with ``return_valid`` also a bool mask [M] that is False
    where (u, v) leaves [0, W-1] x [0, H-1].
    """
    feature, coords = as_tensor(feature), as_tensor(coords)
    c, h, w = feature.shape
    f = feature.data.reshape(c, h * w)
    uv = coords.data
    x0c, x1c, m0, m1, frac = _gather_corners((w, h), uv)
    fu, fv = frac[:, 0], frac[:, 1]
    wgt = [
        (1 - fu) * (1 - fv) * (m0[0] & m0[1]),
        fu * (1 - fv) * (m1[0] & m0[1]),
        (1 - fu) * fv * (m0[0] & m1[1]),
        fu * fv * (m1[0] & m1[1]),
    ]
    idx = [
        x0c[1] * w + x0c[0],
        x0c[1] * w + x1c[0],
        x1c[1] * w + x0c[0],
        x1c[1] * w + x1c[0],
    ]
    corner_vals = [f[:, i].T for i in idx]  # each [M,C]
    out_data = sum(wt[:, None] * cv for wt, cv in zip(wgt, corner_vals))
    out_data = np.ascontiguousarray(out_data.astype(feature.dtype))
    valid = (
        (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    )

    def vjp(g):
        gf = gc = None
        if feature.requires_grad:
            gf = _scatter_add(h * w, c, idx, wgt, g).T.reshape(c, h, w)
        if coords.requires_grad:
            # d/du at fixed corners: linear in the fractional offsets.
            gdot = [np.einsum("mc,mc->m", g, cv) for cv in corner_vals]
            du = (
                -(1 - fv) * (m0[0] & m0[1]) * gdot[0]
                + (1 - fv) * (m1[0] & m0[1]) * gdot[1]
                - fv * (m0[0] & m1[1]) * gdot[2]
                + fv * (m1[0] & m1[1]) * gdot[3]
            )
            dv = (
                -(1 - fu) * (m0[0] & m0[1]) * gdot[0]
                - fu * (m1[0] & m0[1]) * gdot[1]
                + (1 - fu) * (m0[0] & m1[1]) * gdot[2]
                + fu * (m1[0] & m1[1]) * gdot[3]
            )
            gc = np.stack([du, dv], axis=1).astype(coords.dtype)
        return (gf, gc)

    out = register(out_data, (feature, coords), vjp)
    if return_valid:
        return out, valid
    return out


def grid_sample_3d(volume, coords, return_valid=False):
    """Sample [C,D,H,W] at coords [M,3] given as (x, y, z) = (col, row, plane).

    Trilinear analogue of grid_sample_2d.
    """
    volume, coords = as_tensor(volume), as_tensor(coords)
    c, d, h, w = volume.shape
    f = volume.data.reshape(c, d * h * w)
    xyz = coords.data
    x0c, x1c, m0, m1, frac = _gather_corners((w, h, d), xyz)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    corners = []
    for bz, zc, mz in ((0, x0c[2], m0[2]), (1, x1c[2], m1[2])):
        for by, yc, my in ((0, x0c[1], m0[1]), (1, x1c[1], m1[1])):
            for bx, xc, mx in ((0, x0c[0], m0[0]), (1, x1c[0], m1[0])):
                wx = fx if bx else 1 - fx
                wy = fy if by else 1 - fy
                wz = fz if bz else 1 - fz
                mask = mx & my & mz
                idx = (zc * h + yc) * w + xc
                corners.append(
                    ((bx, by, bz), wx, wy, wz, mask, wx * wy * wz * mask, idx, f[:, idx].T)
                )
    out_data = sum(wt[:, None] * cv for *_, wt, _, cv in corners)
    out_data = np.ascontiguousarray(out_data.astype(volume.dtype))
    valid = (
        (xyz[:, 0] >= 0) & (xyz[:, 0] <= w - 1)
        & (xyz[:, 1] >= 0) & (xyz[:, 1] <= h - 1)
        & (xyz[:, 2] >= 0) & (xyz[:, 2] <= d - 1)
    )

    def vjp(g):
        gf = gc = None
        if volume.requires_grad:
            gf = _scatter_add(
                d * h * w,
                c,
                [corner[6] for corner in corners],
                [corner[5] for corner in corners],
                g,
            ).T.reshape(c, d, h, w)
        if coords.requires_grad:
            gx = np.zeros(len(xyz), dtype=np.float64)
            gy = np.zeros(len(xyz), dtype=np.float64)
            gz = np.zeros(len(xyz), dtype=np.float64)
            for (bx, by, bz), wx, wy, wz, mask, wt, idx, cv in corners:
                gdot = np.einsum("mc,mc->m", g, cv) * mask
                sx = 1.0 if bx else -1.0
                sy = 1.0 if by else -1.0
                sz = 1.0 if bz else -1.0
                gx += sx * wy * wz * gdot
                gy += sy * wx * wz * gdot
                gz += sz * wx * wy * gdot
            gc = np.stack([gx, gy, gz], axis=1).astype(coords.dtype)
        return (gf, gc)

    out = register(out_data, (volume, coords), vjp)
    if return_valid:
        return out, valid
    return out
