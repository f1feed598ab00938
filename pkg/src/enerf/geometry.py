"""Pinhole cameras, rays, and plane-induced homography warping.

Conventions: (u, v) = (column, row) in pixels, origin at the center of the
top-left pixel.  R, t are world-to-camera: x_cam = R @ X + t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class GeometryError(ValueError):
    pass


@dataclass
class Camera:
    K: np.ndarray  # 3x3 intrinsics
    R: np.ndarray  # 3x3 world-to-camera rotation
    t: np.ndarray  # 3 world-to-camera translation
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (0 < self.near < self.far):
            raise GeometryError(f"need 0 < near < far, got {self.near}, {self.far}")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise GeometryError(f"R is not a proper rotation (orthonormality err {err:.2e})")

    @property
    def center(self):
        """Camera center in world coordinates (-R^T t)."""
        return -self.R.T @ self.t

    @property
    def principal_axis(self):
        """Viewing direction in world coordinates (third row of R)."""
        return self.R[2].copy()

    def scaled(self, factor):
        """Camera for an image scaled by ``factor`` (same pose)."""
        K = self.K.copy()
        # pixel-center convention: u' = (u + 0.5) * factor - 0.5
        K[0, 0] *= factor
        K[1, 1] *= factor
        K[0, 2] = (K[0, 2] + 0.5) * factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) * factor - 0.5
        return Camera(
            K, self.R, self.t,
            int(round(self.width * factor)), int(round(self.height * factor)),
            self.near, self.far,
        )


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray  # unit
    pixel: tuple


def project(cam: Camera, point):
    """World point -> (u, v, depth, behind) with depth = camera-frame z."""
    p = cam.R @ np.asarray(point, dtype=np.float64) + cam.t
    depth = p[2]
    behind = depth <= 0
    z = depth if not behind else (depth if depth != 0 else 1e-30)
    u = cam.K[0, 0] * p[0] / z + cam.K[0, 2]
    v = cam.K[1, 1] * p[1] / z + cam.K[1, 2]
    return u, v, depth, behind


def unproject(cam: Camera, u, v, depth):
    """Pixel (u, v) at camera-frame depth -> world point."""
    x = (u - cam.K[0, 2]) / cam.K[0, 0] * depth
    y = (v - cam.K[1, 2]) / cam.K[1, 1] * depth
    return cam.R.T @ (np.array([x, y, depth]) - cam.t)


def ray_for_pixel(cam: Camera, u, v) -> Ray:
    origin = cam.center
    d = cam.R.T @ np.array(
        [(u - cam.K[0, 2]) / cam.K[0, 0], (v - cam.K[1, 2]) / cam.K[1, 1], 1.0]
    )
    return Ray(origin=origin, dir=d / np.linalg.norm(d), pixel=(u, v))


def rays_for_pixels(cam: Camera, uv):
    """Vectorized ray directions for an [M,2] array of (u, v) pixels."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.stack(
        [
            (uv[:, 0] - cam.K[0, 2]) / cam.K[0, 0],
            (uv[:, 1] - cam.K[1, 2]) / cam.K[1, 1],
            np.ones(len(uv)),
        ],
        axis=1,
    ) @ cam.R  # rows: R^T d
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return cam.center, d


def homography(z, src: Camera, tgt: Camera):
    """Plane-induced homography mapping target pixels at depth z to source pixels.

    The plane is fronto-parallel in the target camera (camera-frame z = const).
    Normalized so H[2,2] = 1.
    """
    if z <= 0:
        raise GeometryError(f"homography: depth must be positive, got {z}")
    A, B = homography_terms(src, tgt)
    H = A + B / z
    return H / H[2, 2]


def homography_terms(src: Camera, tgt: Camera):
    """Decompose H(z) = A + B/z for reuse across many depths."""
    a = tgt.principal_axis  # world-frame row vector a^T applied to world vecs
    M = src.R.T @ src.t - tgt.R.T @ tgt.t  # c_tgt - c_src in world frame
    core = tgt.R.T @ np.linalg.inv(tgt.K)
    A = src.K @ src.R @ core
    B = src.K @ src.R @ np.outer(M, a) @ core
    return A, B


def warp_coords(src: Camera, tgt: Camera, planes, grid_uv, feat_scale):
    """Differentiable warp of target-grid pixels through per-pixel depth planes.

    planes: Tensor or array [D, M] of depths (target camera frame);
    grid_uv: [M, 2] full-resolution target pixels; feat_scale maps full-res
    pixels to source feature-map pixels.  Returns (coords Tensor [D*M, 2] in
    feature pixels, valid [D*M] bool for in-front-of-camera).
    """
    A, B = homography_terms(src, tgt)
    p = np.concatenate(
        [np.asarray(grid_uv, dtype=np.float64), np.ones((len(grid_uv), 1))], axis=1
    )
    Ap = (A @ p.T).astype(np.float32)  # [3, M]
    Bp = (B @ p.T).astype(np.float32)
    planes = ad.as_tensor(planes)
    D, M = planes.shape
    inv_z = ad.reshape(1.0 / planes, (D, 1, M))
    hom = ad.Tensor(Ap[None]) + ad.Tensor(Bp[None]) * inv_z  # [D, 3, M]
    wcomp = hom[:, 2, :]
    in_front = wcomp.data > 1e-9
    wsafe = ad.where(in_front, wcomp, np.ones_like(wcomp.data))
    u = hom[:, 0, :] / wsafe
    v = hom[:, 1, :] / wsafe
    # full-res source pixel -> feature-map pixel (pixel-center convention)
    uf = (u + 0.5) * feat_scale - 0.5
    vf = (v + 0.5) * feat_scale - 0.5
    coords = ad.stack([ad.reshape(uf, (D * M,)), ad.reshape(vf, (D * M,))], axis=1)
    return coords, in_front.reshape(D * M)


def warp_feature_planes(feat, src: Camera, tgt: Camera, planes, grid, scale):
    """Warp a source feature map onto target-view sweeping planes.

    feat: Tensor [C, h, w]; planes: list/array of D depths (or [D, gh*gw]);
    grid: (gh, gw) target lattice; scale: full-res -> feature-map pixels.
    Returns (Tensor [D, gh, gw, C], validity mask [D, gh, gw]).
    """
    gh, gw = grid
    planes_arr = np.asarray(planes.data if isinstance(planes, ad.Tensor) else planes)
    if planes_arr.size == 0:
        raise GeometryError("warp_feature_planes: empty plane list")
    if np.any(planes_arr <= 0):
        raise GeometryError("warp_feature_planes: plane behind camera")
    grid_scale = gh / tgt.height
    ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    # grid pixel centers mapped back to full-resolution pixel units
    grid_uv = np.stack(
        [(xs.ravel() + 0.5) / grid_scale - 0.5, (ys.ravel() + 0.5) / grid_scale - 0.5],
        axis=1,
    )
    if planes_arr.ndim == 1:
        planes_t = ad.as_tensor(
            np.broadcast_to(
                planes_arr.astype(np.float32)[:, None], (len(planes_arr), gh * gw)
            ).copy()
        )
    else:
        planes_t = ad.as_tensor(planes) if not isinstance(planes, ad.Tensor) else planes
        planes_t = ad.reshape(planes_t, (planes_t.shape[0], gh * gw))
    D = planes_t.shape[0]
    coords, in_front = warp_coords(src, tgt, planes_t, grid_uv, scale)
    sampled, in_bounds = ad.grid_sample_2d(feat, coords, return_valid=True)
    C = feat.shape[0]
    warped = ad.reshape(sampled, (D, gh, gw, C))
    mask = (in_front & in_bounds).reshape(D, gh, gw)
    return warped, mask


def nearest_axis_point(cams):
    """Least-squares point closest to all camera principal axes.

    For cameras aimed at a common target this recovers that target; used as
    the orbit center for free-viewpoint poses.  Falls back to the mean camera
    center when the axes are near-parallel.
    """
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cams:
        a = cam.principal_axis
        P = np.eye(3) - np.outer(a, a)
        A += P
        b += P @ cam.center
    if np.linalg.cond(A) > 1e8:
        return np.mean([cam.center for cam in cams], axis=0)
    return np.linalg.solve(A, b)
