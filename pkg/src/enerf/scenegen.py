"""Procedural multi-view synthetic scenes with analytic ray-traced ground truth.

A scene is a handful of textured primitives lit by one directional light plus
constant ambient.  Cameras sit on a ring looking at a common target; every
view carries an analytic depth map (camera-frame z of the first hit).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, rays_for_pixels


class SceneError(ValueError):
    pass


class DatasetIOError(IOError):
    pass


@dataclass
class Primitive:
    kind: str  # sphere | box | plane
    position: tuple = (0.0, 0.0, 0.0)
    size: float | tuple = 1.0  # sphere: radius; box: half extents; plane: half extents (2)
    normal: tuple = (0.0, 0.0, 1.0)  # plane only
    texture: str = "solid"  # checker | perlin | solid
    tex_scale: float = 1.0
    albedo: tuple = (0.8, 0.8, 0.8)
    albedo2: tuple = (0.1, 0.1, 0.1)  # second checker color


@dataclass
class SceneSpec:
    primitives: list
    light: tuple = (0.3, -0.5, -0.8)
    ambient: float = 0.3
    background: tuple = (0.0, 0.0, 0.0)
    ring_count: int = 10
    ring_radius: float = 4.0
    ring_height: float = 2.5
    look_at: tuple = (0.0, 0.0, 0.8)
    vfov_deg: float = 50.0
    resolution: tuple = (64, 64)
    near: float = 2.0
    far: float = 8.0
    n_test: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.ring_count < 3:
            raise SceneError("camera ring needs at least 3 cameras")


@dataclass
class View:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    camera: Camera
    gt_depth: np.ndarray  # [H, W] float32, 0 = no hit


@dataclass
class SceneDataset:
    views: list
    near: float
    far: float
    train_ids: list
    test_ids: list
    background: tuple = (0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# intersection / shading
# ---------------------------------------------------------------------------

def _intersect_sphere(origin, dirs, prim):
    c = np.asarray(prim.position)
    r = float(prim.size)
    oc = origin - c
    b = dirs @ oc
    disc = b * b - (oc @ oc - r * r)
    hit = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sq
    t2 = -b + sq
    t = np.where(t > 1e-6, t, t2)
    t = np.where(hit & (t > 1e-6), t, np.inf)
    pts = origin + dirs * t[:, None]
    n = (pts - c) / r
    return t, n


def _intersect_plane(origin, dirs, prim):
    n = np.asarray(prim.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    p0 = np.asarray(prim.position)
    denom = dirs @ n
    tnum = (p0 - origin) @ n
    t = np.where(np.abs(denom) > 1e-9, tnum / np.where(denom == 0, 1, denom), np.inf)
    pts = origin + dirs * t[:, None]
    # in-plane rectangle test in a tangent frame
    tang = np.cross(n, [0.0, 0.0, 1.0])
    if np.linalg.norm(tang) < 1e-6:
        tang = np.cross(n, [0.0, 1.0, 0.0])
    tang = tang / np.linalg.norm(tang)
    bit = np.cross(n, tang)
    local = pts - p0
    if isinstance(prim.size, (tuple, list)):
        ex, ey = float(prim.size[0]), float(prim.size[1])
    else:
        ex = ey = float(prim.size)
    inside = (np.abs(local @ tang) <= ex) & (np.abs(local @ bit) <= ey)
    t = np.where((t > 1e-6) & inside, t, np.inf)
    normals = np.broadcast_to(n, dirs.shape).copy()
    flip = denom > 0
    normals[flip] = -n
    return t, normals


def _intersect_box(origin, dirs, prim):
    c = np.asarray(prim.position)
    h = np.asarray(prim.size if isinstance(prim.size, (tuple, list)) else [prim.size] * 3)
    inv = 1.0 / np.where(dirs == 0, 1e-12, dirs)
    t0 = (c - h - origin) * inv
    t1 = (c + h - origin) * inv
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-6)
    t = np.where(tmin > 1e-6, tmin, tmax)
    t = np.where(hit, t, np.inf)
    pts = origin + dirs * t[:, None]
    local = (pts - c) / h
    axis = np.argmax(np.abs(local), axis=1)
    normals = np.zeros_like(dirs)
    normals[np.arange(len(dirs)), axis] = np.sign(local[np.arange(len(dirs)), axis])
    return t, normals


_INTERSECT = {"sphere": _intersect_sphere, "plane": _intersect_plane, "box": _intersect_box}


def _hash_noise(ix, iy, iz, seed):
    h = (ix * 374761393 + iy * 668265263 + iz * 1274126177 + seed * 69069) & 0xFFFFFFFF
    h = (h ^ (h >> 13)) * 1274126177 & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return (h & 0xFFFF) / 65535.0


def _value_noise(p, seed):
    """Smooth 3-D value noise in [0, 1] (scene textures only)."""
    ip = np.floor(p).astype(np.int64)
    f = p - ip
    f = f * f * (3 - 2 * f)
    acc = np.zeros(len(p))
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                v = _hash_noise(ip[:, 0] + dx, ip[:, 1] + dy, ip[:, 2] + dz, seed)
                w = (
                    (f[:, 0] if dx else 1 - f[:, 0])
                    * (f[:, 1] if dy else 1 - f[:, 1])
                    * (f[:, 2] if dz else 1 - f[:, 2])
                )
                acc += w * v
    return acc


def _texture(prim, pts, seed):
    if prim.texture == "solid":
        return np.broadcast_to(np.asarray(prim.albedo), (len(pts), 3)).copy()
    if prim.texture == "checker":
        s = prim.tex_scale
        parity = np.floor(pts / s).astype(np.int64).sum(axis=1) % 2
        a = np.asarray(prim.albedo)
        b = np.asarray(prim.albedo2)
        return np.where(parity[:, None] == 0, a, b)
    if prim.texture == "perlin":
        # independent noise per channel so multi-view matching sees three
        # uncorrelated signals instead of one gray ramp
        a = np.asarray(prim.albedo)
        b = np.asarray(prim.albedo2)
        out = np.empty((len(pts), 3))
        for ch in range(3):
            base = seed + 11 * ch
            n = (
                0.5 * _value_noise(pts / prim.tex_scale, base)
                + 0.3 * _value_noise(pts * 2.0 / prim.tex_scale, base + 1)
                + 0.2 * _value_noise(pts * 4.0 / prim.tex_scale, base + 2)
            )
            out[:, ch] = b[ch] + (a[ch] - b[ch]) * n
        return out
    raise SceneError(f"unknown texture '{prim.texture}'")


def trace(spec: SceneSpec, origin, dirs):
    """Shade rays against the scene; returns (rgb [M,3], t_hit [M], normals)."""
    with np.errstate(invalid="ignore"):
        return _trace(spec, origin, dirs)


def _trace(spec, origin, dirs):
    best_t = np.full(len(dirs), np.inf)
    best_n = np.zeros_like(dirs)
    best_rgb = np.broadcast_to(np.asarray(spec.background, dtype=np.float64), dirs.shape).copy()
    light = np.asarray(spec.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for prim in spec.primitives:
        t, n = _INTERSECT[prim.kind](origin, dirs, prim)
        closer = t < best_t
        if not closer.any():
            continue
        pts = origin + dirs[closer] * t[closer, None]
        alb = _texture(prim, pts, spec.seed)
        lam = np.maximum(0.0, -(n[closer] @ light))
        shade = spec.ambient + (1 - spec.ambient) * lam
        best_rgb[closer] = np.clip(alb * shade[:, None], 0.0, 1.0)
        best_t[closer] = t[closer]
        best_n[closer] = n[closer]
    return best_rgb, best_t, best_n


def ring_camera(spec: SceneSpec, angle_rad, width=None, height=None):
    pos = np.array(
        [
            spec.ring_radius * np.cos(angle_rad),
            spec.ring_radius * np.sin(angle_rad),
            spec.ring_height,
        ]
    )
    return look_at_camera(
        pos,
        np.asarray(spec.look_at, dtype=np.float64),
        spec.vfov_deg,
        width or spec.resolution[0],
        height or spec.resolution[1],
        spec.near,
        spec.far,
    )


def look_at_camera(pos, target, vfov_deg, width, height, near, far, up=(0, 0, 1)):
    z = target - pos
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    t = -R @ pos
    f = 0.5 * height / np.tan(np.deg2rad(vfov_deg) / 2)
    K = np.array(
        [[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1.0]]
    )
    return Camera(K, R, t, width, height, near, far)


def render_view(spec: SceneSpec, cam: Camera):
    """Analytic render of one view: (image [H,W,3], depth [H,W])."""
    W, H = cam.width, cam.height
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    uv = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    origin, dirs = rays_for_pixels(cam, uv)
    rgb, t, _ = trace(spec, origin, dirs)
    # camera-frame z of the hit point (matches project())
    zdir = cam.R[2] @ dirs.T
    depth = np.where(np.isfinite(t), t * zdir, 0.0)
    return (
        rgb.reshape(H, W, 3).astype(np.float32),
        depth.reshape(H, W).astype(np.float32),
    )


def generate_scene(spec: SceneSpec) -> SceneDataset:
    """Render the camera ring; deterministic in spec.seed."""
    views = []
    for k in range(spec.ring_count):
        angle = 2 * np.pi * k / spec.ring_count
        cam = ring_camera(spec, angle)
        for prim in spec.primitives:
            if _camera_inside(prim, cam.center):
                raise SceneError(f"camera {k} lies inside primitive '{prim.kind}'")
        image, depth = render_view(spec, cam)
        covered = depth > 0
        if covered.any():
            lo, hi = depth[covered].min(), depth[covered].max()
            if lo < spec.near - 1e-6 or hi > spec.far + 1e-6:
                raise SceneError(
                    f"view {k}: depth range [{lo:.3f}, {hi:.3f}] exceeds "
                    f"[{spec.near}, {spec.far}]"
                )
        views.append(View(image=image, camera=cam, gt_depth=depth))
    ids = list(range(spec.ring_count))
    # spread test views evenly around the ring
    step = max(1, spec.ring_count // max(spec.n_test, 1))
    test_ids = ids[step // 2 :: step][: spec.n_test]
    train_ids = [i for i in ids if i not in test_ids]
    return SceneDataset(
        views=views,
        near=spec.near,
        far=spec.far,
        train_ids=train_ids,
        test_ids=test_ids,
        background=spec.background,
    )


def _camera_inside(prim, c):
    p = np.asarray(prim.position)
    if prim.kind == "sphere":
        return np.linalg.norm(c - p) < float(prim.size)
    if prim.kind == "box":
        h = np.asarray(prim.size if isinstance(prim.size, (tuple, list)) else [prim.size] * 3)
        return np.all(np.abs(c - p) < h)
    return False


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset(name: str, resolution=None, seed=0) -> SceneSpec:
    """Named desk scenes.  'plane-sphere' is the default training preset.

    resolution overrides the preset default (64x64, or 32x32 for 'micro').
    """
    if name == "plane-sphere":
        resolution = resolution or (64, 64)
        # compact desk: the whole textured patch fits inside every camera
        # frustum, so each target pixel is either seen by all source views
        # (novel-view blending is well posed) or falls on the constant
        # background, which the renderer composites exactly
        prims = [
            Primitive(
                kind="plane",
                position=(0, 0, 0),
                size=(1.8, 1.8),
                texture="perlin",
                tex_scale=1.5,
                albedo=(0.9, 0.75, 0.5),
                albedo2=(0.25, 0.2, 0.45),
            ),
            Primitive(
                kind="sphere",
                position=(0, 0, 0.8),
                size=0.8,
                texture="checker",
                tex_scale=0.8,
                albedo=(0.9, 0.25, 0.2),
                albedo2=(0.95, 0.9, 0.85),
            ),
        ]
        return SceneSpec(
            primitives=prims, ring_radius=1.5, ring_height=4.5,
            look_at=(0.0, 0.0, 0.45), background=(0.08, 0.09, 0.11),
            resolution=resolution, seed=seed,
        )
    if name == "micro":
        spec = preset("plane-sphere", resolution=resolution or (32, 32), seed=seed)
        spec.ring_count = 6
        spec.n_test = 1
        return spec
    raise SceneError(f"unknown preset '{name}'")


# ---------------------------------------------------------------------------
# serialization: cameras.json + view_%03d.png + depth_%03d.pfm
# ---------------------------------------------------------------------------

def write_pfm(path, data):
    """Grayscale PFM, little-endian (scale -1.0), rows bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise DatasetIOError(f"{path}: not a grayscale PFM file")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        buf = fh.read(w * h * 4)
        if len(buf) != w * h * 4:
            raise DatasetIOError(f"{path}: truncated PFM payload")
        arr = np.frombuffer(buf, dtype="<f4" if scale < 0 else ">f4")
        return arr.reshape(h, w)[::-1].copy()


def save_dataset(ds: SceneDataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cams = []
    for i, view in enumerate(ds.views):
        c = view.camera
        cams.append(
            {
                "K": [float(x) for x in c.K.ravel()],
                "R": [float(x) for x in c.R.ravel()],
                "t": [float(x) for x in c.t],
                "width": c.width,
                "height": c.height,
                "near": c.near,
                "far": c.far,
                "split": "train" if i in ds.train_ids else "test",
            }
        )
        img = np.clip(np.rint(view.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(out / f"view_{i:03d}.png")
        write_pfm(out / f"depth_{i:03d}.pfm", view.gt_depth)
    meta = {
        "near": ds.near,
        "far": ds.far,
        "background": list(ds.background),
        "views": cams,
    }
    (out / "cameras.json").write_text(json.dumps(meta, indent=1))


def load_dataset(in_dir) -> SceneDataset:
    src = Path(in_dir)
    cam_file = src / "cameras.json"
    if not cam_file.exists():
        raise DatasetIOError(f"missing {cam_file}")
    meta = json.loads(cam_file.read_text())
    views, train_ids, test_ids = [], [], []
    for i, c in enumerate(meta["views"]):
        img_path = src / f"view_{i:03d}.png"
        depth_path = src / f"depth_{i:03d}.pfm"
        if not img_path.exists():
            raise DatasetIOError(f"view {i}: missing image file {img_path}")
        if not depth_path.exists():
            raise DatasetIOError(f"view {i}: missing depth file {depth_path}")
        image = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
        depth = read_pfm(depth_path)
        cam = Camera(
            np.array(c["K"]).reshape(3, 3),
            np.array(c["R"]).reshape(3, 3),
            np.array(c["t"]),
            c["width"],
            c["height"],
            c["near"],
            c["far"],
        )
        views.append(View(image=image, camera=cam, gt_depth=depth))
        (train_ids if c["split"] == "train" else test_ids).append(i)
    return SceneDataset(
        views=views,
        near=meta["near"],
        far=meta["far"],
        train_ids=train_ids,
        test_ids=test_ids,
        background=tuple(meta.get("background", (0, 0, 0))),
    )
