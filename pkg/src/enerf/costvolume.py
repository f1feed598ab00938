"""Cascade cost volumes and depth probability distributions.

Coarse level: D uniform planes over [near, far] on the H/4 grid, variance cost
over warped F1 features, 3D-regularized into per-plane logits.  The resulting
per-pixel depth range is upsampled x2 and refined with D' per-pixel planes on
the H/2 grid over warped F2 features, which also yields the voxel feature
volume used by the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import Camera, warp_feature_planes
from .networks import WeightStore, extract_features, regularize_volume


class CostVolumeError(ValueError):
    pass


@dataclass
class PlaneSweepVolume:
    cost: ad.Tensor  # [C, D, gh, gw]
    planes: ad.Tensor  # [D, gh, gw]
    scale: float  # grid fraction of full resolution
    valid_count: np.ndarray  # [D, gh, gw] int


@dataclass
class DepthDistribution:
    mean: ad.Tensor  # [gh, gw]
    std: ad.Tensor  # [gh, gw]
    low: ad.Tensor  # [gh, gw]
    high: ad.Tensor  # [gh, gw]
    scale: float


@dataclass
class CascadeConfig:
    depth_planes: int = 64
    fine_planes: int = 8
    range_lambda: float = 1.0
    width_floor_frac: float = 1e-3  # of (far - near)


@dataclass
class CascadeResult:
    coarse: DepthDistribution
    fine: DepthDistribution
    feat_volume: ad.Tensor  # [16, D', H/2, W/2]
    fine_planes: ad.Tensor  # [D', H/2, W/2]
    fine_low: ad.Tensor  # [H/2, W/2], depth span of feat_volume
    fine_high: ad.Tensor  # [H/2, W/2]
    samp_low: ad.Tensor = None  # [H/2, W/2], guided sampling interval
    samp_high: ad.Tensor = None


def build_cost_volume(pyramids, cams, tgt: Camera, planes, level) -> PlaneSweepVolume:
    """Variance-over-views cost volume on the target grid.

    pyramids/cams are per source view; planes is [D] shared or [D, gh, gw]
    per-pixel depths.  Voxels with fewer than two valid warps get zero cost.
    """
    if len(pyramids) < 2:
        raise CostVolumeError(
            f"variance cost needs at least 2 views, got {len(pyramids)}"
        )
    if level == "coarse":
        feats = [p.F1 for p in pyramids]
        scale = 0.25
    elif level == "fine":
        feats = [p.F2 for p in pyramids]
        scale = 0.5
    else:
        raise CostVolumeError(f"unknown level '{level}'")
    gh = int(round(tgt.height * scale))
    gw = int(round(tgt.width * scale))
    planes_t = planes if isinstance(planes, ad.Tensor) else ad.as_tensor(np.asarray(planes, np.float32))
    if planes_t.ndim == 1:
        d = planes_t.shape[0]
        planes_t = ad.reshape(planes_t, (d, 1, 1)) + ad.Tensor(np.zeros((d, gh, gw), np.float32))
    warped, masks = [], []
    for feat, cam in zip(feats, cams):
        wv, m = warp_feature_planes(feat, cam, tgt, planes_t, (gh, gw), scale)
        warped.append(wv)  # [D, gh, gw, C]
        masks.append(m)
    mask = np.stack(masks)  # [N, D, gh, gw]
    count = mask.sum(axis=0)
    mw = ad.Tensor(mask[..., None].astype(np.float32))
    stackv = ad.stack(warped, axis=0)  # [N, D, gh, gw, C]
    denom = ad.Tensor(np.maximum(count, 1).astype(np.float32)[..., None])
    mean = ad.tsum(stackv * mw, axis=0) / denom
    var = ad.tsum(ad.square(stackv - ad.reshape(mean, (1,) + mean.shape)) * mw, axis=0) / denom
    var = var * ad.Tensor((count >= 2).astype(np.float32)[..., None])
    cost = ad.transpose(var, (3, 0, 1, 2))  # [C, D, gh, gw]
    return PlaneSweepVolume(cost=cost, planes=planes_t, scale=scale, valid_count=count)


def uniform_planes(near, far, d):
    """D plane depths uniform in metric depth, at cell midpoints."""
    edges = np.linspace(near, far, d + 1)
    return ((edges[:-1] + edges[1:]) / 2).astype(np.float32)


def depth_distribution(logits, planes, lam, near, far, width_floor=None) -> DepthDistribution:
    """Soft-argmax depth stats over planes: mean, std and [low, high] range.

    P = softmax(logits) over depth; range = mean +- lam * std, clamped to
    [near, far] and widened to at least ``width_floor``.
    """
    if lam <= 0:
        raise CostVolumeError("lambda must be positive")
    if width_floor is None:
        width_floor = 1e-3 * (far - near)
    logits = ad.as_tensor(logits)
    planes = planes if isinstance(planes, ad.Tensor) else ad.as_tensor(np.asarray(planes, np.float32))
    if planes.ndim == 1:
        planes = ad.reshape(planes, (planes.shape[0], 1, 1))
    p = ad.softmax_axis(logits, 0)
    mean = ad.tsum(p * planes, axis=0)
    var = ad.tsum(p * ad.square(planes - ad.reshape(mean, (1,) + mean.shape)), axis=0)
    std = ad.sqrt(ad.clip_min(var, 0.0) + 1e-12)
    low = _clamp(mean - lam * std, near, far)
    high = _clamp(mean + lam * std, near, far)
    # widen symmetrically to the minimum interval width
    mid = (low + high) * 0.5
    half = ad.clip_min((high - low) * 0.5, width_floor / 2)
    return DepthDistribution(
        mean=mean, std=std, low=mid - half, high=mid + half, scale=1.0
    )


def _clamp(t, lo, hi):
    inside = (t.data >= lo) & (t.data <= hi)
    clamped = np.clip(t.data, lo, hi).astype(t.data.dtype)
    return ad.where(inside, t, ad.Tensor(clamped))


def upsample_range(low, high, factor):
    """Bilinear upsample of the [low, high] maps by an integer factor."""
    if factor not in (2, 4):
        raise CostVolumeError(f"upsample factor must be 2 or 4, got {factor}")
    return bilinear_upsample(low, factor), bilinear_upsample(high, factor)


def bilinear_upsample(t, factor):
    """Differentiable bilinear upsample of a [h, w] map (align pixel centers)."""
    t = ad.as_tensor(t)
    h, w = t.shape
    oh, ow = h * factor, w * factor
    ys = (np.arange(oh) + 0.5) / factor - 0.5
    xs = (np.arange(ow) + 0.5) / factor - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    wy0 = ad.Tensor((1 - fy)[:, None].astype(np.float32))
    wy1 = ad.Tensor(fy[:, None].astype(np.float32))
    wx0 = ad.Tensor((1 - fx)[None, :].astype(np.float32))
    wx1 = ad.Tensor(fx[None, :].astype(np.float32))
    iy0, iy1 = np.ix_(y0, x0), np.ix_(y1, x0)
    iy0x1, iy1x1 = np.ix_(y0, x1), np.ix_(y1, x1)
    return (
        t[iy0] * wy0 * wx0
        + t[iy1] * wy1 * wx0
        + t[iy0x1] * wy0 * wx1
        + t[iy1x1] * wy1 * wx1
    )


def fine_planes_in_range(low, high, d_fine):
    """Per-pixel midpoint depth planes inside [low, high]: [D', gh, gw]."""
    gh, gw = low.shape
    frac = ad.Tensor(((np.arange(d_fine) + 0.5) / d_fine).astype(np.float32).reshape(d_fine, 1, 1))
    lo = ad.reshape(low, (1, gh, gw))
    hi = ad.reshape(high, (1, gh, gw))
    return lo + (hi - lo) * frac


def cascade_predict(pyramids, cams, tgt: Camera, weights: WeightStore,
                    config: CascadeConfig | None = None) -> CascadeResult:
    """Coarse-to-fine depth prediction for a target view."""
    config = config or CascadeConfig()
    n = len(pyramids)
    if not 2 <= n <= 5:
        raise CostVolumeError(f"cascade_predict needs 2..5 source views, got {n}")
    near, far = tgt.near, tgt.far
    width_floor = config.width_floor_frac * (far - near)
    coarse_planes = uniform_planes(near, far, config.depth_planes)
    coarse_vol = build_cost_volume(pyramids, cams, tgt, coarse_planes, "coarse")
    coarse_logits, _ = regularize_volume(coarse_vol.cost, "coarse", weights)
    coarse = depth_distribution(
        coarse_logits, coarse_vol.planes, config.range_lambda, near, far, width_floor
    )
    coarse.scale = 0.25
    low2, high2 = upsample_range(coarse.low, coarse.high, 2)
    fine_planes = fine_planes_in_range(low2, high2, config.fine_planes)
    fine_vol = build_cost_volume(pyramids, cams, tgt, fine_planes, "fine")
    fine_logits, feat_volume = regularize_volume(fine_vol.cost, "fine", weights)
    fine = depth_distribution(
        fine_logits, fine_planes, config.range_lambda, near, far, width_floor
    )
    fine.scale = 0.5
    return CascadeResult(
        coarse=coarse,
        fine=fine,
        feat_volume=feat_volume,
        fine_planes=fine_planes,
        fine_low=low2,
        fine_high=high2,
        samp_low=fine.low,
        samp_high=fine.high,
    )


def single_stage_predict(pyramids, cams, tgt: Camera, weights: WeightStore,
                         n_planes=128, config: CascadeConfig | None = None) -> CascadeResult:
    """One-shot depth prediction: a single H/2 volume over the full range.

    Baseline for the cascade; the plane count stands in for both levels, so
    the default matches coarse + fine depth budgets combined.
    """
    config = config or CascadeConfig()
    n = len(pyramids)
    if not 2 <= n <= 5:
        raise CostVolumeError(f"single_stage_predict needs 2..5 source views, got {n}")
    near, far = tgt.near, tgt.far
    width_floor = config.width_floor_frac * (far - near)
    planes = uniform_planes(near, far, n_planes)
    vol = build_cost_volume(pyramids, cams, tgt, planes, "fine")
    logits, feat_volume = regularize_volume(vol.cost, "fine", weights)
    dist = depth_distribution(logits, vol.planes, config.range_lambda, near, far, width_floor)
    dist.scale = 0.5
    return CascadeResult(
        coarse=dist,
        fine=dist,
        feat_volume=feat_volume,
        fine_planes=vol.planes,
        fine_low=ad.Tensor(np.full(dist.mean.shape, near, np.float32)),
        fine_high=ad.Tensor(np.full(dist.mean.shape, far, np.float32)),
        samp_low=dist.low,
        samp_high=dist.high,
    )


def select_source_views(ds, tgt_cam: Camera, n, candidate_ids=None):
    """IDs of the n nearest dataset cameras to the target, ties by id."""
    ids = candidate_ids if candidate_ids is not None else ds.train_ids
    c = tgt_cam.center
    ranked = sorted(ids, key=lambda i: (float(np.linalg.norm(ds.views[i].camera.center - c)), i))
    return ranked[:n]
