"""Trainable components: 2D UNet extractor, 3D regularizers, pooling and MLPs.

Channel contract: F1 [32, H/4, W/4], F2 [16, H/2, W/2], F3 [8, H, W].
The density MLP consumes the 8-channel pooled image feature plus the
16-channel voxel feature; the blending MLP consumes 64 + 8 + 4 inputs (the
per-view feature is the 8-channel F3 sample).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

F1_CHANNELS = 32
F2_CHANNELS = 16
F3_CHANNELS = 8
VOXEL_CHANNELS = 16
POINT_CHANNELS = 64

CHECKPOINT_MAGIC = b"ENRF"
CHECKPOINT_VERSION = 1


class NetworkError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    F1: ad.Tensor
    F2: ad.Tensor
    F3: ad.Tensor


def _he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _conv2d_w(rng, c_out, c_in, k):
    return _he_uniform(rng, (c_out, c_in, k, k), c_in * k * k)


def _deconv2d_w(rng, c_in, c_out, k):
    return _he_uniform(rng, (c_in, c_out, k, k), c_in * k * k)


def _conv3d_w(rng, c_out, c_in, k):
    return _he_uniform(rng, (c_out, c_in, k, k, k), c_in * k ** 3)


def _linear_w(rng, n_in, n_out):
    return _he_uniform(rng, (n_in, n_out), n_in)


def init_weights(seed=0):
    """He-uniform init for every weight group; zero biases.

    Returns a flat dict name -> ndarray.  Group = name prefix before the
    first dot: unet, reg3d_coarse, reg3d_fine, pool_mlp, phi, varphi.
    """
    rng = np.random.default_rng(seed)
    w = {}
    # UNet encoder: three stride-2 stages; decoder: 2x2/stride-2 deconvs with
    # 1x1 skip projections from the encoder.
    w["unet.enc1.w"] = _conv2d_w(rng, 8, 3, 3)
    w["unet.enc1.b"] = np.zeros(8, np.float32)
    w["unet.enc2.w"] = _conv2d_w(rng, 16, 8, 3)
    w["unet.enc2.b"] = np.zeros(16, np.float32)
    w["unet.enc3.w"] = _conv2d_w(rng, 32, 16, 3)
    w["unet.enc3.b"] = np.zeros(32, np.float32)
    w["unet.dec1.w"] = _deconv2d_w(rng, 32, 32, 2)
    w["unet.dec1.b"] = np.zeros(32, np.float32)
    w["unet.skip1.w"] = _conv2d_w(rng, 32, 16, 1)
    w["unet.skip1.b"] = np.zeros(32, np.float32)
    w["unet.dec2.w"] = _deconv2d_w(rng, 32, 16, 2)
    w["unet.dec2.b"] = np.zeros(16, np.float32)
    w["unet.skip2.w"] = _conv2d_w(rng, 16, 8, 1)
    w["unet.skip2.b"] = np.zeros(16, np.float32)
    w["unet.dec3.w"] = _deconv2d_w(rng, 16, 8, 2)
    w["unet.dec3.b"] = np.zeros(8, np.float32)
    # 3D regularizers
    w["reg3d_coarse.c1.w"] = _conv3d_w(rng, 8, F1_CHANNELS, 3)
    w["reg3d_coarse.c1.b"] = np.zeros(8, np.float32)
    w["reg3d_coarse.c2.w"] = _conv3d_w(rng, 1, 8, 3)
    w["reg3d_coarse.c2.b"] = np.zeros(1, np.float32)
    w["reg3d_fine.c1.w"] = _conv3d_w(rng, 16, F2_CHANNELS, 3)
    w["reg3d_fine.c1.b"] = np.zeros(16, np.float32)
    w["reg3d_fine.logits.w"] = _conv3d_w(rng, 1, 16, 3)
    w["reg3d_fine.logits.b"] = np.zeros(1, np.float32)
    w["reg3d_fine.feat.w"] = _conv3d_w(rng, VOXEL_CHANNELS, 16, 1)
    w["reg3d_fine.feat.b"] = np.zeros(VOXEL_CHANNELS, np.float32)
    # pooling MLP psi: [f_i, mu, var] (24) -> 16 -> 1
    w["pool_mlp.l1.w"] = _linear_w(rng, 3 * F3_CHANNELS, 16)
    w["pool_mlp.l1.b"] = np.zeros(16, np.float32)
    w["pool_mlp.l2.w"] = _linear_w(rng, 16, 1)
    w["pool_mlp.l2.b"] = np.zeros(1, np.float32)
    # density MLP phi: (8 + 16) -> 128 -> (64 + 1)
    w["phi.l1.w"] = _linear_w(rng, F3_CHANNELS + VOXEL_CHANNELS, 128)
    w["phi.l1.b"] = np.zeros(128, np.float32)
    w["phi.l2.w"] = _linear_w(rng, 128, POINT_CHANNELS + 1)
    w["phi.l2.b"] = np.zeros(POINT_CHANNELS + 1, np.float32)
    # blending MLP varphi: (64 + 8 + 4) -> 128 -> 64 -> 1
    w["varphi.l1.w"] = _linear_w(rng, POINT_CHANNELS + F3_CHANNELS + 4, 128)
    w["varphi.l1.b"] = np.zeros(128, np.float32)
    w["varphi.l2.w"] = _linear_w(rng, 128, 64)
    w["varphi.l2.b"] = np.zeros(64, np.float32)
    w["varphi.l3.w"] = _linear_w(rng, 64, 1)
    w["varphi.l3.b"] = np.zeros(1, np.float32)
    return w


WEIGHT_GROUPS = ("unet", "reg3d_coarse", "reg3d_fine", "pool_mlp", "phi", "varphi")


class WeightStore:
    """Holds the raw arrays and hands out Tensor views for one forward pass.

    Tensors alias the underlying arrays, so Adam updates in place are seen by
    the next forward; inference-only workers share the arrays read-only.
    """

    def __init__(self, arrays):
        self.arrays = dict(arrays)
        self.tensors = {
            k: _make_param(v) for k, v in self.arrays.items()
        }

    def __getitem__(self, name) -> ad.Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.arrays)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


def _make_param(arr):
    t = ad.Tensor.__new__(ad.Tensor)
    t.data = arr
    t.requires_grad = True
    t.grad = None
    return t


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def extract_features(image, weights: WeightStore) -> FeaturePyramid:
    """2D UNet: [3,H,W] -> pyramid (32,H/4,W/4), (16,H/2,W/2), (8,H,W)."""
    image = ad.as_tensor(image)
    c, h, w = image.shape
    if h % 4 or w % 4:
        raise NetworkError(f"image size {h}x{w} must be divisible by 4")
    e1 = ad.relu(ad.conv2d(image, weights["unet.enc1.w"], weights["unet.enc1.b"], stride=2, padding=1))
    e2 = ad.relu(ad.conv2d(e1, weights["unet.enc2.w"], weights["unet.enc2.b"], stride=2, padding=1))
    e3 = ad.relu(ad.conv2d(e2, weights["unet.enc3.w"], weights["unet.enc3.b"], stride=2, padding=1))
    f1 = ad.conv2d_transposed(e3, weights["unet.dec1.w"], weights["unet.dec1.b"], stride=2) \
        + ad.conv2d(e2, weights["unet.skip1.w"], weights["unet.skip1.b"], stride=1, padding=0)
    f2 = ad.conv2d_transposed(ad.relu(f1), weights["unet.dec2.w"], weights["unet.dec2.b"], stride=2) \
        + ad.conv2d(e1, weights["unet.skip2.w"], weights["unet.skip2.b"], stride=1, padding=0)
    f3 = ad.conv2d_transposed(ad.relu(f2), weights["unet.dec3.w"], weights["unet.dec3.b"], stride=2)
    return FeaturePyramid(F1=f1, F2=f2, F3=f3)


def regularize_volume(cost, level, weights: WeightStore):
    """3D CNN over a cost volume.

    coarse: [32,D,h,w] -> logits [D,h,w]; fine: [16,D,h,w] -> (logits,
    feature volume [16,D,h,w]).  Softmax over depth happens downstream.
    """
    cost = ad.as_tensor(cost)
    if level == "coarse":
        if cost.shape[0] != F1_CHANNELS:
            raise NetworkError(
                f"coarse cost volume must have {F1_CHANNELS} channels, got {cost.shape[0]}"
            )
        h = ad.relu(ad.conv3d(cost, weights["reg3d_coarse.c1.w"], weights["reg3d_coarse.c1.b"], stride=1, padding=1))
        logits = ad.conv3d(h, weights["reg3d_coarse.c2.w"], weights["reg3d_coarse.c2.b"], stride=1, padding=1)
        return ad.reshape(logits, logits.shape[1:]), None
    if level == "fine":
        if cost.shape[0] != F2_CHANNELS:
            raise NetworkError(
                f"fine cost volume must have {F2_CHANNELS} channels, got {cost.shape[0]}"
            )
        h = ad.relu(ad.conv3d(cost, weights["reg3d_fine.c1.w"], weights["reg3d_fine.c1.b"], stride=1, padding=1))
        logits = ad.conv3d(h, weights["reg3d_fine.logits.w"], weights["reg3d_fine.logits.b"], stride=1, padding=1)
        feat = ad.conv3d(h, weights["reg3d_fine.feat.w"], weights["reg3d_fine.feat.b"], stride=1, padding=0)
        return ad.reshape(logits, logits.shape[1:]), feat
    raise NetworkError(f"unknown level '{level}'")


def _linear(x, w, b):
    return ad.matmul(x, w) + b


def pool_weights_batch(feats, mask, weights: WeightStore):
    """psi logits for [N,P,8] per-view features with [N,P] validity.

    Mean/variance are taken over valid views only; returns logits [N,P].
    """
    n, p, c = feats.shape
    m = mask.astype(np.float32)[:, :, None]
    cnt = np.maximum(m.sum(axis=0, keepdims=True), 1.0)
    mt = ad.Tensor(m)
    mu = ad.tsum(feats * mt, axis=0, keepdims=True) / ad.Tensor(cnt)
    var = ad.tsum(ad.square(feats - mu) * mt, axis=0, keepdims=True) / ad.Tensor(cnt)
    mu_b = ad.reshape(mu + ad.Tensor(np.zeros((n, p, c), np.float32)), (n * p, c))
    var_b = ad.reshape(var + ad.Tensor(np.zeros((n, p, c), np.float32)), (n * p, c))
    x = ad.concat([ad.reshape(feats, (n * p, c)), mu_b, var_b], axis=1)
    h = ad.relu(_linear(x, weights["pool_mlp.l1.w"], weights["pool_mlp.l1.b"]))
    logits = _linear(h, weights["pool_mlp.l2.w"], weights["pool_mlp.l2.b"])
    return ad.reshape(logits, (n, p))


def masked_softmax(logits, mask, axis=0):
    """Softmax over ``axis`` restricted to mask-true entries."""
    masked = np.where(mask, logits.data, -np.inf)
    peak = masked.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)  # all-invalid slices
    shifted = logits - ad.Tensor(peak.astype(logits.data.dtype))
    # zero out invalid entries before exp so huge invalid logits can't overflow
    shifted = ad.where(
        np.broadcast_to(mask, shifted.shape),
        shifted,
        ad.Tensor(np.zeros(shifted.shape, shifted.data.dtype)),
    )
    e = ad.exp(shifted) * ad.Tensor(mask.astype(np.float32))
    return e / (ad.tsum(e, axis=axis, keepdims=True) + 1e-12)


def pool_features_batch(feats, mask, weights: WeightStore):
    """Weighted-pooled f_img [P,8] from per-view features [N,P,8]."""
    logits = pool_weights_batch(feats, mask, weights)
    wgt = masked_softmax(logits, mask, axis=0)
    n, p, c = feats.shape
    return ad.tsum(feats * ad.reshape(wgt, (n, p, 1)), axis=0)


def density_mlp_batch(f_img, f_voxel, weights: WeightStore):
    """phi: ([P,8], [P,16]) -> (f_p [P,64], sigma [P])."""
    x = ad.concat([f_img, f_voxel], axis=1)
    h = ad.relu(_linear(x, weights["phi.l1.w"], weights["phi.l1.b"]))
    out = _linear(h, weights["phi.l2.w"], weights["phi.l2.b"])
    f_p = out[:, :POINT_CHANNELS]
    sigma = ad.softplus(ad.reshape(out[:, POINT_CHANNELS:], (out.shape[0],)))
    return f_p, sigma


def blend_weights_batch(f_p, f_i, delta_d, weights: WeightStore):
    """varphi logits for [N,P,...] stacked per-view inputs -> [N,P]."""
    n, p = f_i.shape[0], f_i.shape[1]
    fp_rep = ad.reshape(f_p + ad.Tensor(np.zeros((n, p, POINT_CHANNELS), np.float32)), (n * p, POINT_CHANNELS))
    x = ad.concat(
        [fp_rep, ad.reshape(f_i, (n * p, F3_CHANNELS)), ad.reshape(delta_d, (n * p, 4))],
        axis=1,
    )
    h = ad.relu(_linear(x, weights["varphi.l1.w"], weights["varphi.l1.b"]))
    h = ad.relu(_linear(h, weights["varphi.l2.w"], weights["varphi.l2.b"]))
    out = _linear(h, weights["varphi.l3.w"], weights["varphi.l3.b"])
    return ad.reshape(out, (n, p))


def blend_color_batch(f_p, f_i, delta_d, colors, mask, weights: WeightStore):
    """Soft-argmax blend of per-view colors [N,P,3] -> [P,3]."""
    logits = blend_weights_batch(f_p, f_i, delta_d, weights)
    wgt = masked_softmax(logits, mask, axis=0)
    n, p = logits.shape
    return ad.tsum(colors * ad.reshape(wgt, (n, p, 1)), axis=0)


# single-point wrappers -----------------------------------------------------

def pool_features(f_list, weights: WeightStore):
    """psi over a list of length-8 feature vectors -> pooled vec8."""
    if not f_list:
        raise NetworkError("pool_features: empty feature list")
    feats = ad.stack([ad.reshape(ad.as_tensor(f), (1, F3_CHANNELS)) for f in f_list], axis=0)
    mask = np.ones((len(f_list), 1), bool)
    return ad.reshape(pool_features_batch(feats, mask, weights), (F3_CHANNELS,))


def density_mlp(f_img, f_voxel, weights: WeightStore):
    f_img = ad.reshape(ad.as_tensor(f_img), (1, F3_CHANNELS))
    f_voxel = ad.reshape(ad.as_tensor(f_voxel), (1, VOXEL_CHANNELS))
    f_p, sigma = density_mlp_batch(f_img, f_voxel, weights)
    return ad.reshape(f_p, (POINT_CHANNELS,)), ad.reshape(sigma, ())


def blend_color(f_p, per_view, weights: WeightStore):
    """Blend source colors for a single point.

    per_view: list of dicts {f_i: vec8, c_i: rgb, delta_d: vec4}.
    """
    if not per_view:
        raise NetworkError("blend_color: empty view list")
    n = len(per_view)
    f_p = ad.reshape(ad.as_tensor(f_p), (1, POINT_CHANNELS))
    f_i = ad.stack([ad.reshape(ad.as_tensor(v["f_i"]), (1, F3_CHANNELS)) for v in per_view], axis=0)
    dd = ad.stack([ad.reshape(ad.as_tensor(v["delta_d"]), (1, 4)) for v in per_view], axis=0)
    colors = ad.stack([ad.reshape(ad.as_tensor(v["c_i"]), (1, 3)) for v in per_view], axis=0)
    mask = np.ones((n, 1), bool)
    return ad.reshape(blend_color_batch(f_p, f_i, dd, colors, mask, weights), (3,))


# ---------------------------------------------------------------------------
# checkpoint format: "ENRF", u32 version, u32 count, then per tensor
# u16 name_len, name, u8 dtype (0 = f32), u8 ndim, u32 dims[], LE payload.
# ---------------------------------------------------------------------------

def save_checkpoint(path, weights):
    arrays = weights.arrays if isinstance(weights, WeightStore) else weights
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise NetworkError(f"{path}: bad checkpoint magic")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise NetworkError(f"{path}: unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            dtype, ndim = struct.unpack("<BB", fh.read(2))
            if dtype != 0:
                raise NetworkError(f"{path}: unknown dtype tag {dtype}")
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(dims)) if dims else 1
            arrays[name] = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(dims).copy()
    return arrays
