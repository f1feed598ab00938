"""Network component tests: shapes, pooling semantics, checkpoint format."""

import numpy as np
import pytest

from enerf import autodiff as ad
from enerf.networks import (
    WEIGHT_GROUPS,
    NetworkError,
    WeightStore,
    blend_color,
    density_mlp,
    extract_features,
    init_weights,
    load_checkpoint,
    masked_softmax,
    pool_features,
    pool_features_batch,
    regularize_volume,
    save_checkpoint,
)


def test_init_weights_groups_and_determinism():
    w1 = init_weights(0)
    w2 = init_weights(0)
    w3 = init_weights(1)
    assert set(k.split(".")[0] for k in w1) == set(WEIGHT_GROUPS)
    for k in w1:
        np.testing.assert_array_equal(w1[k], w2[k])
    assert any(not np.array_equal(w1[k], w3[k]) for k in w1)
    # biases start at zero
    assert all(not v.any() for k, v in w1.items() if k.endswith(".b"))


def test_pyramid_shapes():
    w = WeightStore(init_weights(0))
    img = np.zeros((3, 32, 48), np.float32)
    pyr = extract_features(img, w)
    assert pyr.F1.shape == (32, 8, 12)
    assert pyr.F2.shape == (16, 16, 24)
    assert pyr.F3.shape == (8, 32, 48)


def test_extract_features_rejects_indivisible():
    w = WeightStore(init_weights(0))
    with pytest.raises(NetworkError, match="divisible"):
        extract_features(np.zeros((3, 30, 32), np.float32), w)


def test_regularizer_shapes():
    w = WeightStore(init_weights(0))
    logits, feat = regularize_volume(np.zeros((32, 8, 6, 6), np.float32), "coarse", w)
    assert logits.shape == (8, 6, 6) and feat is None
    logits, feat = regularize_volume(np.zeros((16, 4, 6, 6), np.float32), "fine", w)
    assert logits.shape == (4, 6, 6)
    assert feat.shape == (16, 4, 6, 6)
    with pytest.raises(NetworkError, match="channels"):
        regularize_volume(np.zeros((7, 4, 6, 6), np.float32), "coarse", w)


def test_masked_softmax_ignores_invalid():
    logits = ad.Tensor(np.array([[1.0], [100.0], [2.0]], np.float32))
    mask = np.array([[True], [False], [True]])
    p = masked_softmax(logits, mask, axis=0).data
    assert p[1, 0] == 0.0
    assert abs(p.sum() - 1.0) < 1e-6
    # matches a plain softmax over the valid entries
    ref = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
    np.testing.assert_allclose(p[[0, 2], 0], ref, atol=1e-6)


def test_pool_is_convex_combination():
    """Pooled feature lies in the convex hull of the per-view features."""
    w = WeightStore(init_weights(0))
    rng = np.random.default_rng(0)
    feats = ad.Tensor(rng.normal(size=(4, 6, 8)).astype(np.float32))
    mask = np.ones((4, 6), bool)
    pooled = pool_features_batch(feats, mask, w).data
    lo = feats.data.min(axis=0)
    hi = feats.data.max(axis=0)
    assert (pooled >= lo - 1e-5).all() and (pooled <= hi + 1e-5).all()


def test_pool_invalid_views_have_no_influence():
    w = WeightStore(init_weights(0))
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(3, 5, 8)).astype(np.float32)
    mask = np.array([[True] * 5, [True] * 5, [False] * 5])
    p1 = pool_features_batch(ad.Tensor(feats.copy()), mask, w).data
    feats[2] = 1e3  # only the masked-out view changes
    p2 = pool_features_batch(ad.Tensor(feats), mask, w).data
    np.testing.assert_allclose(p1, p2, atol=1e-5)


def test_density_mlp_nonnegative_sigma():
    w = WeightStore(init_weights(0))
    rng = np.random.default_rng(2)
    for _ in range(10):
        f_p, sigma = density_mlp(
            rng.normal(size=8).astype(np.float32),
            rng.normal(size=16).astype(np.float32),
            w,
        )
        assert f_p.shape == (64,)
        assert float(sigma.data) >= 0.0  # softplus output


def test_blend_color_single_view_returns_it():
    w = WeightStore(init_weights(0))
    rng = np.random.default_rng(3)
    c = rng.uniform(0, 1, 3).astype(np.float32)
    out = blend_color(
        rng.normal(size=64).astype(np.float32),
        [{"f_i": rng.normal(size=8).astype(np.float32), "c_i": c,
          "delta_d": rng.normal(size=4).astype(np.float32)}],
        w,
    )
    np.testing.assert_allclose(out.data, c, atol=1e-6)


def test_empty_inputs_rejected():
    w = WeightStore(init_weights(0))
    with pytest.raises(NetworkError):
        pool_features([], w)
    with pytest.raises(NetworkError):
        blend_color(np.zeros(64, np.float32), [], w)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    w = init_weights(7)
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, w)
    back = load_checkpoint(path)
    assert set(back) == set(w)
    for k in w:
        np.testing.assert_array_equal(back[k], w[k])
    # save -> load -> save is byte-identical
    save_checkpoint(tmp_path / "w2.ckpt", back)
    assert path.read_bytes() == (tmp_path / "w2.ckpt").read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(NetworkError, match="magic"):
        load_checkpoint(p)
