"""Gradient and op-semantics tests for the autodiff core.

Every op is checked against float64 central finite differences; convolution
and sampling additionally against naive loop oracles written independently of
the library implementation.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enerf import autodiff as ad
from enerf.autodiff.gradcheck import analytic_grad, max_rel_error, numeric_grad

SEEDS = [0, 1, 2, 3, 4]
TOL = 1e-4


def check(fn, inputs, tol=TOL):
    for i in range(len(inputs)):
        err = max_rel_error(fn, inputs, i)
        assert err < tol, f"input {i}: rel err {err:.2e}"


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_grads(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0  # keep denominators away from zero
    w = rng.normal(size=(3, 4))

    def wsum(t):
        return ad.tsum(t * ad.Tensor(w))

    check(lambda x, y: wsum(x + y), [a, b])
    check(lambda x, y: wsum(x - y), [a, b])
    check(lambda x, y: wsum(x * y), [a, b])
    check(lambda x, y: wsum(x / y), [a, b])
    check(lambda x: wsum(-x), [a])
    check(lambda x: wsum(ad.exp(x)), [a])
    check(lambda x: wsum(ad.log(x)), [np.abs(a) + 0.5])
    check(lambda x: wsum(ad.sqrt(x)), [np.abs(a) + 0.5])
    check(lambda x: wsum(ad.square(x)), [a])
    check(lambda x: wsum(ad.pow_scalar(x, 3)), [a])
    check(lambda x: wsum(ad.softplus(x)), [a])
    check(lambda x: wsum(ad.sigmoid(x)), [a])
    # kink ops: keep evaluation away from the non-differentiable point
    far = np.where(np.abs(a) < 0.05, a + 0.2, a)
    check(lambda x: wsum(ad.relu(x)), [far])
    check(lambda x: wsum(ad.clip_min(x, 0.0)), [far])


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcast_grads(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    c = rng.normal(size=(3, 1))
    w = rng.normal(size=(3, 4))
    check(lambda x, y: ad.tsum((x + y) * ad.Tensor(w)), [a, b])
    check(lambda x, y: ad.tsum((x * y) * ad.Tensor(w)), [a, c])


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_reduction_shape_grads(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    check(lambda x, y: ad.tsum(ad.matmul(x, y) * ad.Tensor(w)), [a, b])
    check(lambda x: ad.tsum(x, axis=0).sum(), [a])
    check(lambda x: ad.tmean(x, axis=1).sum(), [a])
    w26 = rng.normal(size=(2, 6))
    w43 = rng.normal(size=(4, 3))
    w22 = rng.normal(size=(2, 2))
    w54 = rng.normal(size=(5, 4))
    idx = rng.integers(0, 3, size=5)
    check(lambda x: ad.tsum(ad.reshape(x, (2, 6)) * ad.Tensor(w26)), [a])
    check(lambda x: ad.tsum(ad.transpose(x) * ad.Tensor(w43)), [a])
    check(lambda x: ad.tsum(x[1:, ::2] * ad.Tensor(w22)), [a])
    check(lambda x: ad.tsum(x[idx] * ad.Tensor(w54)), [a])


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_stack_where_grads(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3))
    w6 = rng.normal(size=(2, 6))
    w2 = rng.normal(size=(2, 2, 3))
    mask = rng.random((2, 3)) > 0.5
    check(lambda x, y: ad.tsum(ad.concat([x, y], axis=1) * ad.Tensor(w6)), [a, b])
    check(lambda x, y: ad.tsum(ad.stack([x, y], axis=0) * ad.Tensor(w2)), [a, b])
    check(lambda x, y: ad.tsum(ad.where(mask, x, y) * ad.Tensor(a)), [a, b])


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_closed_form():
    # logits (0, ln 3) -> probabilities (0.25, 0.75)
    out = ad.softmax_axis(ad.Tensor(np.array([0.0, np.log(3.0)])), 0)
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5))
    p1 = ad.softmax_axis(ad.Tensor(x), 1).data
    p2 = ad.softmax_axis(ad.Tensor(x + 100.0), 1).data
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    np.testing.assert_allclose(p1.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_grad(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    check(lambda t: ad.tsum(ad.softmax_axis(t, 1) * ad.Tensor(w)), [x])


# ---------------------------------------------------------------------------
# convolution: naive loop oracle
# ---------------------------------------------------------------------------

def naive_conv2d(x, w, b, stride, pad):
    c_out, c_in, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[1] + 2 * pad - kh) // stride + 1
    ow = (x.shape[2] + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_naive(stride, pad):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(got.data, naive_conv2d(x, w, b, stride, pad), atol=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_grads(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=2)
    wgt = rng.normal(size=(2, 3, 3))
    check(
        lambda a, k, c: ad.tsum(ad.conv2d(a, k, c, stride=2, padding=1) * ad.Tensor(wgt)),
        [x, w, b],
    )


@pytest.mark.parametrize("seed", SEEDS)
def test_conv3d_grads(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 3))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    b = rng.normal(size=2)
    wgt = rng.normal(size=(2, 3, 4, 3))
    check(
        lambda a, k, c: ad.tsum(ad.conv3d(a, k, c, stride=1, padding=1) * ad.Tensor(wgt)),
        [x, w, b],
    )


def test_conv2d_transposed_doubles_resolution():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4, 5)).astype(np.float32)
    w = rng.normal(size=(3, 2, 2, 2)).astype(np.float32)
    out = ad.conv2d_transposed(ad.Tensor(x), ad.Tensor(w), stride=2)
    assert out.shape == (2, 8, 10)


def test_conv_transposed_is_adjoint():
    # <conv(x), y> == <x, conv_T(y)> for the matching weight layouts
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3, 3, 3))  # conv: 3 -> 4 channels
    x = rng.normal(size=(3, 9, 9))
    y = rng.normal(size=(4, 4, 4))
    cx = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=2)
    # the same array is the transposed-conv weight [C_in=4, C_out=3, k, k]
    ty = ad.conv2d_transposed(ad.Tensor(y), ad.Tensor(w), stride=2)
    lhs = float((cx.data * y).sum())
    rhs = float((x * ty.data).sum())
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transposed_grads(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 3))
    w = rng.normal(size=(2, 2, 2, 2))
    b = rng.normal(size=2)
    wgt = rng.normal(size=(2, 6, 6))
    check(
        lambda a, k, c: ad.tsum(ad.conv2d_transposed(a, k, c, stride=2) * ad.Tensor(wgt)),
        [x, w, b],
    )
    x3 = rng.normal(size=(2, 2, 2, 2))
    w3 = rng.normal(size=(2, 2, 2, 2, 2))
    wgt3 = rng.normal(size=(2, 4, 4, 4))
    check(
        lambda a, k: ad.tsum(ad.conv3d_transposed(a, k, stride=2) * ad.Tensor(wgt3)),
        [x3, w3],
    )


def test_conv_shape_errors():
    x = ad.Tensor(np.zeros((2, 5, 5)))
    with pytest.raises(ValueError, match="channels"):
        ad.conv2d(x, ad.Tensor(np.zeros((3, 4, 3, 3))))
    with pytest.raises(ValueError, match="even kernel"):
        ad.conv2d(x, ad.Tensor(np.zeros((3, 2, 2, 2))))
    with pytest.raises(ValueError, match="too small"):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 2))), ad.Tensor(np.zeros((1, 1, 5, 5))))


# ---------------------------------------------------------------------------
# grid sampling: closed-form bilinear oracle
# ---------------------------------------------------------------------------

def test_grid_sample_2d_bilinear_oracle():
    f = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
    # at (u=1.5, v=0.5): average of f[0, 0:2, 1:3]
    out = ad.grid_sample_2d(ad.Tensor(f), ad.Tensor(np.array([[1.5, 0.5]])))
    assert abs(out.data[0, 0] - f[0, 0:2, 1:3].mean()) < 1e-12
    # integer coords hit grid values exactly
    out = ad.grid_sample_2d(ad.Tensor(f), ad.Tensor(np.array([[2.0, 1.0]])))
    assert abs(out.data[0, 0] - f[0, 1, 2]) < 1e-12


def test_grid_sample_2d_out_of_bounds():
    f = np.ones((2, 3, 3))
    out, valid = ad.grid_sample_2d(
        ad.Tensor(f), ad.Tensor(np.array([[-1.0, 0.0], [1.0, 1.0], [2.5, 1.0]])),
        return_valid=True,
    )
    assert list(valid) == [False, True, False]
    np.testing.assert_allclose(out.data[0], 0.0)  # fully outside contributes zero


def test_grid_sample_3d_trilinear_oracle():
    f = np.arange(24, dtype=np.float64).reshape(1, 2, 3, 4)
    out = ad.grid_sample_3d(ad.Tensor(f), ad.Tensor(np.array([[1.5, 0.5, 0.5]])))
    assert abs(out.data[0, 0] - f[0, :, 0:2, 1:3].mean()) < 1e-12


@pytest.mark.parametrize("seed", SEEDS)
def test_grid_sample_grads(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(2, 4, 5))
    # keep coords off integer lattice points (bilinear kinks)
    uv = rng.uniform(0.2, 2.8, size=(6, 2)) + 0.31
    w = rng.normal(size=(6, 2))
    check(
        lambda a, c: ad.tsum(ad.grid_sample_2d(a, c) * ad.Tensor(w)), [f, uv]
    )
    f3 = rng.normal(size=(2, 3, 3, 3))
    xyz = rng.uniform(0.2, 1.8, size=(5, 3)) + 0.13
    w3 = rng.normal(size=(5, 2))
    check(
        lambda a, c: ad.tsum(ad.grid_sample_3d(a, c) * ad.Tensor(w3)), [f3, xyz]
    )


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_first_step_oracle():
    # bias correction makes step 1 equal lr * g / (|g| + eps) ~= lr * sign(g)
    p = {"w": np.array([1.0, -2.0, 3.0], dtype=np.float32)}
    g = {"w": np.array([0.5, -0.1, 2.0], dtype=np.float32)}
    state = ad.AdamState()
    ad.adam_step(p, g, state, lr=0.1, t=1)
    expect = np.array([1.0, -2.0, 3.0]) - 0.1 * np.sign([0.5, -0.1, 2.0])
    np.testing.assert_allclose(p["w"], expect, atol=1e-6)


def test_adam_two_steps_match_reference():
    # independent float64 reference of the update recurrences
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=4)
    g1, g2 = rng.normal(size=4), rng.normal(size=4)
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    m = (1 - b1) * g1
    v = (1 - b2) * g1 ** 2
    w_ref = w0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2 ** 2
    w_ref = w_ref - lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)

    p = {"w": w0.copy()}
    state = ad.AdamState()
    ad.adam_step(p, {"w": g1}, state, lr=lr, t=1)
    ad.adam_step(p, {"w": g2}, state, lr=lr, t=2)
    np.testing.assert_allclose(p["w"], w_ref, atol=1e-12)


def test_adam_rejects_bad_shapes_and_t():
    p = {"w": np.zeros(3)}
    with pytest.raises(ValueError, match="shape"):
        ad.adam_step(p, {"w": np.zeros(4)}, ad.AdamState(), lr=0.1, t=1)
    with pytest.raises(ValueError, match="t must be"):
        ad.adam_step(p, {"w": np.zeros(3)}, ad.AdamState(), lr=0.1, t=0)


# ---------------------------------------------------------------------------
# tape mechanics
# ---------------------------------------------------------------------------

def test_no_tape_means_no_tracking():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.exp(x)
    assert not y.requires_grad  # outside record(), ops are eager-only


def test_unreachable_leaf_gets_zero_grad():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    z = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.record() as g:
        _ = ad.exp(z)  # recorded but not part of the loss
        loss = ad.tsum(ad.square(x))
    grads = ad.backward(g, loss)
    np.testing.assert_allclose(grads[x], 2.0 * np.ones(3))
    np.testing.assert_allclose(grads[z], 0.0)


def test_backward_rejects_vector_loss():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.record() as g:
        y = ad.exp(x)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(g, y)


def test_grad_accumulates_over_reuse():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    with ad.record() as g:
        loss = ad.tsum(x * x + x)
    grads = ad.backward(g, loss)
    np.testing.assert_allclose(grads[x], [5.0])  # 2x + 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 5), st.integers(1, 5))
def test_sum_of_parts_equals_whole(seed, h, w):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(h, w))
    t = ad.Tensor(x)
    assert abs(float(ad.tsum(t).data) - x.sum()) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_chain_rule_composition(seed):
    # d/dx sum(exp(2x)) == 2 exp(2x)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=4)
    g = analytic_grad(lambda t: ad.tsum(ad.exp(t * 2.0)), [x], 0)
    np.testing.assert_allclose(g, 2.0 * np.exp(2.0 * x), rtol=1e-10)
