import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hipposurv import layers as L
from hipposurv.errors import NumericError, PreconditionError, ShapeError
from hipposurv.gradcheck import LAYERS, finite_difference_check


def conv_loops(x, w, b, pad):
    """Six nested loops over a single-sample (C, X, Y, Z) input."""
    C, X, Y, Z = x.shape
    O, _, kx, ky, kz = w.shape
    xp = np.zeros((C, X + 2 * pad, Y + 2 * pad, Z + 2 * pad))
    xp[:, pad : pad + X, pad : pad + Y, pad : pad + Z] = x
    ox, oy, oz = X + 2 * pad - kx + 1, Y + 2 * pad - ky + 1, Z + 2 * pad - kz + 1
    out = np.zeros((O, ox, oy, oz))
    for o in range(O):
        for i, j, k in itertools.product(range(ox), range(oy), range(oz)):
            acc = b[o]
            for c in range(C):
                for dx, dy, dz in itertools.product(range(kx), range(ky), range(kz)):
                    acc += w[o, c, dx, dy, dz] * xp[c, i + dx, j + dy, k + dz]
            out[o, i, j, k] = acc
    return out


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 5, 4, 6)).astype(np.float32)
    out = L.conv3d(x, np.ones((1, 1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(out, x)


def test_conv_constant_field():
    v = 1.5
    x = np.full((1, 1, 6, 6, 6), v, np.float32)
    out = L.conv3d(x, np.ones((1, 1, 3, 3, 3), np.float32), np.zeros(1, np.float32), padding=1)
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1, 1:-1], 27 * v, rtol=1e-6)
    assert out[0, 0, 0, 0, 0] == pytest.approx(8 * v)


def test_conv_matches_nested_loops(rng):
    x = rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    out = L.conv3d(x[:, None], w, b, padding=1)[:, 0]
    np.testing.assert_allclose(out, conv_loops(x, w, b, 1), rtol=1e-12, atol=1e-12)


def test_conv_stride_and_no_padding(rng):
    x = rng.standard_normal((2, 1, 7, 5, 6))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = np.zeros(2)
    full = conv_loops(x[:, 0], w, b, 0)
    strided = L.conv3d(x, w, b, padding=0, stride=2)[:, 0]
    np.testing.assert_allclose(strided, full[:, ::2, ::2, ::2], atol=1e-12)


def test_conv_linear_in_input(rng):
    x, y = rng.standard_normal((2, 2, 1, 5, 4, 6))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = np.zeros(3)
    lhs = L.conv3d(2.0 * x - 0.5 * y, w, b, padding=1)
    rhs = 2.0 * L.conv3d(x, w, b, padding=1) - 0.5 * L.conv3d(y, w, b, padding=1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-12)


def test_conv_errors(rng):
    x = rng.standard_normal((2, 1, 4, 4, 4))
    with pytest.raises(ShapeError):
        L.conv3d(x, rng.standard_normal((1, 3, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        L.conv3d(x, rng.standard_normal((1, 2, 5, 5, 5)), np.zeros(1))
    w = rng.standard_normal((1, 2, 3, 3, 3))
    w[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        L.conv3d(x, w, np.zeros(1))


def test_conv_backward_trivial(rng):
    x = rng.standard_normal((1, 2, 3, 3, 3))
    w = np.ones((1, 1, 1, 1, 1))
    out, cache = L.conv3d_forward(x, w, np.zeros(1))
    up = rng.standard_normal(out.shape)
    dx, dw, db = L.conv3d_backward(up, cache)
    np.testing.assert_array_equal(dx, up)
    dx, dw, db = L.conv3d_backward(np.zeros_like(out), cache)
    assert not dx.any() and not dw.any() and not db.any()
    with pytest.raises(ShapeError):
        L.conv3d_backward(np.zeros((1, 2, 3, 3, 2)), cache)


def test_maxpool_examples(rng):
    out, _ = L.maxpool3d(np.full((1, 1, 5, 4, 7), 3.0))
    assert out.shape == (1, 1, 2, 2, 3) and np.all(out == 3.0)
    out, _ = L.maxpool3d(np.zeros((1, 1, 29, 21, 55)))
    assert out.shape[2:] == (14, 10, 27)
    with pytest.raises(ShapeError):
        L.maxpool3d(np.zeros((1, 1, 1, 4, 4)))


def test_maxpool_matches_windows(rng):
    x = rng.standard_normal((1, 1, 4, 4, 4))
    out, _ = L.maxpool3d(x)
    for i, j, k in itertools.product(range(2), repeat=3):
        assert out[0, 0, i, j, k] == x[0, 0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2, 2 * k : 2 * k + 2].max()


def test_maxpool_tie_routes_to_first_in_scan_order():
    x = np.ones((1, 1, 2, 2, 2))
    out, arg = L.maxpool3d(x)
    dx = L.maxpool3d_backward(np.ones_like(out), arg, x.shape)
    # x-fastest scan: voxel (0, 0, 0) comes first
    assert dx[0, 0, 0, 0, 0] == 1.0 and dx.sum() == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 7), st.integers(2, 7), st.integers(2, 7))
def test_maxpool_bounded_by_input(seed, a, b, c):
    x = np.random.default_rng(seed).standard_normal((2, 1, a, b, c))
    out, _ = L.maxpool3d(x)
    assert out.max() <= x.max() and out.min() >= x.min()


def test_batch_norm_train_normalizes(rng):
    x = rng.standard_normal((3, 4, 3, 3, 3)) * 5 + 2
    state = L.BatchNormState.fresh(3)
    out = L.batch_norm(x, np.ones(3), np.zeros(3), state, "train")
    np.testing.assert_allclose(out.mean(axis=(1, 2, 3, 4)), 0, atol=1e-3)
    np.testing.assert_allclose(out.var(axis=(1, 2, 3, 4)), 1, atol=1e-3)


def test_batch_norm_affine_law(rng):
    x = rng.standard_normal((2, 5, 3, 3, 3))
    x = (x - x.mean(axis=(1, 2, 3, 4), keepdims=True)) / x.std(axis=(1, 2, 3, 4), keepdims=True)
    out = L.batch_norm(x, np.full(2, 2.0), np.full(2, 5.0), L.BatchNormState.fresh(2), "train")
    np.testing.assert_allclose(out.mean(axis=(1, 2, 3, 4)), 5, atol=1e-3)
    np.testing.assert_allclose(out.std(axis=(1, 2, 3, 4)), 2, atol=1e-3)


def test_batch_norm_infer_scalar_formula(rng):
    x = rng.standard_normal((2, 1, 2, 2, 2))
    mu, var = np.array([0.3, -1.0]), np.array([2.0, 0.5])
    gamma, beta = np.array([1.5, -0.7]), np.array([0.1, 2.0])
    state = L.BatchNormState(mu.copy(), var.copy())
    out = L.batch_norm(x, gamma, beta, state, "infer")
    for idx in itertools.product(*map(range, x.shape)):
        c = idx[0]
        expect = (x[idx] - mu[c]) / math.sqrt(var[c] + 1e-5) * gamma[c] + beta[c]
        assert out[idx] == pytest.approx(expect, rel=1e-12)
    np.testing.assert_array_equal(state.running_mean, mu)


def test_batch_norm_running_stats(rng):
    x = rng.standard_normal((1, 6, 2, 2, 2)) * 3 + 1
    state = L.BatchNormState.fresh(1)
    L.batch_norm(x, np.ones(1), np.zeros(1), state, "train")
    assert state.running_mean[0] == pytest.approx(0.1 * x.mean())
    with pytest.raises(PreconditionError):
        L.batch_norm(x[:, :1], np.ones(1), np.zeros(1), state, "train")


def test_small_layers(rng):
    np.testing.assert_array_equal(L.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.full((2, 3, 2, 3, 4), 1.25)
    np.testing.assert_array_equal(L.gap(x), np.full((3, 2), 1.25))
    y = rng.standard_normal((4, 2, 3, 5, 2))
    np.testing.assert_allclose(L.gap(y), y.reshape(4, 2, -1).mean(axis=2).T, rtol=1e-6)
    W, b, v = rng.standard_normal((2, 3)), rng.standard_normal(2), rng.standard_normal((1, 3))
    np.testing.assert_allclose(L.fully_connected(v, W, b), v @ W.T + b)
    with pytest.raises(ShapeError):
        L.fully_connected(v, rng.standard_normal((2, 4)), b)


def test_dropout_mean_preserved():
    x = np.ones(100_000)
    out, _ = L.dropout(x, 0.5, "train", np.random.default_rng(0))
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)) <= {0.0, 2.0}
    same, mask = L.dropout(x, 0.5, "infer")
    assert same is x or np.array_equal(same, x)
    with pytest.raises(PreconditionError):
        L.dropout(x, 1.0, "train", np.random.default_rng(0))


def test_softmax_cross_entropy_examples():
    loss, grad = L.softmax_cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(math.log(2))
    np.testing.assert_allclose(grad, [[-0.5, 0.5]])
    loss, _ = L.softmax_cross_entropy(np.array([[10.0, -10.0]]), np.array([0]))
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)
    with pytest.raises(PreconditionError):
        L.softmax_cross_entropy(np.zeros((1, 2)), np.array([2]))


def test_softmax_gradient_finite_difference(rng):
    logits = rng.standard_normal((3, 2))
    labels = np.array([0, 1, 1])
    _, grad = L.softmax_cross_entropy(logits, labels)
    h = 1e-6
    for idx in np.ndindex(*logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        num = (L.softmax_cross_entropy(up, labels)[0] - L.softmax_cross_entropy(dn, labels)[0]) / (2 * h)
        assert abs(num - grad[idx]) < 1e-6


@pytest.mark.parametrize("layer", LAYERS)
@pytest.mark.parametrize("seed", range(3))
def test_finite_differences(layer, seed):
    report = finite_difference_check(layer, seed=seed)
    assert report.passed, report.errors


def test_linear_layer_check_is_exact():
    assert finite_difference_check("fully_connected").max_rel_error < 1e-9
