import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from src.ndtensor import (batchnorm, batchnorm_grad, batchnorm_params, conv2d, conv2d_grad, conv_params, grad_check,
                          layer_backward, layer_forward, leaky_relu, leaky_relu_grad, maxpool2, maxpool2_grad,
                          relative_error, upsample2, upsample2_grad)


def conv_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for q in range(wo):
                    for ci in range(c):
                        for a in range(k):
                            for bb in range(k):
                                out[i, o, r, q] += xp[i, ci, r * stride + a, q * stride + bb] * w[o, ci, a, bb]
                    out[i, o, r, q] += b[o]
    return out


def maxpool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    idx = np.zeros((n, c, h // 2, w // 2), dtype=int)
    for i in range(n):
        for ch in range(c):
            for r in range(h // 2):
                for q in range(w // 2):
                    best, where = -np.inf, -1
                    for a in range(2):
                        for b in range(2):
                            v = x[i, ch, 2 * r + a, 2 * q + b]
                            if v > best:
                                best, where = v, (2 * r + a) * w + 2 * q + b
                    out[i, ch, r, q], idx[i, ch, r, q] = best, where
    return out, idx


def test_conv_scaled_identity_kernel():
    out = conv2d(np.ones((1, 1, 3, 3)), conv_params([[[[2.0]]]], [0.0]))
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out == 2.0)


def test_conv_summation_case():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = conv2d(x, conv_params(np.ones((1, 1, 2, 2)), [0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 10.0


def test_conv_matches_loops(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(x, conv_params(w, b, stride=2, padding=1))
    np.testing.assert_allclose(out, conv_loops(x, w, b, 2, 1), rtol=1e-12, atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        conv2d(np.zeros((1, 2, 4, 4)), conv_params(np.zeros((1, 3, 3, 3)), [0.0]))


def test_conv_grad_zero_and_bias_identity(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    params = conv_params(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), padding=1)
    gx, gw, gb = conv2d_grad(x, params, np.zeros((2, 4, 6, 6)))
    assert not gx.any() and not gw.any() and not gb.any()

    g = rng.standard_normal((2, 4, 6, 6))
    _, _, gb = conv2d_grad(x, params, g)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_grad_finite_difference(rng, stride, padding):
    x = rng.standard_normal((2, 3, 7, 7))
    params = conv_params(rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2), stride, padding)
    g = rng.standard_normal(conv2d(x, params).shape)
    gx, gw, gb = conv2d_grad(x, params, g)
    err = grad_check(lambda: float((g * conv2d(x, params)).sum()), [(x, gx), (params.weights, gw), (params.bias, gb)])
    assert err < 1e-4


def test_grad_check_flags_corrupted_gradient(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    params = conv_params(rng.standard_normal((2, 2, 3, 3)), np.zeros(2))
    g = rng.standard_normal(conv2d(x, params).shape)
    _, gw, _ = conv2d_grad(x, params, g)
    err = grad_check(lambda: float((g * conv2d(x, params)).sum()), [(params.weights, gw * 1.1)])
    assert err > 1e-2


def test_grad_check_rejects_step_out_of_range():
    x = np.zeros(3)
    with pytest.raises(ValueError, match="step"):
        grad_check(lambda: float(x.sum()), [(x, np.ones(3))], eps=1e-2)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)


def test_maxpool_single_window():
    out, argmax = maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out[0, 0, 0, 0] == 4.0
    assert argmax[0, 0, 0, 0] == 3


def test_maxpool_ties_pick_first_element():
    out, argmax = maxpool2(np.full((1, 1, 4, 4), 7.0))
    assert np.all(out == 7.0)
    assert argmax[0, 0].tolist() == [[0, 2], [8, 10]]


@given(arrays(np.float64, (1, 2, 6, 6), elements=st.floats(-10, 10, allow_nan=False, allow_subnormal=False)))
def test_maxpool_matches_loops(x):
    out, argmax = maxpool2(x)
    ref, ref_idx = maxpool_loops(x)
    np.testing.assert_array_equal(out, ref)
    np.testing.assert_array_equal(argmax, ref_idx)


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ValueError, match="even"):
        maxpool2(np.zeros((1, 1, 3, 4)))


def test_maxpool_grad_routes_to_winner():
    _, argmax = maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    grad = maxpool2_grad(argmax, np.ones((1, 1, 1, 1)))
    assert grad[0, 0].tolist() == [[0.0, 0.0], [0.0, 1.0]]


def test_maxpool_grad_rejects_stale_argmax():
    _, argmax = maxpool2(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError):
        maxpool2_grad(argmax, np.ones((1, 1, 1, 1)))


def test_leaky_relu_values():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    np.testing.assert_allclose(leaky_relu(x, 0.01).ravel(), [-0.01, 0.0, 2.0])
    assert leaky_relu_grad(x, 0.01, np.ones_like(x)).ravel().tolist() == [0.01, 0.01, 1.0]


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ValueError, match="slope"):
        leaky_relu(np.zeros((1, 1, 1, 1)), 1.5)


def test_upsample_adjoint(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    g = rng.standard_normal((2, 3, 6, 8))
    assert np.sum(upsample2(x) * g) == pytest.approx(np.sum(x * upsample2_grad(g)), rel=1e-12)


def test_batchnorm_constant_input_gives_shift():
    params = batchnorm_params(2)
    params.bias[:] = [0.7, -0.3]
    out, _ = batchnorm(np.full((3, 2, 2, 2), 5.0), params, "train")
    np.testing.assert_allclose(out[:, 0], 0.7)
    np.testing.assert_allclose(out[:, 1], -0.3)


def test_batchnorm_updates_running_stats_with_unbiased_variance(rng):
    x = rng.standard_normal((4, 1, 2, 2)) * 3.0 + 1.0
    params = batchnorm_params(1, momentum=0.1)
    batchnorm(x, params, "train")
    assert params.running_mean[0] == pytest.approx(0.1 * x.mean())
    assert params.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_eval_uses_running_stats():
    params = batchnorm_params(1)
    params.running_mean[:] = 2.0
    params.running_var[:] = 4.0 - params.eps
    out, _ = batchnorm(np.full((1, 1, 1, 1), 6.0), params, "eval")
    assert out[0, 0, 0, 0] == pytest.approx(2.0)


def test_batchnorm_train_needs_two_samples():
    with pytest.raises(ValueError, match="at least 2"):
        batchnorm(np.zeros((1, 1, 2, 2)), batchnorm_params(1), "train")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_grad_finite_difference(rng, mode):
    x = rng.standard_normal((4, 2, 3, 3)) + 0.5
    params = batchnorm_params(2)
    params.weights[:] = rng.uniform(0.5, 1.5, 2)
    params.running_var = rng.uniform(0.5, 2.0, 2)
    stats = (params.running_mean.copy(), params.running_var.copy())
    out, cache = batchnorm(x, params, mode)
    g = rng.standard_normal(out.shape)
    gx, gs, gb = batchnorm_grad(cache, params, g)

    def f():
        params.running_mean, params.running_var = stats[0].copy(), stats[1].copy()
        return float((g * batchnorm(x, params, mode)[0]).sum())

    assert grad_check(f, [(x, gx), (params.weights, gs), (params.bias, gb)]) < 1e-4


def test_layer_backward_accumulates(rng):
    params = conv_params(rng.standard_normal((1, 1, 3, 3)), [0.0], padding=1)
    x = rng.standard_normal((1, 1, 4, 4))
    g = rng.standard_normal((1, 1, 4, 4))
    _, cache = layer_forward(params, x, "train")
    layer_backward(params, cache, g)
    once = params.grad_weights.copy()
    layer_backward(params, cache, g)
    np.testing.assert_allclose(params.grad_weights, 2 * once)
    params.zero_grad()
    assert not params.grad_weights.any()
