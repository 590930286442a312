"""Tests for the dense-grid substrate: conv2d, softmax, pooling, grad_check."""

import numpy as np
import pytest

from cdpipe.errors import NumericError
from cdpipe.numerics import (ParamTensor, avg_pool, conv2d, conv2d_backward,
                             glorot_uniform, grad_check, leaky_relu,
                             leaky_relu_backward, softmax, softmax_backward,
                             upsample_nearest)


def conv_oracle(x, kernel, bias, padding):
    """Direct nested-loop cross-correlation, the independent reference."""
    kh, kw, cin, cout = kernel.shape
    if padding == "same":
        x = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    h = x.shape[0] - kh + 1
    w = x.shape[1] - kw + 1
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                acc = 0.0
                for u in range(kh):
                    for v in range(kw):
                        for c in range(cin):
                            acc += x[i + u, j + v, c] * kernel[u, v, c, o]
                out[i, j, o] = acc + (bias[o] if bias is not None else 0.0)
    return out


class TestConv2d:
    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 4, 3))
        kernel = np.eye(3).reshape(1, 1, 3, 3)
        out = conv2d(x, kernel, np.zeros(3))
        assert np.max(np.abs(out - x)) <= 1e-12

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(1).normal(size=(4, 4, 2))
        kernel = np.zeros((3, 3, 2, 5))
        bias = np.arange(5.0)
        out = conv2d(x, kernel, bias)
        assert np.allclose(out, np.broadcast_to(bias, (4, 4, 5)))

    @pytest.mark.parametrize("padding", ["same", "none"])
    def test_matches_nested_loop_oracle(self, padding):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 5, 1))
        kernel = rng.normal(size=(3, 3, 1, 2))
        bias = rng.normal(size=2)
        got = conv2d(x, kernel, bias, padding=padding)
        want = conv_oracle(x, kernel, bias, padding)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_same_padding_preserves_spatial_size(self):
        x = np.zeros((7, 9, 2))
        kernel = np.zeros((3, 3, 2, 4))
        assert conv2d(x, kernel).shape == (7, 9, 4)

    def test_linear_in_input_and_kernel(self):
        rng = np.random.default_rng(3)
        x1, x2 = rng.normal(size=(2, 4, 4, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        lhs = conv2d(x1 + 2.0 * x2, k)
        rhs = conv2d(x1, k) + 2.0 * conv2d(x2, k)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(4, 4, 2\).*\(3, 3, 3, 1\)"):
            conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            conv2d(np.zeros((4, 4, 1)), np.zeros((2, 2, 1, 1)))

    @pytest.mark.parametrize("seed", range(3))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 5, 2))
        kernel = ParamTensor(rng.normal(size=(3, 3, 2, 3)))
        bias = ParamTensor(rng.normal(size=3))
        target = rng.normal(size=(5, 5, 3))

        def f():
            kernel.zero_grad()
            bias.zero_grad()
            y = conv2d(x, kernel.value, bias.value)
            d = 2.0 * (y - target)
            _, dk, db = conv2d_backward(d, x, kernel.value)
            kernel.grad += dk
            bias.grad += db
            return float(((y - target) ** 2).sum())

        assert grad_check(f, [kernel, bias], eps=1e-5) <= 1e-8

    def test_backward_input_gradient(self):
        rng = np.random.default_rng(9)
        x = ParamTensor(rng.normal(size=(4, 4, 2)))
        kernel = rng.normal(size=(3, 3, 2, 2))

        def f():
            x.zero_grad()
            y = conv2d(x.value, kernel)
            dx, _, _ = conv2d_backward(np.ones_like(y), x.value, kernel)
            x.grad += dx
            return float(y.sum())

        assert grad_check(f, [x], eps=1e-5) <= 1e-8


class TestSoftmax:
    def test_uniform_logits(self):
        out = softmax(np.zeros((2, 2, 4)))
        assert np.allclose(out, 0.25)

    def test_known_values(self):
        # direct exponentiation of (1, 2, 3)
        out = softmax(np.array([1.0, 2.0, 3.0]))
        assert np.allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-5)

    def test_large_shift_no_overflow(self):
        x = np.array([0.0, 1000.0])
        out = softmax(x)
        assert np.isfinite(out).all()
        assert out[1] > 1.0 - 1e-9

    def test_slices_sum_to_one(self):
        rng = np.random.default_rng(4)
        x = rng.normal(scale=10.0, size=(6, 5, 7))
        out = softmax(x)
        assert np.max(np.abs(out.sum(axis=-1) - 1.0)) <= 1e-9
        assert (out >= 0).all()

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 8))
        shifted = x + rng.normal(size=(3, 1))
        assert np.max(np.abs(softmax(x) - softmax(shifted))) <= 1e-9

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError, match="finite"):
            softmax(np.array([1.0, np.nan]))

    @pytest.mark.parametrize("seed", range(3))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = ParamTensor(rng.normal(size=(4, 5)))
        w = rng.normal(size=(4, 5))

        def f():
            x.zero_grad()
            y = softmax(x.value)
            x.grad += softmax_backward(w * 2.0 * y, y)  # d sum(w y^2)
            return float((w * y * y).sum())

        assert grad_check(f, [x], eps=1e-6) <= 1e-7


class TestAvgPool:
    def test_factor_one_is_identity(self):
        x = np.random.default_rng(6).normal(size=(4, 6, 2))
        assert np.array_equal(avg_pool(x, 1), x)

    def test_hand_mean(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        assert avg_pool(x, 2)[0, 0, 0] == pytest.approx(2.5)

    def test_constant_grid(self):
        x = np.full((8, 8, 3), 0.7)
        assert np.allclose(avg_pool(x, 4), 0.7)

    def test_replicate_padding_on_nondivisible(self):
        x = np.arange(6.0).reshape(3, 2, 1)
        out = avg_pool(x, 2)
        assert out.shape == (2, 1, 1)
        # bottom block replicates the last row [4, 5]
        assert out[1, 0, 0] == pytest.approx((4 + 5 + 4 + 5) / 4)

    def test_factor_larger_than_grid_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            avg_pool(np.zeros((4, 4, 1)), 5)

    def test_pool_then_upsample_preserves_mean(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(8, 12, 3))
        up = upsample_nearest(avg_pool(x, 4), 4)
        assert abs(up.mean() - x.mean()) <= 1e-12


class TestLeakyRelu:
    def test_values(self):
        x = np.array([-2.0, 0.0, 3.0])
        assert np.allclose(leaky_relu(x), [-0.02, 0.0, 3.0])

    def test_backward(self):
        x = np.array([-1.0, 2.0])
        g = leaky_relu_backward(np.ones(2), x)
        assert np.allclose(g, [0.01, 1.0])


class TestGradCheck:
    def test_quadratic(self):
        w = ParamTensor(np.array([3.0]))

        def f():
            w.zero_grad()
            w.grad += 2.0 * w.value
            return float(w.value[0] ** 2)

        assert grad_check(f, [w], eps=1e-5) <= 1e-8

    def test_corrupted_gradient_detected(self):
        w = ParamTensor(np.array([3.0]))

        def f():
            w.zero_grad()
            w.grad += 2.0 * w.value * 1.01  # deliberately wrong by 1%
            return float(w.value[0] ** 2)

        assert grad_check(f, [w], eps=1e-5) >= 1e-3

    def test_restores_analytic_gradients(self):
        w = ParamTensor(np.array([2.0]))

        def f():
            w.zero_grad()
            w.grad += 2.0 * w.value
            return float(w.value[0] ** 2)

        grad_check(f, [w], eps=1e-5)
        assert w.grad[0] == pytest.approx(4.0)


class TestGlorot:
    def test_kernel_fans_include_area(self):
        rng = np.random.default_rng(8)
        bound = np.sqrt(6.0 / (27 + 72))
        samples = np.concatenate([
            glorot_uniform(np.random.default_rng(s), (3, 3, 3, 8)).ravel()
            for s in range(50)
        ])
        assert samples.size >= 10_000
        assert np.abs(samples).max() <= bound
        expected_std = bound / np.sqrt(3.0)
        assert abs(samples.std() - expected_std) / expected_std <= 0.10


def test_flatten_round_trip_convention():
    # row major: y first, then x, then channel
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 4, 2))
    flat = x.reshape(3 * 4, 2)
    assert np.array_equal(flat.reshape(3, 4, 2), x)
    assert flat[1 * 4 + 2, 1] == x[1, 2, 1]
