"""Tests for windowed SSIM, perceptual fusion, and the structural loss."""

import numpy as np
import pytest

from cdpipe.numerics import ParamTensor, grad_check
from cdpipe.perceptual import (box_filter, box_filter_adjoint, fuse, ssim_loss,
                               ssim_loss_backward, ssim_loss_forward, ssim_map)

C1 = 0.01 ** 2
C2 = 0.03 ** 2


def ssim_window_oracle(pred, ref, window, c1, c2):
    """Naive per-window double loop with replicate padding."""
    m = window // 2
    p = np.pad(pred, m, mode="edge")
    r = np.pad(ref, m, mode="edge")
    h, w = pred.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            wp = p[i:i + window, j:j + window]
            wr = r[i:i + window, j:j + window]
            mu_p, mu_r = wp.mean(), wr.mean()
            var_p = (wp * wp).mean() - mu_p ** 2
            var_r = (wr * wr).mean() - mu_r ** 2
            cov = (wp * wr).mean() - mu_p * mu_r
            out[i, j] = ((2 * mu_p * mu_r + c1) * (2 * cov + c2)) \
                / ((mu_p ** 2 + mu_r ** 2 + c1) * (var_p + var_r + c2))
    return out


class TestSsimMap:
    def test_identical_inputs_give_one(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(size=(9, 9))
        out = ssim_map(a, a, 7, C1, C2)
        assert np.max(np.abs(out - 1.0)) <= 1e-9

    def test_constant_inputs_closed_form(self):
        a, b = 0.3, 0.7
        out = ssim_map(np.full((8, 8), a), np.full((8, 8), b), 5, C1, C2)
        expected = (2 * a * b + C1) / (a * a + b * b + C1)
        assert np.allclose(out, expected, atol=1e-12)

    def test_matches_window_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            pred = rng.uniform(size=(9, 9))
            ref = rng.uniform(size=(9, 9))
            got = ssim_map(pred, ref, 7, C1, C2)
            want = ssim_window_oracle(pred, ref, 7, C1, C2)
            assert np.max(np.abs(got - want)) <= 1e-10

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(8, 10))
        b = rng.uniform(size=(8, 10))
        assert np.max(np.abs(ssim_map(a, b) - ssim_map(b, a))) <= 1e-12

    def test_upper_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.uniform(size=(8, 8))
            b = rng.uniform(size=(8, 8))
            assert ssim_map(a, b, 7, C1, C2).max() <= 1.0 + 1e-9

    def test_even_window_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ssim_map(np.zeros((8, 8)), np.zeros((8, 8)), window=6)

    def test_oversized_window_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            ssim_map(np.zeros((5, 5)), np.zeros((5, 5)), window=7)

    def test_nonpositive_stabilizers_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            ssim_map(np.zeros((8, 8)), np.zeros((8, 8)), 5, 0.0, C2)


class TestBoxFilter:
    def test_constant_preserved(self):
        assert np.allclose(box_filter(np.full((6, 7), 0.4), 5), 0.4)

    def test_adjoint_identity(self):
        # <box(x), g> == <x, adjoint(g)> defines the transpose
        rng = np.random.default_rng(4)
        x = rng.normal(size=(7, 6))
        g = rng.normal(size=(7, 6))
        lhs = float((box_filter(x, 5) * g).sum())
        rhs = float((x * box_filter_adjoint(g, 5)).sum())
        assert abs(lhs - rhs) <= 1e-12


class TestFuse:
    def test_lambda_one_is_identity(self):
        rng = np.random.default_rng(5)
        probs = rng.uniform(size=(4, 4, 3))
        probs /= probs.sum(axis=-1, keepdims=True)
        ssim = rng.uniform(-0.5, 1.0, size=(4, 4, 3))
        assert np.max(np.abs(fuse(probs, ssim, 1.0) - probs)) <= 1e-12

    def test_lambda_zero_proportional_to_dissimilarity(self):
        probs = np.full((2, 2, 2), 0.5)
        ssim = np.zeros((2, 2, 2))
        ssim[..., 0] = 0.5   # 1 - ssim = (0.5, 1.0) -> normalized (1/3, 2/3)
        out = fuse(probs, ssim, 0.0)
        assert np.allclose(out[..., 0], 1.0 / 3.0)
        assert np.allclose(out[..., 1], 2.0 / 3.0)

    def test_hand_case(self):
        probs = np.array([[[0.8, 0.2]]])
        ssim = np.full((1, 1, 2), 0.6)
        out = fuse(probs, ssim, 0.5)
        # pre-normalization (0.6, 0.3) -> (2/3, 1/3)
        assert np.allclose(out, [[[2.0 / 3.0, 1.0 / 3.0]]], atol=1e-12)

    def test_simplex_invariant_random(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            probs = rng.uniform(size=(5, 5, 4))
            probs /= probs.sum(axis=-1, keepdims=True)
            ssim = rng.uniform(-1.0, 1.0, size=(5, 5, 4))
            out = fuse(probs, ssim, float(rng.uniform(0, 1)))
            assert (out >= 0.0).all()
            assert np.max(np.abs(out.sum(axis=-1) - 1.0)) <= 1e-9

    def test_uniform_fallback_when_channels_vanish(self):
        probs = np.zeros((1, 1, 4))
        probs[0, 0, 0] = 1.0
        ssim = np.ones((1, 1, 4))     # 1 - ssim = 0
        out = fuse(probs, ssim, 0.0)  # raw = all zeros
        assert np.allclose(out, 0.25)

    def test_lambda_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="lam"):
            fuse(np.zeros((1, 1, 2)), np.zeros((1, 1, 2)), 1.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            fuse(np.zeros((2, 2, 3)), np.zeros((2, 2, 2)), 0.5)


class TestSsimLoss:
    def test_identical_channels_zero(self):
        rng = np.random.default_rng(7)
        probs = rng.uniform(size=(8, 8, 4))
        assert ssim_loss(probs, probs.copy()) <= 1e-9

    def test_constant_closed_form(self):
        a, b = 0.2, 0.9
        probs = np.full((8, 8, 1), a)
        refs = np.full((8, 8, 1), b)
        expected = 1.0 - (2 * a * b + C1) / (a * a + b * b + C1)
        assert ssim_loss(probs, refs, 5, C1, C2) == pytest.approx(expected, abs=1e-12)

    def test_range_bound(self):
        rng = np.random.default_rng(8)
        n_channels = 4
        for _ in range(10):
            probs = rng.uniform(size=(8, 8, n_channels))
            refs = rng.uniform(size=(8, 8, n_channels))
            val = ssim_loss(probs, refs)
            assert 0.0 <= val <= 2.0 * n_channels

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        probs = ParamTensor(rng.uniform(size=(7, 7, 2)))
        refs = rng.uniform(size=(7, 7, 2))

        def f():
            probs.zero_grad()
            val, caches = ssim_loss_forward(probs.value, refs, 5, C1, C2)
            probs.grad += ssim_loss_backward(caches, probs.value.shape)
            return val

        assert grad_check(f, [probs], eps=1e-6) <= 1e-6
