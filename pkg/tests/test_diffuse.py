"""Tests for the noise schedule, noising/denoising algebra, context building,
and hierarchical cross-attention."""

import numpy as np
import pytest

from cdpipe.diffuse import (SCALES, NoiseSchedule, attention,
                            build_contexts, forward_noise,
                            hierarchical_attention,
                            hierarchical_attention_backward,
                            hierarchical_attention_forward,
                            init_attention_params, initial_difference,
                            make_schedule, reverse_step, sample)
from cdpipe.numerics import grad_check, softmax


class TestSchedule:
    def test_hand_product(self):
        s = make_schedule(2, 0.1, 0.2)
        assert np.allclose(s.alpha, [0.9, 0.8])
        assert abs(s.alpha_bar[0] - 0.9) <= 1e-12
        assert abs(s.alpha_bar[1] - 0.72) <= 1e-12

    def test_constant_schedule(self):
        s = make_schedule(5, 0.01, 0.01)
        assert np.allclose(s.beta, 0.01)

    def test_single_step(self):
        s = make_schedule(1, 0.05, 0.3)
        assert s.T == 1
        assert np.array_equal(s.alpha_bar, s.alpha)

    def test_alpha_bar_monotone_and_in_unit_interval(self):
        s = make_schedule(50, 1e-4, 0.02)
        assert (np.diff(s.alpha_bar) <= 0).all()
        assert 0.0 < s.alpha_bar[-1] < 1.0
        assert np.max(np.abs(s.alpha_bar - np.cumprod(s.alpha))) <= 1e-12

    @pytest.mark.parametrize("bad", [(0, 0.1, 0.2), (3, 0.0, 0.2),
                                     (3, 0.3, 0.2), (3, 0.5, 1.0)])
    def test_invalid_ranges_rejected(self, bad):
        with pytest.raises(ValueError):
            make_schedule(*bad)


class TestInitialDifference:
    def test_identical_inputs(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(4, 4, 3))
        mask = (rng.random((4, 4)) > 0.5).astype(float)
        assert initial_difference(img, img, mask, mask).max() == 0.0

    def test_zero_masks_zero_everything(self):
        rng = np.random.default_rng(1)
        i1 = rng.uniform(size=(4, 4, 3))
        i2 = rng.uniform(size=(4, 4, 3))
        z = np.zeros((4, 4))
        assert initial_difference(i1, i2, z, z).max() == 0.0

    def test_masked_region_value(self):
        i1 = np.ones((3, 3, 3))
        i2 = np.zeros((3, 3, 3))
        m1 = np.zeros((3, 3))
        m1[1, 1] = 1.0
        out = initial_difference(i1, i2, m1, np.zeros((3, 3)))
        assert np.allclose(out[1, 1], 1.0)
        out[1, 1] = 0.0
        assert out.max() == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            initial_difference(np.zeros((3, 3, 3)), np.zeros((4, 4, 3)),
                               np.zeros((3, 3)), np.zeros((4, 4)))


class TestForwardNoise:
    def test_zero_noise_scales_by_sqrt_alpha_bar(self):
        s = make_schedule(4, 0.1, 0.2)
        x0 = np.full((2, 2, 3), 2.0)
        out = forward_noise(x0, 3, s, np.zeros_like(x0))
        assert np.allclose(out, np.sqrt(s.alpha_bar[2]) * 2.0)

    def test_additive_mode_zero_noise_is_identity(self):
        s = make_schedule(4, 0.1, 0.2)
        x0 = np.random.default_rng(2).normal(size=(2, 2, 3))
        assert np.array_equal(forward_noise(x0, 4, s, np.zeros_like(x0),
                                            mode="additive"), x0)

    def test_step_out_of_range(self):
        s = make_schedule(3, 0.1, 0.2)
        with pytest.raises(ValueError, match="outside"):
            forward_noise(np.zeros((2, 2, 3)), 4, s, np.zeros((2, 2, 3)))

    def test_monte_carlo_moments(self):
        s = make_schedule(10, 1e-3, 0.1)
        t = 7
        x0 = 0.8
        rng = np.random.default_rng(3)
        draws = rng.standard_normal(100_000)
        samples = np.sqrt(s.alpha_bar[t - 1]) * x0 \
            + np.sqrt(1.0 - s.alpha_bar[t - 1]) * draws
        expected_mean = np.sqrt(s.alpha_bar[t - 1]) * x0
        expected_var = 1.0 - s.alpha_bar[t - 1]
        se = np.sqrt(expected_var / draws.size)
        assert abs(samples.mean() - expected_mean) <= 3 * se
        assert abs(samples.var() - expected_var) / expected_var <= 0.02


def attention_oracle(q, k, v):
    """Two-loop reference: explicit row softmax then weighted sum."""
    n, d_k = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        scores = np.array([q[i] @ k[j] / np.sqrt(d_k) for j in range(k.shape[0])])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        for j in range(k.shape[0]):
            out[i] += w[j] * v[j]
    return out


class TestAttention:
    def test_single_key_returns_value_row(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(5, 3))
        k = rng.normal(size=(1, 3))
        v = rng.normal(size=(1, 4))
        out = attention(q, k, v)
        assert np.allclose(out, np.broadcast_to(v, (5, 4)))

    def test_equal_scores_average_values(self):
        q = np.zeros((2, 3))
        k = np.random.default_rng(5).normal(size=(2, 3))
        v = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = attention(q, k, v)
        assert np.allclose(out, 0.5)

    def test_matches_two_loop_oracle(self):
        rng = np.random.default_rng(6)
        q = rng.normal(size=(4, 3))
        k = rng.normal(size=(5, 3))
        v = rng.normal(size=(5, 2))
        assert np.max(np.abs(attention(q, k, v) - attention_oracle(q, k, v))) <= 1e-12

    def test_rows_in_convex_hull_of_values(self):
        rng = np.random.default_rng(7)
        q = rng.normal(scale=3.0, size=(10, 4))
        k = rng.normal(size=(6, 4))
        v = rng.normal(size=(6, 3))
        out = attention(q, k, v)
        assert (out <= v.max(axis=0) + 1e-12).all()
        assert (out >= v.min(axis=0) - 1e-12).all()

    def test_zero_query_dim_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            attention(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((2, 2)))


class TestBuildContexts:
    def test_zero_inputs_zero_contexts(self):
        img = np.random.default_rng(8).uniform(size=(8, 8, 3))
        z = np.zeros((8, 8))
        ctx = build_contexts(img, img, z, z, 4)
        assert all(np.abs(ctx[s]).max() == 0.0 for s in SCALES)

    def test_row_counts(self):
        rng = np.random.default_rng(9)
        i1 = rng.uniform(size=(8, 8, 3))
        i2 = rng.uniform(size=(8, 8, 3))
        m = np.ones((8, 8))
        ctx = build_contexts(i1, i2, m, m, 4)
        assert ctx["obj1"].shape == (64, 6)
        assert ctx["obj2"].shape == (16, 6)
        assert ctx["glob"].shape == (4, 6)

    def test_single_masked_pixel(self):
        i1 = np.ones((4, 4, 3))
        i2 = np.ones((4, 4, 3))
        m1 = np.zeros((4, 4))
        m1[1, 2] = 1.0
        ctx = build_contexts(i1, i2, m1, np.zeros((4, 4)), 2)
        rows = np.nonzero(np.abs(ctx["obj1"]).sum(axis=1))[0]
        assert list(rows) == [1 * 4 + 2]
        # the 2x pool spreads value/4 into exactly one coarse row
        rows2 = np.nonzero(np.abs(ctx["obj2"]).sum(axis=1))[0]
        assert list(rows2) == [0 * 2 + 1]
        assert ctx["obj2"][rows2[0], 0] == pytest.approx(0.25)

    def test_glob_channels_zero_padded(self):
        rng = np.random.default_rng(10)
        i1 = rng.uniform(size=(8, 8, 3))
        i2 = rng.uniform(size=(8, 8, 3))
        m = np.ones((8, 8))
        ctx = build_contexts(i1, i2, m, m, 2)
        assert np.abs(ctx["glob"][:, 3:]).max() == 0.0
        assert np.abs(ctx["glob"][:, :3]).max() > 0.0

    def test_oversized_pool_factor_rejected(self):
        img = np.zeros((4, 4, 3))
        with pytest.raises(ValueError, match="exceeds"):
            build_contexts(img, img, np.zeros((4, 4)), np.zeros((4, 4)), 5)


def hierarchical_oracle(x, contexts, params):
    """Flat single-function reference implementation."""
    h, w, c = x.shape
    q = x.reshape(h * w, c) @ params.w_q.value
    outs = []
    for s in SCALES:
        f = contexts[s]
        k = f @ params.w_k[s].value
        v = f @ params.w_v[s].value
        scores = q @ k.T / np.sqrt(q.shape[1])
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        outs.append(weights @ v)
    return (np.hstack(outs) @ params.w_o.value).reshape(h, w, c)


def _random_scene_contexts(rng, h, w, pool):
    i1 = rng.uniform(size=(h, w, 3))
    i2 = rng.uniform(size=(h, w, 3))
    m1 = (rng.random((h, w)) > 0.5).astype(float)
    m2 = (rng.random((h, w)) > 0.5).astype(float)
    return build_contexts(i1, i2, m1, m2, pool)


class TestHierarchicalAttention:
    def test_zero_output_projection_gives_zero_term(self):
        rng = np.random.default_rng(11)
        params = init_attention_params(0, d_k=4, d_v=4)
        params.w_o.value[...] = 0.0
        x = rng.normal(size=(4, 4, 3))
        ctx = _random_scene_contexts(rng, 4, 4, 2)
        assert np.abs(hierarchical_attention(x, ctx, params)).max() == 0.0

    def test_single_row_contexts_ignore_queries(self):
        rng = np.random.default_rng(12)
        params = init_attention_params(1, d_k=4, d_v=4)
        ctx = {s: rng.normal(size=(1, 6)) for s in SCALES}
        x1 = rng.normal(size=(3, 3, 3))
        x2 = rng.normal(size=(3, 3, 3))
        out1 = hierarchical_attention(x1, ctx, params)
        out2 = hierarchical_attention(x2, ctx, params)
        assert np.max(np.abs(out1 - out2)) <= 1e-12
        v_rows = np.hstack([ctx[s] @ params.w_v[s].value for s in SCALES])
        expected = (v_rows @ params.w_o.value).reshape(1, 1, 3)
        assert np.allclose(out1, np.broadcast_to(expected, out1.shape))

    def test_matches_monolithic_oracle(self):
        rng = np.random.default_rng(13)
        params = init_attention_params(2, d_k=5, d_v=6)
        x = rng.normal(size=(4, 4, 3))
        ctx = _random_scene_contexts(rng, 4, 4, 2)
        got = hierarchical_attention(x, ctx, params)
        want = hierarchical_oracle(x, ctx, params)
        assert np.max(np.abs(got - want)) <= 1e-10

    @pytest.mark.parametrize("seed", range(3))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = init_attention_params(seed + 10, d_k=3, d_v=3)
        x = rng.normal(size=(3, 3, 3))
        ctx = _random_scene_contexts(rng, 3, 3, 3)
        target = rng.normal(size=(3, 3, 3))
        tensors = [p for _, p in params.named()]

        def f():
            for p in tensors:
                p.zero_grad()
            out, cache = hierarchical_attention_forward(x, ctx, params)
            hierarchical_attention_backward(2.0 * (out - target), cache, params)
            return float(((out - target) ** 2).sum())

        assert grad_check(f, tensors, eps=1e-6) <= 1e-6


class TestReverseStep:
    def test_hand_arithmetic(self):
        # spot check with alpha_t = 0.9, alpha_bar_t = 0.72, x = 1, eps_hat = 0.5
        s = NoiseSchedule(beta=np.array([0.2, 0.1]), alpha=np.array([0.8, 0.9]),
                          alpha_bar=np.array([0.8, 0.72]),
                          sigma=np.sqrt(np.array([0.2, 0.1])))
        x = np.full((1, 1, 3), 1.0)
        out = reverse_step(x, 2, np.full_like(x, 0.5), s, np.zeros_like(x))
        expected = (1.0 - (0.1 / np.sqrt(0.28)) * 0.5) / np.sqrt(0.9)
        assert np.allclose(out, expected, atol=1e-12)
        assert abs(expected - 0.95445) <= 1e-4

    def test_zero_inputs_rescale_only(self):
        s = make_schedule(3, 0.1, 0.3)
        x = np.random.default_rng(14).normal(size=(2, 2, 3))
        out = reverse_step(x, 2, np.zeros_like(x), s, np.zeros_like(x))
        assert np.allclose(out, x / np.sqrt(s.alpha[1]))

    def test_exact_recovery_at_t1(self):
        s = make_schedule(1, 0.2, 0.2)
        rng = np.random.default_rng(15)
        x0 = rng.normal(size=(4, 4, 3))
        eps = rng.standard_normal(x0.shape)
        x1 = forward_noise(x0, 1, s, eps)
        back = reverse_step(x1, 1, eps, s, np.zeros_like(x0))
        assert np.max(np.abs(back - x0)) <= 1e-9


class TestSample:
    def test_deterministic_under_fixed_seed(self):
        s = make_schedule(6, 0.05, 0.2)
        rng = np.random.default_rng(16)
        x_T = rng.normal(size=(4, 4, 3))
        eps_fn = lambda x, t: 0.1 * x
        a = sample(x_T, s, eps_fn, 123)
        b = sample(x_T, s, eps_fn, 123)
        assert np.array_equal(a, b)
        c = sample(x_T, s, eps_fn, 124)
        assert not np.array_equal(a, c)

    def test_t1_schedule_is_single_reverse_step(self):
        s = make_schedule(1, 0.2, 0.2)
        x_T = np.random.default_rng(17).normal(size=(3, 3, 3))
        eps_fn = lambda x, t: 0.3 * np.ones_like(x)
        got = sample(x_T, s, eps_fn, 0)
        want = reverse_step(x_T, 1, eps_fn(x_T, 1), s, np.zeros_like(x_T))
        assert np.array_equal(got, want)

    def test_zero_everything_telescopes(self):
        s = make_schedule(7, 0.01, 0.1)
        x_T = np.random.default_rng(18).normal(size=(4, 4, 3))
        # zero denoiser, zero attention; z = 0 by patching draws via identity fn
        out = x_T.copy()
        for t in range(s.T, 0, -1):
            out = reverse_step(out, t, np.zeros_like(out), s, np.zeros_like(out))
        assert np.max(np.abs(out - x_T / np.sqrt(s.alpha_bar[-1]))) <= 1e-9


def test_softmax_weights_row_stochastic_inside_attention():
    rng = np.random.default_rng(19)
    q = rng.normal(size=(6, 4))
    k = rng.normal(size=(5, 4))
    w = softmax(q @ k.T / 2.0, axis=-1)
    assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-9
