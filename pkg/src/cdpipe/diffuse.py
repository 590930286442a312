"""Noise schedule, forward noising, multi-scale cross-attention over
object/global contexts, and the reverse-diffusion sampler.

The refinement variable is an (H, W, 3) change map. Queries come from the
current noisy map, one per pixel; keys/values come from three fixed context
matrices (object-masked pixels at full and half resolution, plus a pooled
global difference embedding) projected by per-scale learned matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParamTensor, avg_pool, glorot_uniform, softmax, softmax_backward

SCALES = ("obj1", "obj2", "glob")
CONTEXT_CHANNELS = 6
STATE_CHANNELS = 3


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with derived alpha, running product, and the
    small-variance sampler scale sigma_t = sqrt(beta_t)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, "
                         f"got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha),
                         sigma=np.sqrt(beta))


def initial_difference(i1: np.ndarray, i2: np.ndarray, m1: np.ndarray,
                       m2: np.ndarray) -> np.ndarray:
    """Per-pixel absolute difference of the mask-gated frames,
    |m1*i1 - m2*i2|; zero wherever both masks are zero."""
    i1, i2 = np.asarray(i1), np.asarray(i2)
    m1, m2 = np.asarray(m1), np.asarray(m2)
    if i1.shape != i2.shape or m1.shape != i1.shape[:2] or m2.shape != i2.shape[:2]:
        raise ValueError(f"shape mismatch: images {i1.shape}/{i2.shape}, "
                         f"masks {m1.shape}/{m2.shape}")
    return np.abs(m1[..., None] * i1 - m2[..., None] * i2)


def forward_noise(x0: np.ndarray, t: int, schedule: NoiseSchedule,
                  noise: np.ndarray, mode: str = "ddpm") -> np.ndarray:
    """Noisy version of ``x0`` at step ``t``.

    ``ddpm`` uses the closed form sqrt(abar_t) x0 + sqrt(1 - abar_t) noise,
    consistent with the reverse-update coefficients. ``additive`` is the
    single-shot alternative x0 + sigma_t * noise, kept as an inference
    option.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside schedule of length {schedule.T}")
    ab = schedule.alpha_bar[t - 1]
    if mode == "ddpm":
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    if mode == "additive":
        return x0 + schedule.sigma[t - 1] * noise
    raise ValueError(f"unknown forward mode {mode!r}")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention. Each output row is a convex combination
    of rows of ``v``."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    d_k = q.shape[1]
    if d_k == 0:
        raise ValueError("query dimension must be positive")
    if k.shape[1] != d_k or v.shape[0] != k.shape[0]:
        raise ValueError(f"dimension mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    weights = softmax(q @ k.T / np.sqrt(d_k), axis=-1)
    return weights @ v


def build_contexts(i1: np.ndarray, i2: np.ndarray, m1: np.ndarray, m2: np.ndarray,
                   pool_factor: int) -> dict[str, np.ndarray]:
    """Key/value context matrices for the three attention scales.

    obj1: masked frames concatenated channel-wise, one row per pixel (d=6).
    obj2: the same after 2x mean downsampling (rows = HW/4).
    glob: pooled frame difference, 3 channels zero-padded to 6
          (rows = HW / pool_factor^2).
    """
    masked = np.concatenate([np.asarray(m1)[..., None] * i1,
                             np.asarray(m2)[..., None] * i2], axis=2)
    h, w = masked.shape[:2]
    f_obj1 = masked.reshape(h * w, CONTEXT_CHANNELS)
    pooled = avg_pool(masked, 2)
    f_obj2 = pooled.reshape(-1, CONTEXT_CHANNELS)
    g = avg_pool(np.asarray(i1) - np.asarray(i2), pool_factor)
    f_glob = np.zeros((g.shape[0] * g.shape[1], CONTEXT_CHANNELS))
    f_glob[:, :STATE_CHANNELS] = g.reshape(-1, STATE_CHANNELS)
    return {"obj1": f_obj1, "obj2": f_obj2, "glob": f_glob}


@dataclass
class AttentionParams:
    """Query/key/value/output projections; keys and values are per scale."""

    w_q: ParamTensor
    w_k: dict[str, ParamTensor]
    w_v: dict[str, ParamTensor]
    w_o: ParamTensor

    @property
    def d_v(self) -> int:
        return self.w_v[SCALES[0]].shape[1]

    def named(self) -> list[tuple[str, ParamTensor]]:
        items = [("attn.w_q", self.w_q)]
        for s in SCALES:
            items.append((f"attn.w_k.{s}", self.w_k[s]))
        for s in SCALES:
            items.append((f"attn.w_v.{s}", self.w_v[s]))
        items.append(("attn.w_o", self.w_o))
        return items


def init_attention_params(seed: int, d_k: int = 16, d_v: int = 16) -> AttentionParams:
    rng = np.random.default_rng(seed)
    w_q = ParamTensor(glorot_uniform(rng, (STATE_CHANNELS, d_k)), name="attn.w_q")
    w_k = {s: ParamTensor(glorot_uniform(rng, (CONTEXT_CHANNELS, d_k)),
                          name=f"attn.w_k.{s}") for s in SCALES}
    w_v = {s: ParamTensor(glorot_uniform(rng, (CONTEXT_CHANNELS, d_v)),
                          name=f"attn.w_v.{s}") for s in SCALES}
    w_o = ParamTensor(glorot_uniform(rng, (len(SCALES) * d_v, STATE_CHANNELS)),
                      name="attn.w_o")
    return AttentionParams(w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o)


def hierarchical_attention_forward(x: np.ndarray, contexts: dict[str, np.ndarray],
                                   params: AttentionParams):
    """Per-pixel queries attend to each context independently; the three
    outputs are concatenated per pixel and projected back to 3 channels.
    Returns the (H, W, 3) additive term and a cache for the backward pass."""
    h, w, c = x.shape
    if c != STATE_CHANNELS:
        raise ValueError(f"expected {STATE_CHANNELS}-channel state, got {x.shape}")
    flat = x.reshape(h * w, c)
    q = flat @ params.w_q.value
    d_k = q.shape[1]
    scale = 1.0 / np.sqrt(d_k)
    per_scale = {}
    outs = []
    for s in SCALES:
        f = contexts[s]
        if f.shape[1] != params.w_k[s].shape[0]:
            raise ValueError(f"context {s} width {f.shape[1]} does not match "
                             f"w_k {params.w_k[s].shape}")
        k = f @ params.w_k[s].value
        v = f @ params.w_v[s].value
        weights = softmax(q @ k.T * scale, axis=-1)
        per_scale[s] = (f, k, v, weights)
        outs.append(weights @ v)
    concat = np.concatenate(outs, axis=1)
    out = (concat @ params.w_o.value).reshape(h, w, STATE_CHANNELS)
    cache = (flat, q, per_scale, concat, (h, w, c))
    return out, cache


def hierarchical_attention(x: np.ndarray, contexts: dict[str, np.ndarray],
                           params: AttentionParams) -> np.ndarray:
    return hierarchical_attention_forward(x, contexts, params)[0]


def hierarchical_attention_backward(grad_out: np.ndarray, cache,
                                    params: AttentionParams) -> np.ndarray:
    """Accumulates parameter gradients, returns the gradient w.r.t. x."""
    flat, q, per_scale, concat, (h, w, c) = cache
    d_v = params.d_v
    scale = 1.0 / np.sqrt(q.shape[1])
    g = grad_out.reshape(h * w, c)
    params.w_o.grad += concat.T @ g
    d_concat = g @ params.w_o.value.T
    d_q = np.zeros_like(q)
    for idx, s in enumerate(SCALES):
        f, k, v, weights = per_scale[s]
        d_out_s = d_concat[:, idx * d_v:(idx + 1) * d_v]
        params.w_v[s].grad += f.T @ (weights.T @ d_out_s)
        d_weights = d_out_s @ v.T
        d_scores = softmax_backward(d_weights, weights, axis=-1)
        d_q += d_scores @ k * scale
        d_k_mat = d_scores.T @ q * scale
        params.w_k[s].grad += f.T @ d_k_mat
    params.w_q.grad += flat.T @ d_q
    return (d_q @ params.w_q.value.T).reshape(h, w, c)


# ---------------------------------------------------------------------------
# reverse process
# ---------------------------------------------------------------------------

def reverse_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                 schedule: NoiseSchedule, z: np.ndarray) -> np.ndarray:
    """One reverse update:
    x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(a_t)
              + sigma_t * z."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside schedule of length {schedule.T}")
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    return (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a) \
        + schedule.sigma[t - 1] * z


def sample(x_T: np.ndarray, schedule: NoiseSchedule, eps_fn, rng) -> np.ndarray:
    """Run the reverse loop t = T..1 with ``eps_hat = eps_fn(x_t, t)``.

    ``rng`` is a seed, a Generator, or any object with ``standard_normal``;
    the draw order fixes the trajectory, so the result is bit-reproducible
    for a given seed. The final step adds no noise, leaving the returned map
    noise-free.
    """
    if not hasattr(rng, "standard_normal"):
        rng = np.random.default_rng(rng)
    x = np.array(x_T, dtype=np.float64)
    for t in range(schedule.T, 0, -1):
        eps_hat = eps_fn(x, t)
        z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = reverse_step(x, t, eps_hat, schedule, z)
    return x
