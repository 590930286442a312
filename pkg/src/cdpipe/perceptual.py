"""Windowed structural-similarity maps, perception-guided probability fusion,
and the structural dissimilarity loss.

SSIM uses uniform windows with replicate edge padding, the standard
luminance/contrast/structure product form. Local statistics are box-filter
means of the signal, its square, and the cross product.
"""

from __future__ import annotations

import numpy as np


def box_filter(x: np.ndarray, window: int) -> np.ndarray:
    """Uniform window mean of a single-channel grid with replicate padding."""
    m = window // 2
    xp = np.pad(x, m, mode="edge")
    h, w = x.shape
    acc = np.zeros_like(x, dtype=np.float64)
    for u in range(window):
        for v in range(window):
            acc += xp[u:u + h, v:v + w]
    return acc / (window * window)


def box_filter_adjoint(g: np.ndarray, window: int) -> np.ndarray:
    """Transpose of :func:`box_filter`: scatters window-mean gradients back
    to source pixels, folding replicate-padded border reads onto their
    clamped origins."""
    m = window // 2
    h, w = g.shape
    gp = np.zeros((h + 2 * m, w + 2 * m), dtype=np.float64)
    gs = g / (window * window)
    for u in range(window):
        for v in range(window):
            gp[u:u + h, v:v + w] += gs
    rows = np.clip(np.arange(h + 2 * m) - m, 0, h - 1)
    cols = np.clip(np.arange(w + 2 * m) - m, 0, w - 1)
    folded_rows = np.zeros((h, w + 2 * m))
    np.add.at(folded_rows, rows, gp)
    out = np.zeros((h, w))
    np.add.at(out.T, cols, folded_rows.T)
    return out


def ssim_map_forward(pred: np.ndarray, ref: np.ndarray, window: int = 7,
                     c1: float = 0.01 ** 2, c2: float = 0.03 ** 2):
    """Per-pixel SSIM between two single-channel grids. Returns (map, cache)."""
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.ndim != 2:
        raise ValueError(f"expected matching 2-d grids, got {pred.shape} and {ref.shape}")
    if window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    if window > min(pred.shape):
        raise ValueError(f"window {window} exceeds grid {pred.shape}")
    if c1 <= 0 or c2 <= 0:
        raise ValueError(f"stabilizers must be positive, got c1={c1}, c2={c2}")
    mu_p = box_filter(pred, window)
    mu_r = box_filter(ref, window)
    sq_p = box_filter(pred * pred, window)     # E[p^2]
    sq_r = box_filter(ref * ref, window)
    cross = box_filter(pred * ref, window)     # E[p r]
    var_p = sq_p - mu_p * mu_p
    var_r = sq_r - mu_r * mu_r
    cov = cross - mu_p * mu_r
    a = 2.0 * mu_p * mu_r + c1
    b = 2.0 * cov + c2
    c = mu_p * mu_p + mu_r * mu_r + c1
    d = var_p + var_r + c2
    smap = (a * b) / (c * d)
    cache = (pred, ref, window, mu_p, mu_r, a, b, c, d)
    return smap, cache


def ssim_map(pred: np.ndarray, ref: np.ndarray, window: int = 7,
             c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> np.ndarray:
    return ssim_map_forward(pred, ref, window, c1, c2)[0]


def ssim_map_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    """Gradient of the SSIM map w.r.t. ``pred`` (the reference is constant)."""
    pred, ref, window, mu_p, mu_r, a, b, c, d = cache
    cd = c * d
    s_over = a * b / cd
    d_a = grad_out * b / cd
    d_b = grad_out * a / cd
    d_c = -grad_out * s_over / c
    d_d = -grad_out * s_over / d
    # stats depend on pred through mu_p, E[p^2], E[p r]
    g_mu = d_a * 2.0 * mu_r - d_b * 2.0 * mu_r + d_c * 2.0 * mu_p - d_d * 2.0 * mu_p
    g_sq = d_d                      # var_p = E[p^2] - mu_p^2
    g_cross = d_b * 2.0             # cov = E[p r] - mu_p mu_r
    grad = box_filter_adjoint(g_mu, window)
    grad += 2.0 * pred * box_filter_adjoint(g_sq, window)
    grad += ref * box_filter_adjoint(g_cross, window)
    return grad


def fuse(probs: np.ndarray, ssim: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination lam * probs + (1 - lam) * (1 - ssim) per channel,
    clamped at zero and renormalized per pixel; a pixel whose channels all
    vanish falls back to uniform."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    if probs.shape != ssim.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs ssim {ssim.shape}")
    raw = lam * probs + (1.0 - lam) * (1.0 - ssim)
    raw = np.maximum(raw, 0.0)
    total = raw.sum(axis=-1, keepdims=True)
    n = probs.shape[-1]
    uniform = np.full_like(raw, 1.0 / n)
    return np.where(total > 0.0, raw / np.where(total > 0.0, total, 1.0), uniform)


def ssim_loss_forward(probs: np.ndarray, refs: np.ndarray, window: int = 7,
                      c1: float = 0.01 ** 2, c2: float = 0.03 ** 2):
    """Sum over channels of the mean structural dissimilarity
    mean(1 - ssim_map(prob_c, ref_c)). Returns (value, caches)."""
    if probs.shape != refs.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs refs {refs.shape}")
    total = 0.0
    caches = []
    for ch in range(probs.shape[-1]):
        smap, cache = ssim_map_forward(probs[..., ch], refs[..., ch], window, c1, c2)
        total += float((1.0 - smap).mean())
        caches.append(cache)
    return total, caches


def ssim_loss(probs: np.ndarray, refs: np.ndarray, window: int = 7,
              c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    return ssim_loss_forward(probs, refs, window, c1, c2)[0]


def ssim_loss_backward(caches, shape) -> np.ndarray:
    """Gradient of :func:`ssim_loss` w.r.t. the probability map."""
    grad = np.zeros(shape, dtype=np.float64)
    n_pix = shape[0] * shape[1]
    upstream = np.full(shape[:2], -1.0 / n_pix)
    for ch, cache in enumerate(caches):
        grad[..., ch] = ssim_map_backward(upstream, cache)
    return grad
