"""Dense-grid math substrate: convolution, softmax, pooling, and a
finite-difference gradient checker.

Conventions used throughout the package:

* a "grid" is a plain numpy array of shape (H, W, C), row major, so that
  flattening always means ``grid.reshape(H * W, C)`` (y first, then x,
  then channel);
* learnable arrays live in :class:`ParamTensor`, which pairs values with
  a same-shaped gradient accumulator;
* backward helpers *accumulate* gradients (callers zero them first),
  which makes batching a plain sum;
* float64 everywhere for tests and gradient checks; training tolerates
  the same code path (it is fast enough at desk scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

LEAKY_SLOPE = 0.01


@dataclass
class ParamTensor:
    """A learnable array paired with its gradient accumulator."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)).

    For 4-d convolution kernels (kh, kw, cin, cout) the fans include the
    kernel area; for 2-d matrices they are the row/column counts.
    """
    shape = tuple(shape)
    if len(shape) == 4:
        kh, kw, cin, cout = shape
        fan_in, fan_out = kh * kw * cin, kh * kw * cout
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        raise ValueError(f"unsupported parameter shape {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, padding: str) -> tuple[np.ndarray, np.ndarray]:
    if padding == "same":
        xp = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    elif padding == "none":
        xp = x
    else:
        raise ValueError(f"padding must be 'same' or 'none', got {padding!r}")
    h = xp.shape[0] - kh + 1
    w = xp.shape[1] - kw + 1
    if h < 1 or w < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {xp.shape}")
    cols = np.empty((h, w, kh, kw, x.shape[2]), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v, :] = xp[u:u + h, v:v + w, :]
    return xp, cols


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
           padding: str = "same") -> np.ndarray:
    """2-d cross-correlation of an (H, W, Cin) grid with a (kh, kw, Cin, Cout)
    kernel. Spatial kernel sizes must be odd; ``same`` zero-pads so the output
    keeps the input's spatial size."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"expected (H,W,C) input and (kh,kw,Cin,Cout) kernel, "
                         f"got {x.shape} and {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial size must be odd, got {kh}x{kw}")
    if cin != x.shape[2]:
        raise ValueError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    _, cols = _im2col(x, kh, kw, padding)
    h, w = cols.shape[:2]
    y = cols.reshape(h * w, kh * kw * cin) @ kernel.reshape(kh * kw * cin, cout)
    if bias is not None:
        y = y + np.asarray(bias)[None, :]
    return y.reshape(h, w, cout)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                    padding: str = "same") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d`; returns (d_input, d_kernel, d_bias)."""
    kh, kw, cin, cout = kernel.shape
    xp, cols = _im2col(x, kh, kw, padding)
    h, w = cols.shape[:2]
    g = grad_out.reshape(h * w, cout)
    d_kernel = (cols.reshape(h * w, kh * kw * cin).T @ g).reshape(kernel.shape)
    d_bias = g.sum(axis=0)
    d_cols = (g @ kernel.reshape(kh * kw * cin, cout).T).reshape(h, w, kh, kw, cin)
    d_xp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            d_xp[u:u + h, v:v + w, :] += d_cols[:, :, u, v, :]
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        d_x = d_xp[ph:ph + x.shape[0], pw:pw + x.shape[1], :]
    else:
        d_x = d_xp
    return d_x, d_kernel, d_bias


# ---------------------------------------------------------------------------
# activations and softmax
# ---------------------------------------------------------------------------

def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray,
                        slope: float = LEAKY_SLOPE) -> np.ndarray:
    return grad_out * np.where(x >= 0.0, 1.0, slope)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``. Slices sum to one and the
    result is invariant to adding a constant to a slice."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax requires finite inputs")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output ``y``."""
    inner = (grad_out * y).sum(axis=axis, keepdims=True)
    return y * (grad_out - inner)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool an (H, W, C) grid by an integer factor per axis.

    Heights/widths that do not divide evenly are replicate-padded on the
    bottom/right edge to the next multiple so no pixels are dropped.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected (H,W,C) grid, got {x.shape}")
    if int(factor) != factor or factor < 1:
        raise ValueError(f"pool factor must be a positive integer, got {factor}")
    factor = int(factor)
    h, w, c = x.shape
    if factor > min(h, w):
        raise ValueError(f"pool factor {factor} exceeds grid size {h}x{w}")
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    if pad_h or pad_w:
        x = np.pad(x, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    hp, wp = x.shape[:2]
    return x.reshape(hp // factor, factor, wp // factor, factor, c).mean(axis=(1, 3))


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsample of an (H, W, C) grid."""
    return np.repeat(np.repeat(x, factor, axis=0), factor, axis=1)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)


def grad_check(f: Callable[[], float], params: Sequence[ParamTensor],
               eps: float = 1e-5, f_value: Callable[[], float] | None = None,
               refine_at: float = 1e-6) -> float:
    """Compare analytic gradients against central finite differences.

    ``f`` takes no arguments, runs forward and backward for the current
    parameter values, accumulates analytic gradients into each param's
    ``grad`` (they are zeroed here first) and returns the scalar loss. It
    must be deterministic: fix seeds so noise draws repeat between calls.
    ``f_value``, when given, is a cheaper value-only version used for the
    perturbed evaluations.

    Coordinates whose first-pass error exceeds ``refine_at`` are re-measured
    at smaller and larger steps and the best agreement is kept: a smaller
    step escapes rectifier-kink straddles, a larger one escapes rounding
    noise on near-zero gradients.

    Returns the worst relative error over all parameter entries,
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    probe = f_value if f_value is not None else f
    for p in params:
        p.zero_grad()
    f()
    analytic = [p.grad.copy() for p in params]

    def central(flat, i: int, step: float) -> float:
        orig = flat[i]
        flat[i] = orig + step
        plus = probe()
        flat[i] = orig - step
        minus = probe()
        flat[i] = orig
        return (plus - minus) / (2.0 * step)

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            err = _relative_error(gflat[i], central(flat, i, eps))
            if err > refine_at:
                for step in (eps / 5.0, eps / 25.0, eps * 5.0):
                    err = min(err, _relative_error(gflat[i], central(flat, i, step)))
                    if err <= refine_at:
                        break
            if err > worst:
                worst = err
    for p, g in zip(params, analytic):
        p.grad[...] = g
    return worst
