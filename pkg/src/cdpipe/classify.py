"""Per-pixel categorization of refined change maps.

Probability maps are (H, W, C+1) grids: channel 0 is explicit no-change,
channels 1..C are the change types. Probabilities are floored at 1e-12
before any logarithm so losses stay bounded.
"""

from __future__ import annotations

import numpy as np

from .numerics import ParamTensor, conv2d, conv2d_backward, softmax, softmax_backward

PROB_FLOOR = 1e-12


def class_head_forward(delta_star: np.ndarray, weight: ParamTensor, bias: ParamTensor):
    """1x1 projection of the refined map to C+1 channels followed by a
    channel softmax. Returns (probs, cache)."""
    if weight.shape[2] != delta_star.shape[2]:
        raise ValueError(f"head expects {weight.shape[2]} input channels, "
                         f"map has shape {delta_star.shape}")
    logits = conv2d(delta_star, weight.value, bias.value)
    probs = softmax(logits, axis=-1)
    return probs, (delta_star, probs)


def class_head(delta_star: np.ndarray, weight: ParamTensor, bias: ParamTensor) -> np.ndarray:
    return class_head_forward(delta_star, weight, bias)[0]


def class_head_backward(d_probs: np.ndarray, cache, weight: ParamTensor,
                        bias: ParamTensor) -> np.ndarray:
    """Accumulates head gradients, returns gradient w.r.t. the input map."""
    delta_star, probs = cache
    d_logits = softmax_backward(d_probs, probs, axis=-1)
    d_x, d_k, d_b = conv2d_backward(d_logits, delta_star, weight.value)
    weight.grad += d_k
    bias.grad += d_b
    return d_x


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; exact ties resolve to the smallest class index."""
    return np.argmax(probs, axis=-1).astype(np.int64)


def _true_class_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != probs.shape[:2]:
        raise ValueError(f"label map {labels.shape} does not match probs {probs.shape}")
    if labels.min() < 0 or labels.max() >= probs.shape[2]:
        raise ValueError(f"labels outside [0, {probs.shape[2] - 1}]")
    return np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]


def _normalized_weights(class_weights, n_channels: int) -> np.ndarray:
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (n_channels,):
        raise ValueError(f"expected {n_channels} class weights, got shape {w.shape}")
    return w * (w.size / w.sum())


def cross_entropy(probs: np.ndarray, labels: np.ndarray,
                  class_weights=None) -> float:
    """Mean negative log-likelihood of the true class, optionally weighted
    per class (weights are normalized to mean one so scales stay comparable)."""
    s_true = _true_class_probs(probs, labels)
    nll = -np.log(np.maximum(s_true, PROB_FLOOR))
    if class_weights is not None:
        w = _normalized_weights(class_weights, probs.shape[2])
        nll = w[labels] * nll
    return float(nll.mean())


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray,
                       class_weights=None) -> np.ndarray:
    """Gradient of :func:`cross_entropy` w.r.t. the probability map."""
    s_true = _true_class_probs(probs, labels)
    s_safe = np.maximum(s_true, PROB_FLOOR)
    pixel = -1.0 / s_safe * (s_true > PROB_FLOOR)
    if class_weights is not None:
        w = _normalized_weights(class_weights, probs.shape[2])
        pixel = w[labels] * pixel
    g = np.zeros_like(probs)
    np.put_along_axis(g, np.asarray(labels)[..., None],
                      (pixel / labels.size)[..., None], axis=-1)
    return g


def focal_loss(probs: np.ndarray, labels: np.ndarray, gamma: float) -> float:
    """Mean of -(1 - s_true)^gamma * log(s_true); equals cross-entropy at
    gamma = 0."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    s_true = _true_class_probs(probs, labels)
    mod = (1.0 - s_true) ** gamma
    return float((mod * -np.log(np.maximum(s_true, PROB_FLOOR))).mean())


def focal_loss_grad(probs: np.ndarray, labels: np.ndarray, gamma: float) -> np.ndarray:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    s_true = _true_class_probs(probs, labels)
    s_safe = np.maximum(s_true, PROB_FLOOR)
    one_minus = 1.0 - s_true
    log_term = np.log(s_safe)
    # d/ds [-(1-s)^g log s] = g (1-s)^(g-1) log s - (1-s)^g / s
    if gamma == 0.0:
        focusing = np.zeros_like(s_true)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            focusing = gamma * one_minus ** (gamma - 1.0) * log_term
        focusing = np.where(one_minus > 0.0, focusing, 0.0)
    pixel = focusing - one_minus ** gamma / s_safe * (s_true > PROB_FLOOR)
    g = np.zeros_like(probs)
    np.put_along_axis(g, np.asarray(labels)[..., None],
                      (pixel / labels.size)[..., None], axis=-1)
    return g
