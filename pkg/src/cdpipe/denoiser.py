"""Learnable noise predictor: three 3x3 convolutions with leaky-rectifier
nonlinearities, conditioned on the timestep through a learned per-step
embedding broadcast as extra input channels.

The piecewise-linear rectifier (slope 0.01 on the negative side) keeps
finite-difference checks well behaved; there are no normalization layers or
skip connections at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (ParamTensor, conv2d, conv2d_backward, glorot_uniform,
                       leaky_relu, leaky_relu_backward)

STATE_CHANNELS = 3


@dataclass
class DenoiserParams:
    conv1: ParamTensor
    b1: ParamTensor
    conv2: ParamTensor
    b2: ParamTensor
    conv3: ParamTensor
    b3: ParamTensor
    time_embedding: ParamTensor  # (T, time_embed_channels)

    @property
    def T(self) -> int:
        return self.time_embedding.shape[0]

    @property
    def time_embed_channels(self) -> int:
        return self.time_embedding.shape[1]

    def named(self) -> list[tuple[str, ParamTensor]]:
        return [("denoiser.conv1", self.conv1), ("denoiser.b1", self.b1),
                ("denoiser.conv2", self.conv2), ("denoiser.b2", self.b2),
                ("denoiser.conv3", self.conv3), ("denoiser.b3", self.b3),
                ("denoiser.time_embedding", self.time_embedding)]


def init_denoiser_params(seed: int, T: int, hidden: int = 16,
                         time_embed_channels: int = 4) -> DenoiserParams:
    """Kernels drawn Glorot-uniform, biases and time embeddings zero;
    deterministic per seed."""
    if hidden < 1:
        raise ValueError(f"hidden width must be >= 1, got {hidden}")
    rng = np.random.default_rng(seed)
    cin = STATE_CHANNELS + time_embed_channels
    return DenoiserParams(
        conv1=ParamTensor(glorot_uniform(rng, (3, 3, cin, hidden)), name="denoiser.conv1"),
        b1=ParamTensor(np.zeros(hidden), name="denoiser.b1"),
        conv2=ParamTensor(glorot_uniform(rng, (3, 3, hidden, hidden)), name="denoiser.conv2"),
        b2=ParamTensor(np.zeros(hidden), name="denoiser.b2"),
        conv3=ParamTensor(glorot_uniform(rng, (3, 3, hidden, STATE_CHANNELS)),
                          name="denoiser.conv3"),
        b3=ParamTensor(np.zeros(STATE_CHANNELS), name="denoiser.b3"),
        time_embedding=ParamTensor(np.zeros((T, time_embed_channels)),
                                   name="denoiser.time_embedding"),
    )


def denoise_forward(x_t: np.ndarray, t: int, params: DenoiserParams):
    """Noise estimate for the state at step ``t``; output shape equals input
    shape. Returns (output, cache)."""
    if not 1 <= t <= params.T:
        raise ValueError(f"step {t} outside embedding table of length {params.T}")
    h, w, _ = x_t.shape
    emb = params.time_embedding.value[t - 1]
    inp = np.concatenate([x_t, np.broadcast_to(emb, (h, w, emb.size))], axis=2)
    z1 = conv2d(inp, params.conv1.value, params.b1.value)
    h1 = leaky_relu(z1)
    z2 = conv2d(h1, params.conv2.value, params.b2.value)
    h2 = leaky_relu(z2)
    out = conv2d(h2, params.conv3.value, params.b3.value)
    return out, (t, inp, z1, h1, z2, h2)


def denoise(x_t: np.ndarray, t: int, params: DenoiserParams) -> np.ndarray:
    return denoise_forward(x_t, t, params)[0]


def denoise_backward(grad_out: np.ndarray, cache, params: DenoiserParams) -> np.ndarray:
    """Accumulates parameter gradients, returns the gradient w.r.t. x_t."""
    t, inp, z1, h1, z2, h2 = cache
    d_h2, d_k3, d_b3 = conv2d_backward(grad_out, h2, params.conv3.value)
    params.conv3.grad += d_k3
    params.b3.grad += d_b3
    d_z2 = leaky_relu_backward(d_h2, z2)
    d_h1, d_k2, d_b2 = conv2d_backward(d_z2, h1, params.conv2.value)
    params.conv2.grad += d_k2
    params.b2.grad += d_b2
    d_z1 = leaky_relu_backward(d_h1, z1)
    d_inp, d_k1, d_b1 = conv2d_backward(d_z1, inp, params.conv1.value)
    params.conv1.grad += d_k1
    params.b1.grad += d_b1
    params.time_embedding.grad[t - 1] += d_inp[:, :, STATE_CHANNELS:].sum(axis=(0, 1))
    return d_inp[:, :, :STATE_CHANNELS]
