"""Unified training objective, Adam optimizer with warmup/cosine schedule,
the training loop over synthetic scenes, and binary checkpointing.

Two objectives share the same parameter set:

* ``unified_loss`` runs the full reverse sampler and scores the recovered
  map directly (reconstruction + classification + structural terms). It is
  differentiable end to end and is what gradient checks and validation use.
* ``surrogate_loss`` is the per-step trainable proxy: sample a timestep,
  predict the injected noise, and penalize the prediction error; the head
  terms are applied to the single-step reconstruction of the clean map.

The forward-consistency diagnostic ||delta0 - x_T||^2 carries no learnable
parameter under a fixed Gaussian injection, so it is logged but excluded
from gradients.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .classify import (class_head_backward, class_head_forward, cross_entropy,
                       cross_entropy_grad)
from .denoiser import (DenoiserParams, denoise_backward, denoise_forward,
                       init_denoiser_params)
from .detect import match_unique, rasterize_masks
from .diffuse import (SCALES, AttentionParams, build_contexts, forward_noise,
                      hierarchical_attention_backward,
                      hierarchical_attention_forward, init_attention_params,
                      initial_difference, make_schedule, reverse_step)
from .errors import CheckpointError, NumericError
from .numerics import ParamTensor, glorot_uniform
from .perceptual import ssim_loss_backward, ssim_loss_forward

STATE_CHANNELS = 3


@dataclass
class Config:
    """All pipeline hyperparameters in one place."""

    tau_iou: float = 0.5
    score_min: float = 0.7
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    d_k: int = 16
    d_v: int = 16
    pool_factor: int = 8
    lam: float = 0.7            # fusion weight on the raw probabilities
    gamma1: float = 1.0         # classification term weight
    gamma2: float = 0.1         # structural term weight
    window: int = 7
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    n_classes: int = 3          # change classes; maps carry n_classes + 1 channels
    class_weights: tuple | None = None   # optional per-class loss weights
    hidden: int = 16
    time_embed_channels: int = 4
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.05
    epochs: int = 20
    batch_size: int = 2
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("loss weights gamma1/gamma2 must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.tau_iou <= 1.0:
            raise ValueError(f"tau_iou must lie in [0, 1], got {self.tau_iou}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if len(self.class_weights) != self.n_classes + 1:
                raise ValueError(f"expected {self.n_classes + 1} class weights, "
                                 f"got {len(self.class_weights)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class ModelParams:
    """Every learnable tensor in the pipeline."""

    denoiser: DenoiserParams
    attention: AttentionParams
    head_weight: ParamTensor   # (1, 1, 3, n_classes + 1)
    head_bias: ParamTensor

    def named(self) -> list[tuple[str, ParamTensor]]:
        return (self.denoiser.named() + self.attention.named()
                + [("head.weight", self.head_weight), ("head.bias", self.head_bias)])

    def tensors(self) -> list[ParamTensor]:
        return [p for _, p in self.named()]

    def zero_grads(self) -> None:
        for p in self.tensors():
            p.zero_grad()


def init_model(config: Config) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    n_out = config.n_classes + 1
    head_weight = ParamTensor(glorot_uniform(rng, (STATE_CHANNELS, n_out))
                              .reshape(1, 1, STATE_CHANNELS, n_out), name="head.weight")
    head_bias = ParamTensor(np.zeros(n_out), name="head.bias")
    return ModelParams(
        denoiser=init_denoiser_params(config.seed + 1, config.T, config.hidden,
                                      config.time_embed_channels),
        attention=init_attention_params(config.seed + 2, config.d_k, config.d_v),
        head_weight=head_weight,
        head_bias=head_bias,
    )


# ---------------------------------------------------------------------------
# training examples
# ---------------------------------------------------------------------------

@dataclass
class TrainExample:
    delta0: np.ndarray
    labels: np.ndarray
    contexts: dict[str, np.ndarray]
    ref_channels: np.ndarray   # one-hot ground-truth planes, (H, W, C+1)


def one_hot_labels(labels: np.ndarray, n_channels: int) -> np.ndarray:
    out = np.zeros(labels.shape + (n_channels,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def inverse_frequency_weights(examples, n_channels: int) -> tuple:
    """Per-class loss weights inversely proportional to pixel frequency over
    the given examples (add-one smoothed; cross_entropy renormalizes them to
    mean one)."""
    counts = np.zeros(n_channels, dtype=np.int64)
    for ex in examples:
        counts += np.bincount(np.asarray(ex.labels).reshape(-1),
                              minlength=n_channels)
    return tuple(float(v) for v in counts.sum() / (counts + 1.0))


def prepare_example(scene, config: Config) -> TrainExample:
    """Turn a synthetic scene into a training example: unique-object masks,
    masked difference map, attention contexts, and one-hot references."""
    h, w = scene.gt_labels.shape
    u1, u2 = match_unique(scene.oracle_d1, scene.oracle_d2,
                          config.tau_iou, config.score_min)
    m1 = rasterize_masks(u1, h, w)
    m2 = rasterize_masks(u2, h, w)
    delta0 = initial_difference(scene.i1, scene.i2, m1, m2)
    contexts = build_contexts(scene.i1, scene.i2, m1, m2, config.pool_factor)
    refs = one_hot_labels(scene.gt_labels, config.n_classes + 1)
    return TrainExample(delta0=delta0, labels=scene.gt_labels,
                        contexts=contexts, ref_channels=refs)


# ---------------------------------------------------------------------------
# traced sampling (forward + tape for manual backprop)
# ---------------------------------------------------------------------------

def _sample_traced(x_T, schedule, params: ModelParams, contexts, rng,
                   record: bool):
    x = x_T
    tape = []
    for t in range(schedule.T, 0, -1):
        d_out, d_cache = denoise_forward(x, t, params.denoiser)
        a_out, a_cache = hierarchical_attention_forward(x, contexts, params.attention)
        eps_hat = d_out + a_out
        z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        if record:
            tape.append((t, d_cache, a_cache))
        x = reverse_step(x, t, eps_hat, schedule, z)
    return x, tape


def _sample_backward(d_x0, tape, schedule, params: ModelParams, contexts) -> None:
    g = d_x0
    for t, d_cache, a_cache in reversed(tape):
        a = schedule.alpha[t - 1]
        ab = schedule.alpha_bar[t - 1]
        inv_sqrt_a = 1.0 / np.sqrt(a)
        g_eps = -inv_sqrt_a * (1.0 - a) / np.sqrt(1.0 - ab) * g
        g_next = inv_sqrt_a * g
        g_next = g_next + denoise_backward(g_eps, d_cache, params.denoiser)
        g_next = g_next + hierarchical_attention_backward(g_eps, a_cache,
                                                          params.attention)
        g = g_next


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _head_losses(x0, example: TrainExample, params: ModelParams, config: Config,
                 compute_grad: bool, grad_scale: float = 1.0):
    """Classification and structural terms on the head output; returns
    (l_cls, l_ssim, d_x0 or None). Gradients (including the returned d_x0)
    carry ``grad_scale``, the batch-averaging factor."""
    probs, head_cache = class_head_forward(x0, params.head_weight, params.head_bias)
    l_cls = cross_entropy(probs, example.labels, config.class_weights)
    l_ssim, ssim_caches = ssim_loss_forward(probs, example.ref_channels,
                                            config.window, config.c1, config.c2)
    if not compute_grad:
        return l_cls, l_ssim, None
    d_probs = config.gamma1 * cross_entropy_grad(probs, example.labels,
                                                 config.class_weights)
    if config.gamma2 != 0.0:
        d_probs = d_probs + config.gamma2 * ssim_loss_backward(ssim_caches, probs.shape)
    d_x0 = class_head_backward(grad_scale * d_probs, head_cache,
                               params.head_weight, params.head_bias)
    return l_cls, l_ssim, d_x0


def unified_loss(batch, params: ModelParams, config: Config, rng,
                 compute_grad: bool = False):
    """Full-sampler objective over a batch of prepared examples.

    Returns (total, breakdown). The breakdown carries the batch means of the
    reconstruction, classification, and structural terms plus the
    gradient-free forward-consistency diagnostic. With ``compute_grad`` the
    parameter gradients of the total are accumulated in place.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    rng = np.random.default_rng(rng)
    schedule = config.schedule()
    scale = 1.0 / len(batch)
    sums = {"l_fwd": 0.0, "l_den": 0.0, "l_cls": 0.0, "l_ssim": 0.0}
    for ex in batch:
        eps = rng.standard_normal(ex.delta0.shape)
        x_T = forward_noise(ex.delta0, schedule.T, schedule, eps)
        sums["l_fwd"] += float(((ex.delta0 - x_T) ** 2).mean())
        x0, tape = _sample_traced(x_T, schedule, params, ex.contexts, rng,
                                  record=compute_grad)
        l_den = float(((x0 - ex.delta0) ** 2).mean())
        l_cls, l_ssim, d_x0 = _head_losses(x0, ex, params, config, compute_grad,
                                           grad_scale=scale)
        sums["l_den"] += l_den
        sums["l_cls"] += l_cls
        sums["l_ssim"] += l_ssim
        if compute_grad:
            d_x0 = d_x0 + scale * 2.0 * (x0 - ex.delta0) / x0.size
            _sample_backward(d_x0, tape, schedule, params, ex.contexts)
    breakdown = {k: v * scale for k, v in sums.items()}
    total = (breakdown["l_den"] + config.gamma1 * breakdown["l_cls"]
             + config.gamma2 * breakdown["l_ssim"])
    breakdown["total"] = total
    return total, breakdown


def surrogate_loss(batch, params: ModelParams, config: Config, rng,
                   compute_grad: bool = True):
    """Per-step training proxy: predict the injected noise at a uniformly
    sampled timestep (backpropagating through every sampler step is
    quadratic in T, so this standard bound is what the optimizer sees). The
    head terms score the clean target map directly; coupling them through a
    single-step reconstruction would feed the head noise-dominated inputs at
    large t while contributing an O(sqrt(1 - abar_1)) gradient to the
    denoiser, so the detour buys nothing."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    rng = np.random.default_rng(rng)
    schedule = config.schedule()
    scale = 1.0 / len(batch)
    sums = {"l_fwd": 0.0, "l_noise": 0.0, "l_cls": 0.0, "l_ssim": 0.0}
    for ex in batch:
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(ex.delta0.shape)
        x_t = forward_noise(ex.delta0, t, schedule, eps)
        x_T_diag = forward_noise(ex.delta0, schedule.T, schedule, eps)
        sums["l_fwd"] += float(((ex.delta0 - x_T_diag) ** 2).mean())
        d_out, d_cache = denoise_forward(x_t, t, params.denoiser)
        a_out, a_cache = hierarchical_attention_forward(x_t, ex.contexts,
                                                        params.attention)
        eps_hat = d_out + a_out
        sums["l_noise"] += float(((eps - eps_hat) ** 2).mean())
        l_cls, l_ssim, _ = _head_losses(ex.delta0, ex, params, config,
                                        compute_grad, grad_scale=scale)
        sums["l_cls"] += l_cls
        sums["l_ssim"] += l_ssim
        if compute_grad:
            d_eps_hat = -2.0 * (eps - eps_hat) / eps.size
            denoise_backward(scale * d_eps_hat, d_cache, params.denoiser)
            hierarchical_attention_backward(scale * d_eps_hat, a_cache,
                                            params.attention)
    breakdown = {k: v * scale for k, v in sums.items()}
    total = (breakdown["l_noise"] + config.gamma1 * breakdown["l_cls"]
             + config.gamma2 * breakdown["l_ssim"])
    breakdown["total"] = total
    return total, breakdown


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adam_state(params: ModelParams) -> AdamState:
    state = AdamState()
    for name, p in params.named():
        state.m[name] = np.zeros_like(p.value)
        state.v[name] = np.zeros_like(p.value)
    return state


def learning_rate_at(step: int, total_steps: int, config: Config) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then cosine
    annealing to zero. ``step`` is 1-based."""
    warmup = max(1, int(round(config.warmup_fraction * total_steps)))
    if step <= warmup:
        return config.learning_rate * step / warmup
    if total_steps <= warmup:
        return config.learning_rate
    progress = (step - warmup) / (total_steps - warmup)
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scales all gradients so the global norm is at most ``max_norm``;
    returns the pre-clip norm."""
    total = 0.0
    for p in params.tensors():
        total += float((p.grad ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.tensors():
            p.grad *= factor
    return norm


def _adam_update(named, state: AdamState, lr: float, weight_decay: float) -> None:
    for name, p in named:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}; step rejected")
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in named:
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * p.grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * p.grad ** 2
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.value -= lr * (update + weight_decay * p.value)


def adam_step(params: ModelParams, state: AdamState, lr: float,
              config: Config) -> None:
    """Bias-corrected Adam update with decoupled weight decay. A non-finite
    gradient rejects the whole step."""
    _adam_update(params.named(), state, lr, config.weight_decay)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train_model(examples, config: Config, total_steps: int | None = None,
                log_path=None, params: ModelParams | None = None):
    """Optimize the surrogate objective over prepared examples.

    Batches cycle through the example list in a fixed order, so a run is a
    pure function of (examples, config, total_steps). Returns the trained
    parameters and the per-step log records.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("no training examples")
    if total_steps is None:
        total_steps = config.epochs * math.ceil(len(examples) / config.batch_size)
    if params is None:
        params = init_model(config)
    state = init_adam_state(params)
    rng = np.random.default_rng(config.seed + 1)
    records = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(1, total_steps + 1):
            start = (step - 1) * config.batch_size
            batch = [examples[(start + i) % len(examples)]
                     for i in range(config.batch_size)]
            params.zero_grads()
            _, bd = surrogate_loss(batch, params, config, rng, compute_grad=True)
            clip_gradients(params, config.grad_clip)
            lr = learning_rate_at(step, total_steps, config)
            adam_step(params, state, lr, config)
            rec = {"step": step, "lr": lr, "total": bd["total"],
                   "l_fwd": bd["l_fwd"], "l_den_or_surrogate": bd["l_noise"],
                   "l_cls": bd["l_cls"], "l_ssim": bd["l_ssim"]}
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    return params, records


def finetune_chain(examples, params: ModelParams, config: Config,
                   total_steps: int = 200, rng=None):
    """Short fine-tune on the full-sampler objective.

    The surrogate trains the noise predictor on forward-noised states only;
    the reverse chain then visits slightly drifted states the predictor has
    never seen, and small per-step biases compound over T steps. Optimizing
    the real sampled-reconstruction objective for a few hundred steps (on
    small scenes, where backprop through all T steps is affordable) corrects
    exactly that. Returns the per-step records.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("no fine-tune examples")
    rng = np.random.default_rng(config.seed + 3 if rng is None else rng)
    state = init_adam_state(params)
    records = []
    for step in range(1, total_steps + 1):
        ex = examples[(step - 1) % len(examples)]
        params.zero_grads()
        total, bd = unified_loss([ex], params, config, rng, compute_grad=True)
        clip_gradients(params, config.grad_clip)
        lr = learning_rate_at(step, total_steps, config)
        _adam_update(params.named(), state, lr, config.weight_decay)
        records.append({"step": step, "lr": lr, **bd})
    return records


def calibrate_head(examples, params: ModelParams, config: Config,
                   total_steps: int = 400, samples_per_scene: int = 1,
                   rng=None):
    """Head-only fine-tune on real sampler outputs.

    The reverse sampler shrinks small changed regions toward the background
    prior (the MSE-optimal noise predictor under heavy class imbalance), so
    a head fit on clean difference maps sees attenuated signatures at
    inference. This draws full-sampler reconstructions once per scene and
    refits only the head on them; denoiser and attention are untouched.
    """
    rng = np.random.default_rng(config.seed + 2 if rng is None else rng)
    schedule = config.schedule()
    cached = []
    for ex in examples:
        for _ in range(samples_per_scene):
            eps = rng.standard_normal(ex.delta0.shape)
            x_T = forward_noise(ex.delta0, schedule.T, schedule, eps)
            x0, _ = _sample_traced(x_T, schedule, params, ex.contexts, rng,
                                   record=False)
            cached.append(TrainExample(delta0=x0, labels=ex.labels,
                                       contexts=ex.contexts,
                                       ref_channels=ex.ref_channels))
    head = [("head.weight", params.head_weight), ("head.bias", params.head_bias)]
    state = AdamState()
    for name, p in head:
        state.m[name] = np.zeros_like(p.value)
        state.v[name] = np.zeros_like(p.value)
    records = []
    for step in range(1, total_steps + 1):
        ex = cached[(step - 1) % len(cached)]
        params.head_weight.zero_grad()
        params.head_bias.zero_grad()
        l_cls, l_ssim, _ = _head_losses(ex.delta0, ex, params, config,
                                        compute_grad=True)
        lr = learning_rate_at(step, total_steps, config)
        _adam_update(head, state, lr, config.weight_decay)
        records.append({"step": step, "lr": lr, "l_cls": l_cls,
                        "l_ssim": l_ssim})
    return records


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config echo, then named float32 tensors
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CDPX"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, config: Config, path) -> None:
    """Versioned little-endian binary: magic, format version, JSON config
    echo, then each named tensor as (name length, name, rank, dims, float32
    values)."""
    named = params.named()
    config_blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(named)))
        for name, p in named:
            blob = name.encode()
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            fh.write(p.value.astype("<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes for {what} "
                              f"at offset {fh.tell() - len(data)}, got {len(data)}")
    return data


def load_checkpoint(path) -> tuple[ModelParams, Config]:
    """Inverse of :func:`save_checkpoint`; values come back as float64 exact
    upcasts of the stored float32."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at offset 0")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        cfg_len, = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = Config.from_dict(json.loads(_read_exact(fh, cfg_len, "config")))
        n_tensors, = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            name_len, = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode()
            rank, = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 4 * count, f"values of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64) \
                              .reshape(dims)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"trailing bytes at offset {fh.tell() - 1}")
    params = init_model(config)
    expected = {name for name, _ in params.named()}
    if expected != set(tensors):
        raise CheckpointError(f"tensor names mismatch: missing "
                              f"{sorted(expected - set(tensors))}, unexpected "
                              f"{sorted(set(tensors) - expected)}")
    for name, p in params.named():
        if tensors[name].shape != p.value.shape:
            raise CheckpointError(f"shape mismatch for {name}: stored "
                                  f"{tensors[name].shape}, expected {p.value.shape}")
        p.value[...] = tensors[name]
    return params, config
