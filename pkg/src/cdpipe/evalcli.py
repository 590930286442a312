"""Segmentation metrics, the classical differencing + Otsu baseline, the
end-to-end inference pipeline, and the command line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
import time
from dataclasses import dataclass

import numpy as np

from .classify import argmax_labels, class_head
from .detect import (DetectionSet, blob_detect, load_detections, match_unique,
                     rasterize_masks)
from .denoiser import denoise
from .diffuse import (build_contexts, forward_noise, hierarchical_attention,
                      initial_difference, sample)
from .errors import DataError, NumericError
from .perceptual import fuse, ssim_map
from .synthdata import (generate_dataset, load_image_png, load_split,
                        manifest_hash, save_dataset, save_image_png,
                        save_label_png)
from .train import Config, ModelParams, load_checkpoint, prepare_example


# ---------------------------------------------------------------------------
# confusion counts and derived metrics
# ---------------------------------------------------------------------------

def confusion(preds, gts, n_classes: int) -> np.ndarray:
    """Pixel counts indexed [ground_truth][prediction] over one or more
    label-map pairs."""
    if isinstance(preds, np.ndarray):
        preds, gts = [preds], [gts]
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for pred, gt in zip(preds, gts, strict=True):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        if pred.min() < 0 or pred.max() >= n_classes or gt.min() < 0 or gt.max() >= n_classes:
            raise ValueError(f"labels outside [0, {n_classes - 1}]")
        joint = n_classes * gt.reshape(-1) + pred.reshape(-1)
        counts += np.bincount(joint, minlength=n_classes * n_classes) \
                    .reshape(n_classes, n_classes)
    return counts


def _safe_ratio(num: float, denom: float, absent: bool) -> float:
    if denom == 0:
        return 1.0 if absent else 0.0
    return num / denom


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class: dict[int, dict[str, float]]
    macro: dict[str, float]

    def to_dict(self) -> dict:
        return {"confusion": self.confusion.tolist(),
                "per_class": {str(k): v for k, v in self.per_class.items()},
                "macro": self.macro}


def metrics_from_confusion(counts: np.ndarray) -> MetricsReport:
    """Per-class precision/recall/F1/IoU plus their unweighted means over the
    change classes (class 0, no-change, is excluded from the macro).

    A class absent from both prediction and ground truth scores 1.0 on every
    metric; 0/0 against a present counterpart scores 0.0.
    """
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ValueError(f"expected a square count matrix, got {counts.shape}")
    n = counts.shape[0]
    per_class = {}
    for c in range(n):
        tp = float(counts[c, c])
        gt_total = float(counts[c, :].sum())
        pred_total = float(counts[:, c].sum())
        fp = pred_total - tp
        fn = gt_total - tp
        absent = gt_total == 0 and pred_total == 0
        p = _safe_ratio(tp, tp + fp, absent)
        r = _safe_ratio(tp, tp + fn, absent)
        f1 = _safe_ratio(2 * p * r, p + r, absent)
        jac = _safe_ratio(tp, tp + fp + fn, absent)
        per_class[c] = {"precision": p, "recall": r, "f1": f1, "iou": jac}
    change_classes = range(1, n)
    macro = {metric: float(np.mean([per_class[c][metric] for c in change_classes]))
             for metric in ("precision", "recall", "f1", "iou")}
    return MetricsReport(confusion=counts, per_class=per_class, macro=macro)


def collapse_binary(labels: np.ndarray) -> np.ndarray:
    """Fold all change classes into a single change label."""
    return (np.asarray(labels) > 0).astype(np.int64)


# ---------------------------------------------------------------------------
# Otsu threshold and the differencing baseline
# ---------------------------------------------------------------------------

N_BINS = 256


def otsu_threshold(values: np.ndarray) -> float:
    """Histogram threshold maximizing between-class variance over 256 uniform
    bins of [0, 1]; ties resolve to the lowest cut. The returned threshold is
    the upper edge of the last background bin, so strict ``value > threshold``
    reproduces the histogram split. A constant image yields its own level
    (everything below threshold)."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    bins = np.clip((v * N_BINS).astype(np.int64), 0, N_BINS - 1)
    hist = np.bincount(bins, minlength=N_BINS).astype(np.int64)
    idx = np.arange(N_BINS, dtype=np.int64)
    cum_n = np.cumsum(hist)
    cum_s = np.cumsum(hist * idx)
    total_n = cum_n[-1]
    total_s = cum_s[-1]
    best_k, best_var = None, -1.0
    for k in range(N_BINS - 1):
        n0 = cum_n[k]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = cum_s[k] / n0
        mu1 = (total_s - cum_s[k]) / n1
        var = n0 * n1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_k = var, k
    if best_k is None:
        best_k = int(bins[0]) if v.size else 0
    return (best_k + 1) / N_BINS


def baseline_differencing(i1: np.ndarray, i2: np.ndarray) -> np.ndarray:
    """Classical change map: per-pixel euclidean channel difference, Otsu
    threshold, strict greater-than to a binary label map."""
    i1, i2 = np.asarray(i1), np.asarray(i2)
    if i1.shape != i2.shape:
        raise ValueError(f"shape mismatch: {i1.shape} vs {i2.shape}")
    mag = np.sqrt(((i1 - i2) ** 2).sum(axis=2)) / np.sqrt(i1.shape[2])
    return (mag > otsu_threshold(mag)).astype(np.int64)


# ---------------------------------------------------------------------------
# end-to-end inference
# ---------------------------------------------------------------------------

@dataclass
class InferResult:
    prob_map: np.ndarray      # fused per-pixel class probabilities
    labels: np.ndarray
    delta0: np.ndarray
    delta_star: np.ndarray


def _model_eps_fn(params: ModelParams, contexts):
    def eps_fn(x, t):
        return denoise(x, t, params.denoiser) \
            + hierarchical_attention(x, contexts, params.attention)
    return eps_fn


def infer(i1: np.ndarray, i2: np.ndarray, d1: DetectionSet, d2: DetectionSet,
          params: ModelParams, config: Config, seed: int = 0,
          masks_override: tuple[np.ndarray, np.ndarray] | None = None,
          noising_mode: str = "ddpm") -> InferResult:
    """Full pipeline: match detections, rasterize unique-object masks, build
    the masked difference, noise it, run the reverse sampler, classify, and
    fuse with per-class structural similarity against the initial difference.

    ``masks_override`` substitutes the filtering stage (used to measure what
    the filter buys); everything downstream is unchanged. ``noising_mode``
    selects how the initial map is noised (``ddpm`` closed form, or the
    single-shot ``additive`` alternative).
    """
    h, w = np.asarray(i1).shape[:2]
    if masks_override is not None:
        m1, m2 = masks_override
    else:
        u1, u2 = match_unique(d1, d2, config.tau_iou, config.score_min)
        m1 = rasterize_masks(u1, h, w)
        m2 = rasterize_masks(u2, h, w)
    delta0 = initial_difference(i1, i2, m1, m2)
    contexts = build_contexts(i1, i2, m1, m2, config.pool_factor)
    schedule = config.schedule()
    rng = np.random.default_rng(seed)
    x_t = forward_noise(delta0, schedule.T, schedule,
                        rng.standard_normal(delta0.shape), mode=noising_mode)
    delta_star = sample(x_t, schedule, _model_eps_fn(params, contexts), rng)
    probs = class_head(delta_star, params.head_weight, params.head_bias)
    ref = delta0.mean(axis=2)
    peak = ref.max()
    if peak > 0:
        ref = ref / peak
    n_channels = probs.shape[-1]
    smaps = np.stack([ssim_map(probs[..., c], ref, config.window, config.c1, config.c2)
                      for c in range(n_channels)], axis=-1)
    fused = fuse(probs, smaps, config.lam)
    labels = argmax_labels(fused)
    if not np.all(np.isfinite(fused)):
        raise NumericError("non-finite values in fused probability map")
    return InferResult(prob_map=fused, labels=labels, delta0=delta0,
                       delta_star=delta_star)


def evaluate_split(scenes, params: ModelParams, config: Config,
                   use_oracle_detections: bool = True) -> dict:
    """Run inference over scenes and score multi-class plus binary-collapsed
    confusion against ground truth."""
    n = config.n_classes + 1
    counts = np.zeros((n, n), dtype=np.int64)
    counts_bin = np.zeros((2, 2), dtype=np.int64)
    for scene in scenes:
        result = infer(scene.i1, scene.i2, scene.oracle_d1, scene.oracle_d2,
                       params, config, seed=scene.seed)
        counts += confusion(result.labels, scene.gt_labels, n)
        counts_bin += confusion(collapse_binary(result.labels),
                                collapse_binary(scene.gt_labels), 2)
    return {"confusion": counts, "binary_confusion": counts_bin}


def evaluate_baseline(scenes) -> dict:
    counts_bin = np.zeros((2, 2), dtype=np.int64)
    for scene in scenes:
        pred = baseline_differencing(scene.i1, scene.i2)
        counts_bin += confusion(pred, collapse_binary(scene.gt_labels), 2)
    return {"binary_confusion": counts_bin}


def _report_payload(config: Config | None, data_hash: str, split: str,
                    method: str, counts: np.ndarray | None,
                    counts_bin: np.ndarray, runtime: float, notes=None) -> dict:
    payload = {
        "config_echo": config.to_dict() if config is not None else None,
        "manifest_hash": data_hash,
        "split": split,
        "method": method,
        "runtime_seconds": runtime,
    }
    if counts is not None:
        report = metrics_from_confusion(counts)
        payload["confusion"] = counts.tolist()
        payload["per_class"] = {str(k): v for k, v in report.per_class.items()}
        payload["macro"] = report.macro
    binary = metrics_from_confusion(counts_bin)
    payload["binary_collapsed"] = {
        "confusion": counts_bin.tolist(),
        **{k: v for k, v in binary.per_class[1].items()},
    }
    if notes:
        payload["notes"] = notes
    return payload


# ---------------------------------------------------------------------------
# float dumps for exact inspection
# ---------------------------------------------------------------------------

RAW_MAGIC = b"CDF32"


def save_float_raw(path, array: np.ndarray) -> None:
    """Headered little-endian float32 dump: magic, rank, dims, values."""
    arr = np.asarray(array)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def load_float_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != RAW_MAGIC:
            raise DataError(f"bad raw-dump magic {magic!r}")
        rank, = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        return np.frombuffer(fh.read(), dtype="<f4").reshape(dims).astype(np.float64)


# ---------------------------------------------------------------------------
# command line interface
# ---------------------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise _UsageError(f"bad size {text!r}, expected HxW") from exc


def _load_config(path, overrides: dict | None = None) -> Config:
    base = {}
    if path is not None:
        try:
            with open(path) as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
    base.update(overrides or {})
    try:
        return Config.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad config: {exc}") from exc


def _cmd_generate(args) -> int:
    size = _parse_size(args.size)
    splits = generate_dataset(args.seed, args.scenes, size=size)
    save_dataset(splits, args.out, master_seed=args.seed)
    counts = {k: len(v) for k, v in splits.items()}
    print(f"wrote {sum(counts.values())} scenes to {args.out} {counts}")
    return 0


def _cmd_train(args) -> int:
    from .synthdata import SCENARIOS, generate_scene
    from .train import (calibrate_head, finetune_chain,
                        inverse_frequency_weights, save_checkpoint,
                        train_model)
    config = _load_config(args.config,
                          {} if args.epochs is None else {"epochs": args.epochs})
    scenes = load_split(args.data, "train")
    examples = [prepare_example(s, config) for s in scenes]
    if args.class_balance and config.class_weights is None:
        weights = inverse_frequency_weights(examples, config.n_classes + 1)
        config = Config.from_dict({**config.to_dict(), "class_weights": weights})
    params, records = train_model(examples, config, total_steps=args.steps,
                                  log_path=args.log)
    if args.chain_finetune > 0:
        # full-sampler backprop is quadratic in pixels, so this phase runs on
        # freshly generated small scenes seeded from the config
        small = [generate_scene(config.seed * 99991 + i, size=args.chain_size,
                                scenario=SCENARIOS[i % 3]) for i in range(24)]
        ft_config = Config.from_dict({**config.to_dict(),
                                      "learning_rate": config.learning_rate * 0.3})
        ft_examples = [prepare_example(s, ft_config) for s in small]
        finetune_chain(ft_examples, params, ft_config,
                       total_steps=args.chain_finetune)
    if args.calibrate > 0:
        calibrate_head(examples, params, config, total_steps=args.calibrate)
    save_checkpoint(params, config, args.out)
    print(f"trained {len(records)} steps, final total loss "
          f"{records[-1]['total']:.6f}, checkpoint at {args.out}")
    return 0


def _load_detections_or_blob(path, image, frame_id: int):
    if path is not None:
        h, w = image.shape[:2]
        return load_detections(path, h, w), False
    return blob_detect(image, intensity_threshold=0.7, min_area=4,
                       frame_id=frame_id), True


def _cmd_infer(args) -> int:
    params, config = load_checkpoint(args.ckpt)
    i1 = load_image_png(args.i1)
    i2 = load_image_png(args.i2)
    if i1.shape != i2.shape:
        raise DataError(f"frame shapes differ: {i1.shape} vs {i2.shape}")
    d1, fallback1 = _load_detections_or_blob(args.d1, i1, 1)
    d2, fallback2 = _load_detections_or_blob(args.d2, i2, 2)
    result = infer(i1, i2, d1, d2, params, config, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_image_png(os.path.join(args.out, "delta0.png"), result.delta0)
    save_image_png(os.path.join(args.out, "delta_star.png"),
                   np.clip(result.delta_star, 0.0, 1.0))
    save_label_png(os.path.join(args.out, "labels.png"), result.labels)
    save_float_raw(os.path.join(args.out, "delta0.f32"), result.delta0)
    save_float_raw(os.path.join(args.out, "delta_star.f32"), result.delta_star)
    save_float_raw(os.path.join(args.out, "probs.f32"), result.prob_map)
    for c in range(result.prob_map.shape[-1]):
        plane = result.prob_map[..., c]
        save_image_png(os.path.join(args.out, f"prob_class{c}.png"),
                       np.repeat(plane[..., None], 3, axis=2))
    report = {
        "config_echo": config.to_dict(),
        "blob_detector_fallback": {"frame1": fallback1, "frame2": fallback2},
        "label_histogram": {str(c): int((result.labels == c).sum())
                            for c in range(config.n_classes + 1)},
        "seed": args.seed,
    }
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"wrote inference artifacts to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    params, config = load_checkpoint(args.ckpt)
    scenes = load_split(args.data, args.split)
    start = time.perf_counter()
    scored = evaluate_split(scenes, params, config)
    runtime = time.perf_counter() - start
    payload = _report_payload(config, manifest_hash(args.data), args.split,
                              "pipeline", scored["confusion"],
                              scored["binary_confusion"], runtime,
                              notes={"n_scenes": len(scenes)})
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"pipeline macro F1 {payload['macro']['f1']:.4f}, "
          f"binary F1 {payload['binary_collapsed']['f1']:.4f} -> {args.out}")
    return 0


def _cmd_baseline(args) -> int:
    scenes = load_split(args.data, args.split)
    start = time.perf_counter()
    scored = evaluate_baseline(scenes)
    runtime = time.perf_counter() - start
    payload = _report_payload(None, manifest_hash(args.data), args.split,
                              "baseline_differencing", None,
                              scored["binary_confusion"], runtime,
                              notes={"n_scenes": len(scenes)})
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"baseline binary F1 {payload['binary_collapsed']['f1']:.4f} -> {args.out}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="cdpipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="48x48")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--class-balance", action="store_true",
                   help="weight the classification loss by inverse class frequency")
    p.add_argument("--calibrate", type=int, default=0,
                   help="head-only fine-tune steps on real sampler outputs")
    p.add_argument("--chain-finetune", type=int, default=0,
                   help="full-sampler fine-tune steps on small generated scenes")
    p.add_argument("--chain-size", type=int, default=16,
                   help="scene size for the full-sampler fine-tune phase")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run the pipeline on one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--i1", required=True)
    p.add_argument("--i2", required=True)
    p.add_argument("--d1", default=None)
    p.add_argument("--d2", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="score the pipeline on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("baseline", help="score image differencing + Otsu")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_baseline)
    return parser


def cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli(sys.argv[1:]))
