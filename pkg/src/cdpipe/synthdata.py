"""Deterministic bi-temporal scene generator with oracle detections and
pixel-accurate multi-class ground truth, plus dataset directory I/O.

A scene is a shared textured background (gradient plus noise) with objects
on top. Per scenario, objects appear in frame 2 only, disappear from frame 2,
or a region's color/texture is altered; static objects present in both
frames exercise the cross-frame matching. Each frame then gets its own
illumination gain/bias and sensor noise, which is what makes plain image
differencing imperfect while mask-gated pipelines are unaffected.

Change classes: 1 construction-like rectangle, 2 vegetation-loss-like blob,
3 flooding-like region. Object colors keep a worst-case margin above the
ground-truth tolerance against every background/illumination combination, so
labeled pixels are exactly the rendered changed footprints.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .detect import Detection, DetectionSet, load_detections, save_detections

SCENARIOS = ("appearance", "disappearance", "environmental")
GT_TOLERANCE = 0.02
MAX_SIZE = 64

BASE_RANGE = (0.45, 0.49)
TEXTURE_AMP = 0.05           # shared background texture
FRAME_NOISE_AMP = 0.04       # per-frame sensor noise
GAIN_FIELD_AMP = 0.06        # per-frame smooth illumination field, 1 +- amp
BIAS_RANGE = (-0.01, 0.01)
ENV_TEXTURE_SCALE = 0.06     # how much base texture survives an environmental recolor

# Per-frame nuisances (smooth illumination field, bias, sensor noise) bound
# the worst-case same-content difference by A(bg + obj) + 0.02 + 0.08, and
# every class color keeps a signature-channel contrast above that bound plus
# the GT tolerance, so labeled pixels are exactly the changed footprints.
# Classes 2 and 3 match the gray background on their off channels: their
# frame-to-frame contrast stays near the illumination-mismatch tail (plain
# differencing stays imperfect) while their absolute color norms stay high
# (the refinement sampler preserves strong signatures but washes out faint
# ones) and their hue directions are far apart for the classifier.
DEFAULT_PALETTE = {
    1: {"style": "rect", "color": (0.96, 0.96, 0.94)},
    2: {"style": "blob", "color": (0.47, 0.75, 0.47)},
    3: {"style": "region", "color": (0.47, 0.47, 0.78)},
}
CLASS_DRAW_PROBS = (1 / 3, 1 / 3, 1 / 3)


@dataclass
class Scene:
    i1: np.ndarray
    i2: np.ndarray
    oracle_d1: DetectionSet
    oracle_d2: DetectionSet
    gt_labels: np.ndarray
    scenario: str
    seed: int


def _as_hw(size) -> tuple[int, int]:
    if isinstance(size, int):
        size = (size, size)
    h, w = int(size[0]), int(size[1])
    if h < 8 or w < 8:
        raise ValueError(f"scene size {h}x{w} too small")
    if h > MAX_SIZE or w > MAX_SIZE:
        raise ValueError(f"scene size {h}x{w} exceeds the {MAX_SIZE}x{MAX_SIZE} desk-scale cap")
    return h, w


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    lo, hi = BASE_RANGE
    span = hi - lo
    ys = np.linspace(0.0, 1.0, h)[:, None]
    xs = np.linspace(0.0, 1.0, w)[None, :]
    phase = rng.uniform(0.0, 1.0)
    grad = lo + span * (0.5 * ys + 0.5 * np.abs(((xs + phase) % 1.0) * 2 - 1))
    texture = rng.uniform(-TEXTURE_AMP, TEXTURE_AMP, size=(h, w))
    return np.repeat((grad + texture)[:, :, None], 3, axis=2)


def _smooth_field(rng: np.random.Generator, h: int, w: int, amp: float) -> np.ndarray:
    """Low-frequency multiplicative illumination field: bilinear upsample of
    a coarse random grid, values in 1 +- amp."""
    coarse = rng.uniform(-1.0, 1.0, size=(4, 4))
    ys = np.linspace(0.0, 3.0, h)
    xs = np.linspace(0.0, 3.0, w)
    y0 = np.minimum(ys.astype(int), 2)
    x0 = np.minimum(xs.astype(int), 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    f = (coarse[y0][:, x0] * (1 - fy) * (1 - fx)
         + coarse[y0 + 1][:, x0] * fy * (1 - fx)
         + coarse[y0][:, x0 + 1] * (1 - fy) * fx
         + coarse[y0 + 1][:, x0 + 1] * fy * fx)
    return 1.0 + amp * f


def _rect_mask(rng, h, w) -> np.ndarray:
    side = min(h, w)
    rw = int(rng.integers(max(3, side // 10), max(4, side // 7) + 1))
    rh = int(rng.integers(max(3, side // 10), max(4, side // 7) + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    y0 = int(rng.integers(0, h - rh + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y0 + rh, x0:x0 + rw] = True
    return mask


def _disc(h, w, cy, cx, r) -> np.ndarray:
    ys, xs = np.ogrid[:h, :w]
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r


def _blob_mask(rng, h, w) -> np.ndarray:
    side = min(h, w)
    r = int(rng.integers(max(2, side // 12), max(3, side // 9) + 1))
    r = min(r, (side - 2) // 2)
    cy = int(rng.integers(r, h - r))
    cx = int(rng.integers(r, w - r))
    mask = _disc(h, w, cy, cx, r)
    for _ in range(3):
        dy, dx = rng.integers(-r, r + 1, size=2)
        sy = int(np.clip(cy + dy, r, h - r - 1))
        sx = int(np.clip(cx + dx, r, w - r - 1))
        mask |= _disc(h, w, sy, sx, max(2, r - 1))
    return mask


def _region_mask(rng, h, w) -> np.ndarray:
    side = min(h, w)
    a = int(rng.integers(max(3, side // 14), max(4, side // 9) + 1))
    b = int(rng.integers(max(3, side // 14), max(4, side // 9) + 1))
    a = min(a, (h - 2) // 2)
    b = min(b, (w - 2) // 2)
    cy = int(rng.integers(a, h - a))
    cx = int(rng.integers(b, w - b))
    ys, xs = np.ogrid[:h, :w]
    return ((ys - cy) / a) ** 2 + ((xs - cx) / b) ** 2 <= 1.0


_STYLE_MASKS = {"rect": _rect_mask, "blob": _blob_mask, "region": _region_mask}


def _place(rng, h, w, style: str, occupied: np.ndarray, tries: int = 40):
    """Rejection-sample a footprint disjoint from occupied pixels."""
    for _ in range(tries):
        mask = _STYLE_MASKS[style](rng, h, w)
        if not (mask & occupied).any():
            occupied |= mask
            return mask
    return None


def _mask_detection(mask: np.ndarray, class_label: int) -> Detection:
    ys, xs = np.nonzero(mask)
    box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return Detection(box=box, class_label=class_label, score=1.0,
                     instance_mask=mask.astype(np.float64))


def generate_scene(seed: int, size=48, scenario: str = "appearance",
                   palette: dict | None = None) -> Scene:
    """Render one bi-temporal scene. Pure function of its arguments."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}, expected one of {SCENARIOS}")
    palette = palette if palette is not None else DEFAULT_PALETTE
    h, w = _as_hw(size)
    rng = np.random.default_rng(seed)

    base = _background(rng, h, w)
    content1 = base.copy()
    content2 = base.copy()
    occupied = np.zeros((h, w), dtype=bool)
    dets1: list[Detection] = []
    dets2: list[Detection] = []
    changed: list[tuple[np.ndarray, int]] = []

    if scenario == "environmental":
        cls = int(rng.choice([2, 3]))
        mask = _place(rng, h, w, "region", occupied)
        color = np.asarray(palette[cls]["color"])
        mid = (BASE_RANGE[0] + BASE_RANGE[1]) / 2.0
        content2[mask] = color[None, :] + ENV_TEXTURE_SCALE * (base[mask] - mid)
        dets2.append(_mask_detection(mask, cls))
        changed.append((mask, cls))
    else:
        cls = 1 + int(rng.choice(len(palette), p=CLASS_DRAW_PROBS))
        style = palette[cls]["style"]
        mask = _place(rng, h, w, style, occupied)
        color = np.asarray(palette[cls]["color"])
        det = _mask_detection(mask, cls)
        if scenario == "appearance":
            content2[mask] = color
            dets2.append(det)
        else:
            content1[mask] = color
            dets1.append(det)
        changed.append((mask, cls))

    # static objects live in both frames and must be filtered by matching
    n_static = int(rng.integers(1, 3))
    for _ in range(n_static):
        cls = int(rng.integers(1, len(palette) + 1))
        style = palette[cls]["style"]
        mask = _place(rng, h, w, style, occupied)
        if mask is None:
            continue
        color = np.asarray(palette[cls]["color"])
        content1[mask] = color
        content2[mask] = color
        det = _mask_detection(mask, cls)
        dets1.append(det)
        dets2.append(Detection(box=det.box, class_label=det.class_label,
                               score=det.score, instance_mask=det.instance_mask))

    frames = []
    for content in (content1, content2):
        field = _smooth_field(rng, h, w, GAIN_FIELD_AMP)
        bias = rng.uniform(*BIAS_RANGE)
        noise = rng.uniform(-FRAME_NOISE_AMP, FRAME_NOISE_AMP, size=(h, w, 1))
        frames.append(np.clip(field[:, :, None] * content + bias + noise, 0.0, 1.0))
    i1, i2 = frames

    diff = np.abs(i1 - i2).max(axis=2)
    gt = np.zeros((h, w), dtype=np.int64)
    for mask, cls in changed:
        gt[mask & (diff > GT_TOLERANCE)] = cls

    return Scene(i1=i1, i2=i2,
                 oracle_d1=DetectionSet(1, dets1), oracle_d2=DetectionSet(2, dets2),
                 gt_labels=gt, scenario=scenario, seed=seed)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


def _split_counts(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainders = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % len(counts)]] += 1
    return counts


def generate_dataset(seed: int, n_scenes: int, split_fractions=(0.6, 0.2, 0.2),
                     size=48, palette: dict | None = None) -> dict[str, list[Scene]]:
    """Scenario-balanced train/val/test scene lists with disjoint per-scene
    seeds derived from the master seed."""
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {split_fractions}")
    if n_scenes < len(SCENARIOS):
        raise ValueError(f"need at least {len(SCENARIOS)} scenes, got {n_scenes}")
    counts = _split_counts(n_scenes, split_fractions)
    splits: dict[str, list[Scene]] = {}
    index = 0
    for name, count in zip(SPLIT_NAMES, counts):
        scenes = []
        for i in range(count):
            scenario = SCENARIOS[i % len(SCENARIOS)]
            scene_seed = seed * 100003 + index
            scenes.append(generate_scene(scene_seed, size=size, scenario=scenario,
                                         palette=palette))
            index += 1
        splits[name] = scenes
    return splits


def perturb_detections(oracle: DetectionSet, seed: int, jitter: int = 0,
                       drop_rate: float = 0.0, spurious_rate: float = 0.0,
                       height: int = MAX_SIZE, width: int = MAX_SIZE) -> DetectionSet:
    """Degrade an oracle detection set: jitter box corners by up to
    ``jitter`` pixels, drop detections at ``drop_rate``, and add spurious
    low-score boxes, one Bernoulli trial per 16x16 image tile at
    ``spurious_rate``. Jittered and spurious boxes carry no instance mask."""
    if not (0.0 <= drop_rate <= 1.0 and 0.0 <= spurious_rate <= 1.0):
        raise ValueError("rates must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out: list[Detection] = []
    for det in oracle.detections:
        if drop_rate > 0.0 and rng.random() < drop_rate:
            continue
        if jitter == 0:
            out.append(det)
            continue
        x0, y0, x1, y1 = det.box
        dx0, dy0, dx1, dy1 = rng.integers(-jitter, jitter + 1, size=4)
        nx0 = int(np.clip(x0 + dx0, 0, width - 1))
        ny0 = int(np.clip(y0 + dy0, 0, height - 1))
        nx1 = int(np.clip(x1 + dx1, nx0 + 1, width))
        ny1 = int(np.clip(y1 + dy1, ny0 + 1, height))
        score = float(det.score * rng.uniform(0.85, 1.0))
        out.append(Detection(box=(nx0, ny0, nx1, ny1),
                             class_label=det.class_label, score=score))
    if spurious_rate > 0.0:
        budget = max(1, (height * width) // 256)
        for _ in range(budget):
            if rng.random() >= spurious_rate:
                continue
            side = max(2, min(height, width) // 8)
            bw = int(rng.integers(2, side + 1))
            bh = int(rng.integers(2, side + 1))
            x0 = int(rng.integers(0, width - bw + 1))
            y0 = int(rng.integers(0, height - bh + 1))
            out.append(Detection(box=(x0, y0, x0 + bw, y0 + bh),
                                 class_label=int(rng.integers(1, 4)),
                                 score=float(rng.uniform(0.3, 0.69))))
    return DetectionSet(oracle.frame_id, out)


# ---------------------------------------------------------------------------
# serialization: scene_<id>/{i1,i2,gt}.png + {d1,d2,meta}.json + manifest
# ---------------------------------------------------------------------------

def save_image_png(path, image: np.ndarray) -> None:
    data = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((data * 255.0).round().astype(np.uint8), mode="RGB").save(path)


def load_image_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_label_png(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels).astype(np.uint8), mode="L").save(path)


def load_label_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.int64)


def save_scene(scene: Scene, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_image_png(os.path.join(directory, "i1.png"), scene.i1)
    save_image_png(os.path.join(directory, "i2.png"), scene.i2)
    save_label_png(os.path.join(directory, "gt.png"), scene.gt_labels)
    save_detections(scene.oracle_d1, os.path.join(directory, "d1.json"))
    save_detections(scene.oracle_d2, os.path.join(directory, "d2.json"))
    meta = {"scenario": scene.scenario, "seed": scene.seed,
            "size": list(scene.gt_labels.shape),
            "palette": {str(k): {"style": v["style"], "color": list(v["color"])}
                        for k, v in DEFAULT_PALETTE.items()}}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh)


def load_scene(directory) -> Scene:
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    h, w = meta["size"]
    return Scene(
        i1=load_image_png(os.path.join(directory, "i1.png")),
        i2=load_image_png(os.path.join(directory, "i2.png")),
        oracle_d1=load_detections(os.path.join(directory, "d1.json"), h, w),
        oracle_d2=load_detections(os.path.join(directory, "d2.json"), h, w),
        gt_labels=load_label_png(os.path.join(directory, "gt.png")),
        scenario=meta["scenario"], seed=meta["seed"],
    )


def save_dataset(splits: dict[str, list[Scene]], root, master_seed: int | None = None) -> None:
    os.makedirs(root, exist_ok=True)
    manifest = {"master_seed": master_seed, "splits": {}}
    index = 0
    for name in SPLIT_NAMES:
        ids = []
        for scene in splits.get(name, []):
            scene_id = f"scene_{index:04d}"
            save_scene(scene, os.path.join(root, scene_id))
            ids.append(scene_id)
            index += 1
        manifest["splits"][name] = ids
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)


def load_split(root, split: str) -> list[Scene]:
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    if split not in manifest["splits"]:
        raise ValueError(f"split {split!r} not in manifest")
    return [load_scene(os.path.join(root, sid)) for sid in manifest["splits"][split]]


def manifest_hash(root) -> str:
    with open(os.path.join(root, "manifest.json"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
