"""Object-level filtering: cross-frame IoU matching, unique-object masks, and
a connected-component blob detector used when no external detections exist.

Boxes are half-open integer pixel ranges [x_min, x_max) x [y_min, y_max), so
areas and intersections are exact integer arithmetic. Detections may carry a
full-frame instance mask whose true pixels all lie inside the box; masks win
over boxes when rasterizing.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

Box = tuple[int, int, int, int]


@dataclass
class Detection:
    box: Box
    class_label: int
    score: float
    instance_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.instance_mask is not None:
            m = np.asarray(self.instance_mask)
            inside = m[y0:y1, x0:x1].sum()
            if inside != m.sum():
                raise ValueError("instance mask has true pixels outside the box")


@dataclass
class DetectionSet:
    frame_id: int
    detections: list[Detection] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.frame_id not in (1, 2):
            raise ValueError(f"frame_id must be 1 or 2, got {self.frame_id}")

    def __len__(self) -> int:
        return len(self.detections)


def box_area(b: Box) -> int:
    return (b[2] - b[0]) * (b[3] - b[1])


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two half-open boxes. Symmetric, 1 iff
    identical, 0 iff disjoint."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = box_area(a) + box_area(b) - inter
    return inter / union


def match_unique(d1: DetectionSet, d2: DetectionSet, tau_iou: float = 0.5,
                 score_min: float = 0.7) -> tuple[DetectionSet, DetectionSet]:
    """Split two frames' detections into unique (unmatched) sets.

    Detections scoring below ``score_min`` are discarded up front. A pair can
    match only when class labels agree and IoU is strictly above ``tau_iou``;
    matching is one-to-one and greedy by descending IoU, so raising the
    threshold only ever removes matches from the tail. Survivors that found
    no counterpart are returned per frame.
    """
    if not 0.0 <= tau_iou <= 1.0:
        raise ValueError(f"tau_iou must lie in [0, 1], got {tau_iou}")
    keep1 = [d for d in d1.detections if d.score >= score_min]
    keep2 = [d for d in d2.detections if d.score >= score_min]

    candidates = []
    for i, da in enumerate(keep1):
        for j, db in enumerate(keep2):
            if da.class_label != db.class_label:
                continue
            v = iou(da.box, db.box)
            if v > tau_iou:
                candidates.append((i, j, v))
    # tie-break key is invariant under swapping the frames, which keeps
    # match_unique symmetric in its arguments
    candidates.sort(key=lambda c: (-c[2], c[0] + c[1], min(c[0], c[1])))

    matched1: set[int] = set()
    matched2: set[int] = set()
    for i, j, _ in candidates:
        if i in matched1 or j in matched2:
            continue
        matched1.add(i)
        matched2.add(j)

    unique1 = [d for i, d in enumerate(keep1) if i not in matched1]
    unique2 = [d for j, d in enumerate(keep2) if j not in matched2]
    return (DetectionSet(d1.frame_id, unique1), DetectionSet(d2.frame_id, unique2))


def rasterize_masks(unique: DetectionSet, height: int, width: int) -> np.ndarray:
    """Union of the unique detections' footprints as a {0,1} float grid.

    Instance masks are used where present, filled boxes otherwise; overlaps
    saturate at 1.
    """
    mask = np.zeros((height, width), dtype=np.float64)
    for det in unique.detections:
        x0, y0, x1, y1 = det.box
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            raise ValueError(f"box {det.box} outside {height}x{width} image")
        if det.instance_mask is not None:
            m = np.asarray(det.instance_mask, dtype=np.float64)
            if m.shape != (height, width):
                raise ValueError(f"instance mask shape {m.shape} does not match "
                                 f"image {height}x{width}")
            np.maximum(mask, m, out=mask)
        else:
            mask[y0:y1, x0:x1] = 1.0
    return mask


# ---------------------------------------------------------------------------
# blob detector (stand-in for a learned instance detector)
# ---------------------------------------------------------------------------

def _connected_components(above: np.ndarray) -> list[np.ndarray]:
    """4-connected components of a boolean grid, as index arrays."""
    h, w = above.shape
    seen = np.zeros_like(above, dtype=bool)
    components = []
    for sy, sx in zip(*np.nonzero(above)):
        if seen[sy, sx]:
            continue
        queue = deque([(sy, sx)])
        seen[sy, sx] = True
        pixels = []
        while queue:
            y, x = queue.popleft()
            pixels.append((y, x))
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and above[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
        components.append(np.array(pixels))
    return components


def _dominant_color_bin(mean_rgb: np.ndarray) -> int:
    """Crude color binning: near-neutral and red-ish map to 1, green-dominant
    to 2, blue-dominant to 3."""
    r, g, b = mean_rgb
    if max(r, g, b) - min(r, g, b) < 0.15:
        return 1
    return {0: 1, 1: 2, 2: 3}[int(np.argmax(mean_rgb))]


def blob_detect(image: np.ndarray, intensity_threshold: float = 0.5,
                min_area: int = 1, frame_id: int = 1) -> DetectionSet:
    """Connected components (4-connectivity) of bright pixels as detections.

    Each component of area >= ``min_area`` becomes a detection with a tight
    half-open bounding box, the component as instance mask, class set to the
    component's dominant color bin, and score 1.0.
    """
    intensity = np.asarray(image).mean(axis=2)
    above = intensity > intensity_threshold
    h, w = above.shape
    detections = []
    for pixels in _connected_components(above):
        if len(pixels) < min_area:
            continue
        ys, xs = pixels[:, 0], pixels[:, 1]
        box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        mask = np.zeros((h, w), dtype=np.float64)
        mask[ys, xs] = 1.0
        mean_rgb = np.asarray(image)[ys, xs].mean(axis=0)
        detections.append(Detection(box=box, class_label=_dominant_color_bin(mean_rgb),
                                    score=1.0, instance_mask=mask))
    return DetectionSet(frame_id, detections)


# ---------------------------------------------------------------------------
# JSON wire format
# ---------------------------------------------------------------------------

def mask_to_rle(mask: np.ndarray) -> str:
    """Row-major run-length string, alternating run lengths starting with
    zeros (the leading zero-run may be '0')."""
    flat = np.asarray(mask).reshape(-1).astype(np.int64)
    runs = []
    current, count = 0, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return " ".join(str(r) for r in runs)


def rle_to_mask(rle: str, height: int, width: int) -> np.ndarray:
    runs = [int(tok) for tok in rle.split()] if rle.strip() else []
    flat = np.zeros(height * width, dtype=np.float64)
    pos, value = 0, 0
    for run in runs:
        if value:
            flat[pos:pos + run] = 1.0
        pos += run
        value = 1 - value
    if pos != height * width:
        raise ValueError(f"run lengths sum to {pos}, expected {height * width}")
    return flat.reshape(height, width)


def detection_set_to_json(dset: DetectionSet) -> dict:
    out = {"frame": dset.frame_id, "detections": []}
    for d in dset.detections:
        rec = {"box": list(d.box), "class": d.class_label, "score": d.score}
        if d.instance_mask is not None:
            rec["mask_rle"] = mask_to_rle(d.instance_mask)
        out["detections"].append(rec)
    return out


def detection_set_from_json(obj: dict, height: int, width: int) -> DetectionSet:
    detections = []
    for rec in obj["detections"]:
        mask = None
        if "mask_rle" in rec:
            mask = rle_to_mask(rec["mask_rle"], height, width)
        detections.append(Detection(box=tuple(int(v) for v in rec["box"]),
                                    class_label=int(rec["class"]),
                                    score=float(rec["score"]),
                                    instance_mask=mask))
    return DetectionSet(int(obj["frame"]), detections)


def save_detections(dset: DetectionSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(detection_set_to_json(dset), fh)


def load_detections(path, height: int, width: int) -> DetectionSet:
    with open(path) as fh:
        return detection_set_from_json(json.load(fh), height, width)
