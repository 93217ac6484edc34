"""Raw detector output -> final detections.

The raw tensor carries one column per candidate: box center x/y, width,
height (network-input pixels) followed by one score per category. Decoding
picks the best-scoring category per candidate, drops candidates under the
confidence threshold, converts boxes to corner format, suppresses
overlapping boxes greedily and finally maps the survivors back into
full-frame pixel coordinates using the crop offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, ShapeError
from .preprocess import CropRect

NETWORK_INPUT = "network_input"
FULL_FRAME = "full_frame"


@dataclass(frozen=True)
class Detection:
    """One detected object: corner-format box, category id, score.

    bbox is (x_left, y_top, width, height) in the pixel space named by
    `space` (network_input or full_frame).
    """

    bbox: tuple[float, float, float, float]
    category: int
    score: float
    space: str = NETWORK_INPUT

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"bbox sides must be positive, got w={w}, h={h}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.category < 0:
            raise ValueError(f"category must be >= 0, got {self.category}")


@dataclass(frozen=True)
class DecodeConfig:
    confidence_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    max_detections: int = 100
    class_aware_nms: bool = True

    def __post_init__(self):
        for name in ("confidence_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


@dataclass(frozen=True)
class RawOutput:
    """Undecoded prediction tensor plus the declared category count.

    Accepts either (batch, 4+C, N) or (batch, N, 4+C); the orientation is
    resolved at construction by matching 4+C against the declared C and is
    an error when both axes match.
    """

    values: np.ndarray
    category_count: int
    attrs_axis_first: bool = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ShapeError(f"raw output must be 3-d, got shape {v.shape}")
        if self.category_count < 1:
            raise ShapeError("category count must be >= 1")
        width = 4 + self.category_count
        first, second = v.shape[1], v.shape[2]
        if first == width and second == width:
            raise ShapeError(
                f"both output axes are {width}; orientation is ambiguous, "
                "declare the candidate axis explicitly"
            )
        if first == width:
            attrs_first = True
        elif second == width:
            attrs_first = False
        else:
            raise ShapeError(
                f"no output axis matches 4+C={width} for shape {v.shape}"
            )
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "attrs_axis_first", attrs_first)

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    def candidates(self, batch_index: int = 0) -> np.ndarray:
        """Slice as (4+C, N) regardless of stored orientation."""
        s = self.values[batch_index]
        return s if self.attrs_axis_first else s.T


def decode_raw(raw: RawOutput, config: DecodeConfig, batch_index: int = 0) -> list[Detection]:
    """Per-candidate argmax over category scores, threshold, center->corner.

    Returns pre-NMS detections in network-input space, in candidate order.
    """
    cols = raw.candidates(batch_index)
    scores = cols[4:]
    if np.isnan(scores).any():
        raise DataError("NaN in category scores")
    best_cat = np.argmax(scores, axis=0)
    best_score = scores[best_cat, np.arange(scores.shape[1])]
    keep = best_score >= config.confidence_threshold
    dets = []
    for i in np.nonzero(keep)[0]:
        cx, cy, w, h = (float(cols[k, i]) for k in range(4))
        dets.append(
            Detection(
                bbox=(cx - w / 2.0, cy - h / 2.0, w, h),
                category=int(best_cat[i]),
                score=float(best_score[i]),
                space=NETWORK_INPUT,
            )
        )
    return dets


def decode_batch(raw: RawOutput, config: DecodeConfig) -> list[list[Detection]]:
    """decode_raw applied to every batch slice, in slice order."""
    return [decode_raw(raw, config, i) for i in range(raw.batch)]


def iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    """Intersection over union of two corner-format boxes; 0 when disjoint."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    union = aw * ah + bw * bh - inter
    return inter / union


def nms(dets: list[Detection], iou_threshold: float, class_aware: bool = True) -> list[Detection]:
    """Greedy non-maximum suppression.

    Candidates are visited in descending score order (ties broken by input
    index, so the result is deterministic); each kept box removes remaining
    boxes overlapping it with IoU strictly above the threshold, considering
    only same-category boxes when class_aware. Output is score-descending.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    survivors: list[Detection] = []
    suppressed = [False] * len(dets)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        top = dets[i]
        survivors.append(top)
        for j in order[pos + 1 :]:
            if suppressed[j]:
                continue
            other = dets[j]
            if class_aware and other.category != top.category:
                continue
            if iou(top.bbox, other.bbox) > iou_threshold:
                suppressed[j] = True
    return survivors


def postprocess(raw: RawOutput, config: DecodeConfig, crop: CropRect) -> list[Detection]:
    """Full decode path: decode -> NMS -> cap -> shift into full-frame space."""
    dets = decode_raw(raw, config)
    kept = nms(dets, config.nms_iou_threshold, config.class_aware_nms)
    kept = kept[: config.max_detections]
    return [offset_detection(d, crop.x, crop.y) for d in kept]


def offset_detection(det: Detection, dx: float, dy: float) -> Detection:
    """Translate a box by (dx, dy) and retag it as full-frame coordinates."""
    x, y, w, h = det.bbox
    return replace(det, bbox=(x + dx, y + dy, w, h), space=FULL_FRAME)


def detection_to_record(det: Detection, image_id: int) -> dict:
    """COCO-results-compatible record for one detection."""
    return {
        "image_id": image_id,
        "category_id": det.category,
        "bbox": [round(v, 6) for v in det.bbox],
        "score": round(det.score, 6),
    }
