"""COCO-style detection evaluation: AP, mAP@50, mAP@50-95, grouped recall.

Matching is greedy in detection-score order: a detection takes the still
unmatched same-category ground truth with the highest IoU at or above the
threshold. AP uses the 101-point interpolated definition with a monotone
precision envelope. Categories with no ground truth anywhere are excluded
from the means. Crowd regions are treated as ordinary ground truth.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decode import Detection, FULL_FRAME, iou
from .errors import AnnotationParseError

log = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101


@dataclass(frozen=True)
class GroundTruthItem:
    image_id: int
    bbox: tuple[float, float, float, float]
    category_id: int
    group_tag: str | None = None

    def __post_init__(self):
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"ground truth box must have positive sides, got {self.bbox}")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    recall_points: int = RECALL_POINTS
    max_detections_per_image: int = 100

    def __post_init__(self):
        t = self.iou_thresholds
        if not t or any(not 0 < x < 1 for x in t) or list(t) != sorted(t):
            raise ValueError(f"iou_thresholds must be ascending values in (0, 1): {t}")


@dataclass(frozen=True)
class EvalResult:
    map50: float
    map50_95: float
    per_category: dict[int, dict[str, float]]
    image_count: int
    gt_count: int
    detection_count: int


def load_annotations(path: str | Path, group_key: str | None = None) -> list[GroundTruthItem]:
    """Read ground truth from a COCO annotation file.

    Category ids pass through unchanged. Boxes with non-positive sides are
    dropped with a warning. group_key names an annotation attribute to read
    the group tag from (for grouped-recall experiments).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AnnotationParseError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict) or "annotations" not in doc:
        raise AnnotationParseError(f"{path}: missing top-level 'annotations' list")
    items: list[GroundTruthItem] = []
    for i, ann in enumerate(doc["annotations"]):
        try:
            bbox = tuple(float(v) for v in ann["bbox"])
            image_id = int(ann["image_id"])
            category_id = int(ann["category_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationParseError(f"{path}: annotation #{i} malformed: {exc}") from exc
        if len(bbox) != 4:
            raise AnnotationParseError(f"{path}: annotation #{i} bbox must have 4 values")
        if bbox[2] <= 0 or bbox[3] <= 0:
            log.warning("%s: annotation #%d has a degenerate box %s, skipping", path, i, bbox)
            continue
        tag = None
        if group_key is not None and group_key in ann:
            tag = str(ann[group_key])
        items.append(GroundTruthItem(image_id=image_id, bbox=bbox, category_id=category_id, group_tag=tag))
    return items


def load_detections(path: str | Path) -> list[tuple[int, Detection]]:
    """Read (image_id, detection) pairs from a COCO results file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AnnotationParseError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, list):
        raise AnnotationParseError(f"{path}: detection results must be a JSON list")
    out = []
    for i, rec in enumerate(doc):
        try:
            det = Detection(
                bbox=tuple(float(v) for v in rec["bbox"]),
                category=int(rec["category_id"]),
                score=float(rec["score"]),
                space=FULL_FRAME,
            )
            out.append((int(rec["image_id"]), det))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationParseError(f"{path}: record #{i} malformed: {exc}") from exc
    return out


def match_detections(
    dets: list[Detection], gts: list[GroundTruthItem], iou_threshold: float
) -> tuple[list[bool], list[bool]]:
    """Greedy TP/FP labelling for one image.

    Returns (tp_labels in descending-score order, per-GT matched flags).
    Detections are visited by descending score (stable on input order);
    each takes the unmatched same-category GT with the highest IoU >= the
    threshold, ties to the earliest GT.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gts)
    labels: list[bool] = []
    for i in order:
        det = dets[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[j] or gt.category_id != det.category:
                continue
            v = iou(det.bbox, gt.bbox)
            if v >= iou_threshold and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[best_j] = True
            labels.append(True)
        else:
            labels.append(False)
    return labels, matched


def average_precision(
    labels: list[bool], gt_count: int, recall_points: int = RECALL_POINTS
) -> float | None:
    """Interpolated AP from score-ordered TP/FP labels.

    Precision is enveloped (monotone non-increasing in recall) and sampled
    at evenly spaced recall points. Returns None when there is no ground
    truth (the category does not participate in the mean).
    """
    if gt_count == 0:
        return None
    if not labels:
        return 0.0
    tp = np.cumsum([1 if l else 0 for l in labels])
    fp = np.cumsum([0 if l else 1 for l in labels])
    recall = tp / gt_count
    precision = tp / (tp + fp)
    # envelope: best precision achievable at or beyond each point
    env = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, recall_points)
    idx = np.searchsorted(recall, points, side="left")
    sampled = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(np.mean(sampled))


def evaluate(
    dets: list[tuple[int, Detection]],
    gts: list[GroundTruthItem],
    config: EvalConfig = EvalConfig(),
) -> EvalResult:
    """Per-category, per-threshold AP; mAP50 and mAP50-95 means."""
    by_image: dict[int, list[Detection]] = defaultdict(list)
    for image_id, det in dets:
        by_image[image_id].append(det)
    # per-image cap, by score across categories
    for image_id, image_dets in by_image.items():
        image_dets.sort(key=lambda d: -d.score)
        del image_dets[config.max_detections_per_image :]

    gt_by_cat: dict[int, dict[int, list[GroundTruthItem]]] = defaultdict(lambda: defaultdict(list))
    for gt in gts:
        gt_by_cat[gt.category_id][gt.image_id].append(gt)
    categories = sorted(gt_by_cat)

    image_ids = sorted(set(by_image) | {g.image_id for g in gts})
    per_category: dict[int, dict[str, float]] = {}
    ap_at: dict[float, list[float]] = {t: [] for t in config.iou_thresholds}
    for cat in categories:
        gt_count = sum(len(v) for v in gt_by_cat[cat].values())
        cat_aps: dict[float, float] = {}
        for t in config.iou_thresholds:
            scored: list[tuple[float, int, bool]] = []
            for image_id in image_ids:
                image_dets = [d for d in by_image.get(image_id, []) if d.category == cat]
                labels, _ = match_detections(image_dets, gt_by_cat[cat].get(image_id, []), t)
                order = sorted(range(len(image_dets)), key=lambda i: (-image_dets[i].score, i))
                for rank, i in enumerate(order):
                    scored.append((image_dets[i].score, image_id, labels[rank]))
            # global score ordering across images (stable by image then rank)
            scored.sort(key=lambda s: -s[0])
            ap = average_precision([lab for _, _, lab in scored], gt_count, config.recall_points)
            if ap is not None:
                cat_aps[t] = ap
                ap_at[t].append(ap)
        if cat_aps:
            per_category[cat] = {
                "ap50": cat_aps.get(0.5, 0.0),
                "ap50_95": float(np.mean(list(cat_aps.values()))),
            }
    all_aps = [ap for aps in ap_at.values() for ap in aps]
    map50 = float(np.mean(ap_at[0.5])) if ap_at.get(0.5) else 0.0
    map50_95 = float(np.mean(all_aps)) if all_aps else 0.0
    return EvalResult(
        map50=map50,
        map50_95=map50_95,
        per_category=per_category,
        image_count=len(image_ids),
        gt_count=len(gts),
        detection_count=sum(len(v) for v in by_image.values()),
    )


def recall_by_group(
    dets: list[tuple[int, Detection]],
    gts: list[GroundTruthItem],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.25,
) -> dict[str, float]:
    """Per-group recall: matched GT / total GT, per group tag.

    Mirrors a distance-sweep capture where every ground truth carries its
    distance as a tag. Detections under score_threshold are discarded
    before matching; untagged ground truth is ignored.
    """
    if not any(g.group_tag is not None for g in gts):
        raise ValueError("recall_by_group requires ground truth with group tags")
    strong = [(img, d) for img, d in dets if d.score >= score_threshold]
    by_image: dict[int, list[Detection]] = defaultdict(list)
    for image_id, det in strong:
        by_image[image_id].append(det)
    gt_by_image: dict[int, list[GroundTruthItem]] = defaultdict(list)
    for gt in gts:
        if gt.group_tag is not None:
            gt_by_image[gt.image_id].append(gt)
    totals: dict[str, int] = defaultdict(int)
    hits: dict[str, int] = defaultdict(int)
    for image_id, image_gts in gt_by_image.items():
        _, matched = match_detections(by_image.get(image_id, []), image_gts, iou_threshold)
        for gt, hit in zip(image_gts, matched):
            totals[gt.group_tag] += 1
            if hit:
                hits[gt.group_tag] += 1
    return {tag: hits[tag] / totals[tag] for tag in sorted(totals)}
