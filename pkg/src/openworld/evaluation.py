"""Open-world detection metrics and task-split bookkeeping.

Implements per-class average precision (PASCAL-style, IoU 0.5, all-point
interpolation), unknown-object recall with and without per-image top-K
truncation, the count of unknowns absorbed by known-class predictions
(open-set error), and its normalization by known-class TP+FP (wilderness
impact). All matching is greedy in descending score with ties broken by
input order, so every metric is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .boxes import Box, iou

UNKNOWN_LABEL = "unknown"


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class TaskSplit:
    """Known/unknown class partition at one task step.

    ``known_classes`` is cumulative over tasks; ``current_known`` holds only
    the classes introduced at this step.
    """

    task_id: int
    known_classes: frozenset
    unknown_classes: frozenset
    previously_known: frozenset
    current_known: frozenset

    def __post_init__(self):
        if self.known_classes & self.unknown_classes:
            raise ValueError("known and unknown class sets overlap")
        if self.previously_known | self.current_known != self.known_classes:
            raise ValueError("previously/current known must partition the known set")
        if self.previously_known & self.current_known:
            raise ValueError("previously and current known overlap")


def load_task_split(path: str | Path, task_id: int) -> TaskSplit:
    """Build the split for ``task_id`` from {"tasks": [{"id", "classes"}]}."""
    doc = json.loads(Path(path).read_text())
    tasks = sorted(doc["tasks"], key=lambda t: t["id"])
    ids = [t["id"] for t in tasks]
    if task_id not in ids:
        raise EvaluationError(f"task {task_id} not present in split file {path}")
    prev, current, unknown = set(), set(), set()
    for t in tasks:
        if t["id"] < task_id:
            prev.update(t["classes"])
        elif t["id"] == task_id:
            current.update(t["classes"])
        else:
            unknown.update(t["classes"])
    return TaskSplit(
        task_id=task_id,
        known_classes=frozenset(prev | current),
        unknown_classes=frozenset(unknown),
        previously_known=frozenset(prev),
        current_known=frozenset(current - prev),
    )


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: Box
    class_label: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: Box
    class_label: str
    is_unknown: bool


def _sorted_det_indices(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def _greedy_match(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float
) -> list[int | None]:
    """Greedy best-IoU matching in score order, one GT per detection.

    Returns, per detection (input order), the matched GT index or None.
    GT candidates are restricted to the detection's image.
    """
    gt_by_image: dict[int, list[int]] = {}
    for g_idx, gt in enumerate(gts):
        gt_by_image.setdefault(gt.image_id, []).append(g_idx)
    taken = [False] * len(gts)
    matches: list[int | None] = [None] * len(dets)
    for d_idx in _sorted_det_indices(dets):
        det = dets[d_idx]
        best_g, best_iou = None, 0.0
        for g_idx in gt_by_image.get(det.image_id, []):
            if taken[g_idx]:
                continue
            v = iou(det.box, gts[g_idx].box)
            if v > best_iou:
                best_g, best_iou = g_idx, v
        if best_g is not None and best_iou >= iou_thresh:
            taken[best_g] = True
            matches[d_idx] = best_g
    return matches


def average_precision(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> float:
    """All-point-interpolated AP for one class's detections and ground truth."""
    if not gts:
        return 0.0
    if not dets:
        return 0.0
    matches = _greedy_match(dets, gts, iou_thresh)
    order = _sorted_det_indices(dets)
    tp = np.array([matches[i] is not None for i in order], dtype=np.float64)
    fp = 1.0 - tp
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / len(gts)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def u_recall(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    score_thresh: float = 0.05,
    iou_thresh: float = 0.5,
) -> float:
    """Fraction of unknown GT matched by unknown detections above threshold."""
    unknown_gts = [g for g in gts if g.is_unknown]
    if not unknown_gts:
        return 0.0
    unknown_dets = [
        d for d in dets if d.class_label == UNKNOWN_LABEL and d.score > score_thresh
    ]
    matches = _greedy_match(unknown_dets, unknown_gts, iou_thresh)
    return sum(m is not None for m in matches) / len(unknown_gts)


def recall_at_k(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    k: int,
    iou_thresh: float = 0.5,
) -> float:
    """Unknown recall after truncating to the top-k unknown dets per image."""
    if k < 1:
        raise ValueError("k must be >= 1")
    unknown_gts = [g for g in gts if g.is_unknown]
    if not unknown_gts:
        return 0.0
    by_image: dict[int, list[Detection]] = {}
    for det in dets:
        if det.class_label == UNKNOWN_LABEL:
            by_image.setdefault(det.image_id, []).append(det)
    kept: list[Detection] = []
    for image_id in sorted(by_image):
        dlist = by_image[image_id]
        order = _sorted_det_indices(dlist)
        kept.extend(dlist[i] for i in order[:k])
    matches = _greedy_match(kept, unknown_gts, iou_thresh)
    return sum(m is not None for m in matches) / len(unknown_gts)


def a_ose(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> int:
    """Unknown GT absorbed by known-class detections.

    A known-class detection counts when its best-IoU ground truth (over all
    ground truth of its image) is an unknown object with IoU >= threshold;
    each unknown GT is counted at most once, in detection score order.
    """
    known_dets = [d for d in dets if d.class_label != UNKNOWN_LABEL]
    gt_by_image: dict[int, list[int]] = {}
    for g_idx, gt in enumerate(gts):
        gt_by_image.setdefault(gt.image_id, []).append(g_idx)
    counted = [False] * len(gts)
    total = 0
    for d_idx in _sorted_det_indices(known_dets):
        det = known_dets[d_idx]
        best_g, best_iou = None, 0.0
        for g_idx in gt_by_image.get(det.image_id, []):
            v = iou(det.box, gts[g_idx].box)
            if v > best_iou:
                best_g, best_iou = g_idx, v
        if (
            best_g is not None
            and best_iou >= iou_thresh
            and gts[best_g].is_unknown
            and not counted[best_g]
        ):
            counted[best_g] = True
            total += 1
    return total


def wilderness_impact(a_ose_count: int, tp_known: int, fp_known: int) -> float:
    """Open-set error normalized by known-class predictions: A / (TP + FP)."""
    denom = tp_known + fp_known
    if denom <= 0:
        raise ValueError("tp_known + fp_known must be > 0")
    return a_ose_count / denom


@dataclass(frozen=True)
class EvalConfig:
    iou_thresh: float = 0.5
    score_thresh: float = 0.05
    recall_ks: tuple = (10, 30, 100)


def evaluate_task(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    split: TaskSplit,
    config: EvalConfig = EvalConfig(),
) -> dict:
    """Full metrics report for one task split, as a JSON-serializable dict."""
    for det in dets:
        if det.class_label != UNKNOWN_LABEL and det.class_label not in split.known_classes:
            raise EvaluationError(
                f"detection label {det.class_label!r} is neither known nor "
                f"{UNKNOWN_LABEL!r}"
            )

    per_class_ap: dict[str, float] = {}
    tp_known = 0
    fp_known = 0
    for cls in sorted(split.known_classes):
        cls_gts = [g for g in gts if g.class_label == cls and not g.is_unknown]
        cls_dets = [d for d in dets if d.class_label == cls]
        if not cls_gts:
            continue
        per_class_ap[cls] = average_precision(cls_dets, cls_gts, config.iou_thresh)
        matches = _greedy_match(cls_dets, cls_gts, config.iou_thresh)
        matched = sum(m is not None for m in matches)
        tp_known += matched
        fp_known += len(cls_dets) - matched

    def mean_ap(classes: Iterable[str]) -> float:
        values = [per_class_ap[c] for c in classes if c in per_class_ap]
        return float(np.mean(values)) if values else 0.0

    ose = a_ose(dets, gts, config.iou_thresh)
    wi = ose / (tp_known + fp_known) if (tp_known + fp_known) > 0 else 0.0
    report = {
        "task_id": split.task_id,
        "per_class_ap": per_class_ap,
        "map_previously_known": mean_ap(split.previously_known),
        "map_current_known": mean_ap(split.current_known),
        "map_both": mean_ap(split.known_classes),
        "u_recall": u_recall(dets, gts, config.score_thresh, config.iou_thresh),
        "recall_at": {
            str(k): recall_at_k(dets, gts, k, config.iou_thresh)
            for k in config.recall_ks
        },
        "a_ose": ose,
        "wilderness_impact": wi,
        "counts": {
            "detections": len(dets),
            "known_tp": tp_known,
            "known_fp": fp_known,
            "known_gt": sum(not g.is_unknown for g in gts),
            "unknown_gt": sum(g.is_unknown for g in gts),
        },
    }
    return report


# COCO-style ingestion ------------------------------------------------------


def load_coco_ground_truth(path: str | Path, split: TaskSplit) -> list[GroundTruth]:
    """Read a COCO-style annotation file; unknown-ness derives from the split."""
    doc = json.loads(Path(path).read_text())
    try:
        categories = {c["id"]: c["name"] for c in doc["categories"]}
        out = []
        for ann in doc["annotations"]:
            x, y, w, h = ann["bbox"]
            label = categories[ann["category_id"]]
            out.append(
                GroundTruth(
                    image_id=ann["image_id"],
                    box=Box(x=x, y=y, w=w, h=h),
                    class_label=label,
                    is_unknown=label not in split.known_classes,
                )
            )
    except (KeyError, TypeError, ValueError) as err:
        raise EvaluationError(f"{path}: malformed COCO ground truth ({err})")
    return out


def load_coco_detections(
    path: str | Path, categories: Mapping[int, str] | None = None
) -> list[Detection]:
    """Read a COCO-style results array.

    Entries carry either ``category_name`` directly or ``category_id``
    resolved through ``categories``.
    """
    doc = json.loads(Path(path).read_text())
    out = []
    try:
        for entry in doc:
            x, y, w, h = entry["bbox"]
            if "category_name" in entry:
                label = entry["category_name"]
            elif categories is not None:
                label = categories[entry["category_id"]]
            else:
                raise EvaluationError(
                    "detection lacks category_name and no category map was given"
                )
            out.append(
                Detection(
                    image_id=entry["image_id"],
                    box=Box(x=x, y=y, w=w, h=h),
                    class_label=label,
                    score=entry["score"],
                )
            )
    except (KeyError, TypeError, ValueError) as err:
        raise EvaluationError(f"{path}: malformed detections ({err})")
    return out


def coco_categories(path: str | Path) -> dict[int, str]:
    doc = json.loads(Path(path).read_text())
    return {c["id"]: c["name"] for c in doc["categories"]}
