"""Axis-aligned box arithmetic, IoU, and greedy NMS.

Boxes are stored as (x, y, w, h) in input-pixel coordinates with the origin
at the top-left; corner form is derived on demand. Intersection is open:
boxes that merely touch have IoU 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: left, top, width, height (pixels). w, h > 0."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"box field {name!r} must be finite, got {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive extent, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def contains(self, px: float, py: float) -> bool:
        """Point membership with half-open edges: [x, x+w) x [y, y+h)."""
        return self.x <= px < self.x2 and self.y <= py < self.y2


@dataclass(frozen=True)
class ScoredBox:
    """A box with a confidence score in [0, 1]."""

    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be finite and in [0, 1], got {self.score!r}")


def area(b: Box) -> float:
    return b.w * b.h


def aspect_ratio(b: Box) -> float:
    return b.w / b.h


def iou(a: Box, b: Box) -> float:
    """Intersection over union, in [0, 1]. Symmetric; touching boxes give 0.

    Areas are derived from the same corner arithmetic as the intersection so
    that iou(a, a) is exactly 1.0 in floating point.
    """
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    if iw <= 0:
        return 0.0
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a.x2 - a.x) * (a.y2 - a.y)
    area_b = (b.x2 - b.x) * (b.y2 - b.y)
    return inter / (area_a + area_b - inter)


def iou_matrix(rows: Sequence[Box], cols: Sequence[Box]) -> np.ndarray:
    """Pairwise IoU of two box lists as a (len(rows), len(cols)) array."""
    if not rows or not cols:
        return np.zeros((len(rows), len(cols)))
    ra = _to_array(rows)
    ca = _to_array(cols)
    return _iou_array(ra, ca)


def max_iou(b: Box, others: Iterable[Box]) -> float:
    """Largest IoU of ``b`` against any box in ``others`` (0 if empty)."""
    best = 0.0
    for other in others:
        v = iou(b, other)
        if v > best:
            best = v
    return best


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy score-descending non-maximum suppression.

    Keeps a box iff its IoU with every previously kept box is <= threshold.
    Ties on score are broken by lower original index. Output is sorted by
    descending score and is a subset of the input.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if not boxes:
        return []

    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    arr = _to_array([boxes[i].box for i in order])

    kept: list[int] = []
    alive = np.ones(len(order), dtype=bool)
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        kept.append(order[pos])
        rest = np.nonzero(alive)[0]
        rest = rest[rest > pos]
        if rest.size:
            overlaps = _iou_array(arr[pos : pos + 1], arr[rest])[0]
            alive[rest[overlaps > iou_threshold]] = False
    return [boxes[i] for i in kept]


def _to_array(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64)


def _iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union
