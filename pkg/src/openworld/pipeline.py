"""Pseudo-label filtering, weighted losses, and the self-training loop.

Raw proposals pass NMS and three quality rules (minimum area, aspect-ratio
band, low overlap with known annotations) to become pseudo labels. A linear
localization-quality scorer (stand-in for a detector's quality heads) is then
trained with soft-label-weighted losses and used to promote new candidate
boxes into the label set, one self-training round at a time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autoencoder import TrainConfig
from .boxes import Box, ScoredBox, area, aspect_ratio, iou_matrix, nms
from .features import SIZE_RANGES, ErrorMap, Level
from .rng import SplitMix64, derive_seed
from .scoring import (
    RewModel,
    SoftLabeledProposal,
    label_proposals,
    pooled_errors_batch,
    route_level,
)

log = logging.getLogger(__name__)


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class FilterConfig:
    """Pseudo-label quality rules; defaults follow the reference settings."""

    nms_iou: float = 0.3
    min_area: float = 2000.0
    aspect_min: float = 0.25
    aspect_max: float = 4.0
    max_known_iou: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in [0, 1]")
        if not 0.0 < self.max_known_iou <= 1.0:
            raise ValueError("max_known_iou must be in (0, 1]")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")
        if not 0 < self.aspect_min < self.aspect_max:
            raise ValueError("need 0 < aspect_min < aspect_max")


def filter_proposals(
    raw: Sequence[ScoredBox], known: Sequence[Box], cfg: FilterConfig = FilterConfig()
) -> list[ScoredBox]:
    """NMS, then reject small, extreme-aspect, or known-overlapping boxes.

    Area must be strictly greater than ``min_area``; aspect must lie inside
    [aspect_min, aspect_max] inclusive; IoU with every known box must stay
    strictly below ``max_known_iou``. Score order is preserved.
    """
    survivors = nms(raw, cfg.nms_iou)
    if known:
        known_ious = iou_matrix([sb.box for sb in survivors], list(known))
    out = []
    for idx, sb in enumerate(survivors):
        if area(sb.box) <= cfg.min_area:
            continue
        ratio = aspect_ratio(sb.box)
        if ratio < cfg.aspect_min or ratio > cfg.aspect_max:
            continue
        if known and known_ious[idx].max() >= cfg.max_known_iou:
            continue
        out.append(sb)
    return out


def weighted_classification_loss(probs, targets, weights) -> float:
    """Mean weighted cross-entropy: (1/N) * sum w_i * -log p_i.

    ``probs`` is either an (N, K) row-stochastic matrix with integer
    ``targets`` selecting the target-class column, or a 1-D array of
    already-selected target-class probabilities (``targets`` ignored).
    """
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if probs.ndim == 2:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape[0] != probs.shape[0]:
            raise ValueError("targets length must match probs rows")
        picked = probs[np.arange(probs.shape[0]), targets]
    elif probs.ndim == 1:
        picked = probs
    else:
        raise ValueError("probs must be 1-D or 2-D")
    if picked.shape != weights.shape:
        raise ValueError("weights length must match probability count")
    if picked.size == 0:
        raise ValueError("need at least one term")
    if (picked <= 0).any() or (picked > 1).any():
        raise ValueError("target-class probabilities must lie in (0, 1]")
    if (weights < 0).any() or (weights > 1).any():
        raise ValueError("weights must lie in [0, 1]")
    return float(np.mean(weights * -np.log(picked)))


def weighted_localization_loss(pred, target, weights) -> float:
    """Mean weighted l1 distance: (1/N) * sum w_i * |q_i - q*_i|."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (pred.shape == target.shape == weights.shape) or pred.ndim != 1:
        raise ValueError("pred, target, weights must be equal-length vectors")
    if pred.size == 0:
        raise ValueError("need at least one term")
    if ((target < 0) | (target > 1)).any():
        raise ValueError("targets must lie in [0, 1]")
    if ((weights < 0) | (weights > 1)).any():
        raise ValueError("weights must lie in [0, 1]")
    return float(np.mean(weights * np.abs(pred - target)))


def assign_localization_targets(
    proposals: Sequence[Box], gt_boxes: Sequence[Box], positive_iou: float = 0.3
) -> list[float | None]:
    """Best-IoU target per proposal, or None for unsampled proposals.

    A proposal is positive when its best IoU against the ground-truth boxes
    strictly exceeds ``positive_iou``; the target is that IoU value.
    """
    targets, _ = _assign_with_index(proposals, gt_boxes, positive_iou)
    return targets


def _assign_with_index(
    proposals: Sequence[Box], gt_boxes: Sequence[Box], positive_iou: float
) -> tuple[list[float | None], list[int | None]]:
    if not 0.0 < positive_iou < 1.0:
        raise ValueError("positive_iou must lie in (0, 1)")
    if not proposals or not gt_boxes:
        return [None] * len(proposals), [None] * len(proposals)
    matrix = iou_matrix(list(proposals), list(gt_boxes))
    best_idx = matrix.argmax(axis=1)
    best_iou = matrix[np.arange(len(proposals)), best_idx]
    targets: list[float | None] = []
    indices: list[int | None] = []
    for k in range(len(proposals)):
        if best_iou[k] > positive_iou:
            targets.append(float(best_iou[k]))
            indices.append(int(best_idx[k]))
        else:
            targets.append(None)
            indices.append(None)
    return targets, indices


@dataclass(frozen=True)
class ProposalScorer:
    """Linear heads over pooled box features.

    ``cls`` predicts unknown-vs-background probability, ``loc`` predicts
    localization quality; both squash through a sigmoid into [0, 1].
    """

    cls_w: np.ndarray
    cls_b: float
    loc_w: np.ndarray
    loc_b: float

    def __post_init__(self):
        cls_w = np.asarray(self.cls_w, dtype=np.float64)
        loc_w = np.asarray(self.loc_w, dtype=np.float64)
        if cls_w.ndim != 1 or loc_w.shape != cls_w.shape:
            raise ValueError("head weights must be equal-length vectors")
        if not (
            np.isfinite(cls_w).all()
            and np.isfinite(loc_w).all()
            and math.isfinite(self.cls_b)
            and math.isfinite(self.loc_b)
        ):
            raise ValueError("scorer parameters must be finite")
        object.__setattr__(self, "cls_w", cls_w)
        object.__setattr__(self, "loc_w", loc_w)

    @property
    def feature_dim(self) -> int:
        return self.loc_w.size

    def predict_quality(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(np.asarray(features) @ self.loc_w + self.loc_b)

    def predict_unknown_prob(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(np.asarray(features) @ self.cls_w + self.cls_b)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def init_scorer(feature_dim: int, seed: int = 0) -> ProposalScorer:
    rng = SplitMix64(derive_seed(seed, "scorer-init"))
    scale = 0.01
    cls_w = (rng.uniform(feature_dim) * 2 - 1) * scale
    loc_w = (rng.uniform(feature_dim) * 2 - 1) * scale
    return ProposalScorer(cls_w=cls_w, cls_b=0.0, loc_w=loc_w, loc_b=0.0)


def quality_loss_gradient(
    scorer: ProposalScorer, features: np.ndarray, targets: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, float]:
    """Gradient of the weighted l1 quality loss w.r.t. (loc_w, loc_b)."""
    features = np.asarray(features, dtype=np.float64)
    q = scorer.predict_quality(features)
    n = q.size
    dz = weights * np.sign(q - targets) * q * (1.0 - q) / n
    return features.T @ dz, float(dz.sum())


def train_scorer(
    scorer: ProposalScorer,
    features: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    cfg: TrainConfig,
) -> ProposalScorer:
    """Full-batch gradient descent on the weighted localization loss."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != targets.size != weights.size:
        raise ValueError("features/targets/weights shapes are inconsistent")
    if features.shape[1] != scorer.feature_dim:
        raise ValueError("feature width does not match the scorer")

    loc_w = scorer.loc_w.copy()
    loc_b = scorer.loc_b
    work = replace(scorer, loc_w=loc_w, loc_b=loc_b)
    best = work
    best_loss = weighted_localization_loss(
        work.predict_quality(features), targets, weights
    )
    for _ in range(cfg.epochs):
        grad_w, grad_b = quality_loss_gradient(work, features, targets, weights)
        loc_w = loc_w - cfg.learning_rate * grad_w
        loc_b = loc_b - cfg.learning_rate * grad_b
        work = replace(work, loc_w=loc_w, loc_b=loc_b)
        loss = weighted_localization_loss(
            work.predict_quality(features), targets, weights
        )
        if not math.isfinite(loss):
            raise PipelineError("scorer training diverged")
        if loss < best_loss:
            best, best_loss = work, loss
    # returning the best iterate keeps the final loss <= the initial loss
    # even when the last steps oscillate around an l1 kink
    return best


def select_top_percent(scored: Sequence[ScoredBox], top_percent: float) -> list[ScoredBox]:
    """Keep the floor(N * P / 100) highest-scoring boxes, never fewer than 1.

    Ties break toward the earlier input index; output is score-descending.
    """
    if not 0.0 < top_percent <= 100.0:
        raise ValueError("top_percent must lie in (0, 100]")
    if not scored:
        return []
    keep = max(1, math.floor(len(scored) * top_percent / 100.0))
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].score, i))
    return [scored[i] for i in order[:keep]]


def generate_candidate_grid(
    image_size: int,
    scales_per_level: int = 3,
    step_cells: int = 2,
    aspects: Sequence[float] = (1.0,),
) -> list[Box]:
    """Sliding grid of candidate boxes: per level, log-even scales inside the
    level's side band, stepped every ``step_cells`` feature cells."""
    out: list[Box] = []
    for level in sorted(SIZE_RANGES, key=lambda lv: lv.code):
        lo, hi = SIZE_RANGES[level]
        step = step_cells * level.stride
        for k in range(scales_per_level):
            side = lo * (hi / lo) ** ((2 * k + 1) / (2 * scales_per_level))
            for asp in aspects:
                w = side * math.sqrt(asp)
                h = side / math.sqrt(asp)
                if w > image_size or h > image_size:
                    continue
                nx = int((image_size - w) // step) + 1
                ny = int((image_size - h) // step) + 1
                for iy in range(ny):
                    for ix in range(nx):
                        out.append(Box(x=ix * step, y=iy * step, w=w, h=h))
    return out


def exclude_known_fragments(
    candidates: Sequence[Box], known_boxes: Sequence[Box], max_containment: float = 0.5
) -> list[Box]:
    """Drop candidates that sit mostly inside a known annotation.

    Such boxes are fragments of already-labeled objects: they slip past the
    IoU rule (tiny box vs large object) yet can never be valid unknown
    labels. Containment is intersection over the candidate's own area.
    """
    if not known_boxes or not candidates:
        return list(candidates)
    cand = np.array([[b.x, b.y, b.w, b.h] for b in candidates])
    kn = np.array([[b.x, b.y, b.w, b.h] for b in known_boxes])
    cx2 = cand[:, 0] + cand[:, 2]
    cy2 = cand[:, 1] + cand[:, 3]
    areas = cand[:, 2] * cand[:, 3]
    worst = np.zeros(len(candidates))
    for k in range(kn.shape[0]):
        iw = np.clip(np.minimum(cx2, kn[k, 0] + kn[k, 2]) - np.maximum(cand[:, 0], kn[k, 0]), 0, None)
        ih = np.clip(np.minimum(cy2, kn[k, 1] + kn[k, 3]) - np.maximum(cand[:, 1], kn[k, 1]), 0, None)
        worst = np.maximum(worst, iw * ih / areas)
    return [b for b, frac in zip(candidates, worst) if frac <= max_containment]


def candidate_features(
    error_maps: Mapping[Level, ErrorMap],
    boxes: Sequence[Box],
    image_size: int,
    standardize: bool = True,
) -> np.ndarray:
    """Per-box feature rows for the proposal scorer.

    Columns: pooled interior error at the routed level, pooled error of the
    2x-dilated surround ring, their difference (object boxes are compact
    high-error islands, so the contrast is the load-bearing feature), and
    log side length. Optionally standardized to zero mean / unit variance
    over the given box set.
    """
    n = len(boxes)
    feats = np.zeros((n, 4))
    by_level: dict[Level, list[int]] = {}
    for idx, box in enumerate(boxes):
        by_level.setdefault(route_level(box), []).append(idx)
    for level, indices in by_level.items():
        emap = error_maps[level]
        arr = np.array(
            [[boxes[i].x, boxes[i].y, boxes[i].w, boxes[i].h] for i in indices]
        )
        interior = pooled_errors_batch(emap, arr, level.stride)
        dil = _dilated(arr, 2.0, image_size)
        dil_mean = pooled_errors_batch(emap, dil, level.stride)
        ring = (4.0 * dil_mean - interior) / 3.0
        side = np.sqrt(arr[:, 2] * arr[:, 3])
        rows = np.stack(
            [interior, ring, interior - ring, np.log(side / 32.0)], axis=1
        )
        feats[indices] = rows
    if standardize and n > 1:
        mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        std[std == 0] = 1.0
        feats = (feats - mean) / std
    return feats


def _dilated(arr: np.ndarray, factor: float, image_size: int) -> np.ndarray:
    cx = arr[:, 0] + arr[:, 2] / 2
    cy = arr[:, 1] + arr[:, 3] / 2
    w = np.minimum(arr[:, 2] * factor, image_size)
    h = np.minimum(arr[:, 3] * factor, image_size)
    x = np.clip(cx - w / 2, 0.0, image_size - w)
    y = np.clip(cy - h / 2, 0.0, image_size - h)
    return np.stack([x, y, w, h], axis=1)


@dataclass(frozen=True)
class PseudoLabel:
    proposal: SoftLabeledProposal
    provenance: str


@dataclass
class PseudoLabelSet:
    """Accepted pseudo labels per image, with provenance per entry."""

    by_image: dict = field(default_factory=dict)

    def labels(self, image_id: int) -> list[PseudoLabel]:
        return self.by_image.get(image_id, [])

    def boxes(self, image_id: int) -> list[Box]:
        return [pl.proposal.box for pl in self.labels(image_id)]

    def add(self, image_id: int, label: PseudoLabel) -> None:
        self.by_image.setdefault(image_id, []).append(label)

    def total(self) -> int:
        return sum(len(v) for v in self.by_image.values())

    def check_invariants(
        self, known_by_image: Mapping[int, Sequence[Box]], cfg: FilterConfig
    ) -> None:
        """Raise PipelineError if any stored entry violates the set rules."""
        for image_id, labels in self.by_image.items():
            boxes = [pl.proposal.box for pl in labels]
            if boxes:
                matrix = iou_matrix(boxes, boxes)
                np.fill_diagonal(matrix, 0.0)
                if (matrix > cfg.nms_iou).any():
                    raise PipelineError(f"image {image_id}: overlapping pseudo labels")
            for b in boxes:
                if area(b) <= cfg.min_area:
                    raise PipelineError(f"image {image_id}: undersized pseudo label")
                ratio = aspect_ratio(b)
                if ratio < cfg.aspect_min or ratio > cfg.aspect_max:
                    raise PipelineError(f"image {image_id}: bad aspect pseudo label")
            known = list(known_by_image.get(image_id, []))
            if known and boxes:
                overlap = iou_matrix(boxes, known)
                if (overlap >= cfg.max_known_iou).any():
                    raise PipelineError(
                        f"image {image_id}: pseudo label overlaps a known box"
                    )


def labels_from_proposals(
    proposals: Sequence[SoftLabeledProposal],
    image_id: int = 0,
    provenance: str = "generator",
) -> PseudoLabelSet:
    out = PseudoLabelSet()
    for prop in proposals:
        out.add(image_id, PseudoLabel(proposal=prop, provenance=provenance))
    return out


@dataclass(frozen=True)
class SelfTrainConfig:
    top_percent: float = 30.0
    iterations: int = 1
    positive_iou: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.top_percent <= 100.0:
            raise ValueError("top_percent must lie in (0, 100]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 < self.positive_iou < 1.0:
            raise ValueError("positive_iou must lie in (0, 1)")


@dataclass(frozen=True)
class SelfTrainData:
    """Inputs of the self-training loop for a single image."""

    known_boxes: Sequence[Box]
    candidates: Sequence[Box]
    error_maps: Mapping[Level, ErrorMap]
    image_size: int
    image_id: int = 0
    filter_config: FilterConfig = FilterConfig()
    train_config: TrainConfig = TrainConfig(learning_rate=0.5, epochs=200)


def self_train(
    labels: PseudoLabelSet,
    scorer: ProposalScorer,
    model: RewModel,
    data: SelfTrainData,
    cfg: SelfTrainConfig = SelfTrainConfig(),
) -> tuple[PseudoLabelSet, ProposalScorer]:
    """Iteratively extend the pseudo-label set with scorer-promoted boxes.

    Each round: fit the quality scorer on positives against known boxes plus
    current pseudo labels (pseudo matches weighted by their soft label),
    score every candidate, keep the top P%, push them through the filter
    rules against knowns and existing labels, and merge the survivors with
    round provenance. ``iterations == 0`` returns the inputs unchanged.
    """
    out = PseudoLabelSet(by_image={k: list(v) for k, v in labels.by_image.items()})
    if cfg.iterations == 0:
        return out, scorer

    candidates = list(data.candidates)
    if not candidates:
        log.warning("self-training aborted: empty candidate set")
        return out, scorer
    features = candidate_features(data.error_maps, candidates, data.image_size)

    for round_idx in range(1, cfg.iterations + 1):
        current = out.labels(data.image_id)
        known = list(data.known_boxes)
        pseudo_boxes = [pl.proposal.box for pl in current]
        gts = known + pseudo_boxes
        if not gts:
            log.warning("round %d: no ground truth to train against", round_idx)
            break
        targets, match_idx = _assign_with_index(candidates, gts, cfg.positive_iou)
        pos = [k for k, t in enumerate(targets) if t is not None]
        if not pos:
            log.warning("round %d: no positive candidates; stopping", round_idx)
            break
        pos_targets = np.array([targets[k] for k in pos])
        pos_weights = np.array(
            [
                1.0
                if match_idx[k] < len(known)
                else current[match_idx[k] - len(known)].proposal.soft_label
                for k in pos
            ]
        )
        scorer = train_scorer(
            scorer, features[pos], pos_targets, pos_weights, data.train_config
        )

        scores = scorer.predict_quality(features)
        scored = [ScoredBox(box=b, score=float(s)) for b, s in zip(candidates, scores)]
        top = select_top_percent(scored, cfg.top_percent)
        survivors = filter_proposals(top, known + pseudo_boxes, data.filter_config)
        if not survivors:
            log.info("round %d: no candidates survived filtering", round_idx)
            continue
        labeled = label_proposals(model, data.error_maps, [sb.box for sb in survivors])
        added = 0
        for prop in labeled:
            if prop.flag is not None:
                log.info("round %d: skipped flagged candidate (%s)", round_idx, prop.flag)
                continue
            out.add(
                data.image_id,
                PseudoLabel(proposal=prop, provenance=f"self-training-round-{round_idx}"),
            )
            added += 1
        log.info("round %d: added %d pseudo labels", round_idx, added)
    return out, scorer


@dataclass(frozen=True)
class ExemplarSelection:
    image_ids: list
    per_class_counts: dict
    shortages: dict


def select_exemplars(
    annotations: Mapping[int, Sequence[str]],
    per_class_count: int = 50,
    seed: int = 0,
) -> ExemplarSelection:
    """Greedy minimal-ish image subset with >= N instances per known class.

    Picks the image covering the most outstanding demand each step; ties go
    to the smaller image id, so the result is deterministic (``seed`` is
    accepted for interface stability but unused). Classes with fewer than
    ``per_class_count`` instances overall are taken entirely and flagged.
    """
    if per_class_count < 1:
        raise ValueError("per_class_count must be >= 1")
    counts = {
        image_id: _tally(labels) for image_id, labels in sorted(annotations.items())
    }
    available: dict[str, int] = {}
    for tally in counts.values():
        for cls, n in tally.items():
            available[cls] = available.get(cls, 0) + n
    shortages = {c: n for c, n in available.items() if n < per_class_count}
    need = {c: min(per_class_count, n) for c, n in available.items()}

    selected: list = []
    remaining = set(counts)
    got: dict[str, int] = {c: 0 for c in available}
    while any(v > 0 for v in need.values()) and remaining:
        best_id, best_gain = None, 0
        for image_id in sorted(remaining):
            gain = sum(min(need[c], n) for c, n in counts[image_id].items())
            if gain > best_gain:
                best_id, best_gain = image_id, gain
        if best_id is None:
            break
        selected.append(best_id)
        remaining.discard(best_id)
        for cls, n in counts[best_id].items():
            got[cls] += n
            need[cls] = max(0, need[cls] - n)
    return ExemplarSelection(
        image_ids=selected, per_class_counts=got, shortages=shortages
    )


def _tally(labels: Sequence[str]) -> dict[str, int]:
    out: dict[str, int] = {}
    for label in labels:
        out[label] = out.get(label, 0) + 1
    return out


def write_pseudo_labels(labels: PseudoLabelSet, path: str | Path) -> None:
    with open(path, "w") as fh:
        for image_id in sorted(labels.by_image):
            for pl in labels.by_image[image_id]:
                p = pl.proposal
                doc = {
                    "image_id": image_id,
                    "box": [p.box.x, p.box.y, p.box.w, p.box.h],
                    "level": p.level.value,
                    "pooled_error": p.pooled_error,
                    "soft_label": p.soft_label,
                    "provenance": pl.provenance,
                }
                fh.write(json.dumps(doc) + "\n")


def read_pseudo_labels(path: str | Path) -> PseudoLabelSet:
    out = PseudoLabelSet()
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                box = Box(*doc["box"])
                prop = SoftLabeledProposal(
                    box=box,
                    soft_label=doc["soft_label"],
                    pooled_error=doc["pooled_error"],
                    level=Level(doc["level"]),
                )
                out.add(doc["image_id"], PseudoLabel(prop, doc["provenance"]))
            except (KeyError, ValueError, TypeError) as err:
                raise PipelineError(f"{path}:{line_no}: malformed pseudo label ({err})")
    return out
