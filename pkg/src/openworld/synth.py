"""Synthetic multi-level scenarios for desk-scale validation.

The generator encodes the working premise of the whole pipeline: background
content is drawn from a handful of repeated prototype vectors (frequent,
simple), while every object carries its own fresh random direction (rare,
diverse). A reconstruction model trained on such maps reproduces background
cells well and object cells poorly, which is exactly the signal the scoring
stages consume.

All randomness flows through the splitmix64 streams in :mod:`openworld.rng`,
so a (seed, config) pair pins every byte of the output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Box, ScoredBox, iou, max_iou
from .features import SIZE_RANGES, FeatureMap, Level, grid_cell_span
from .rng import SplitMix64, derive_seed


class GenerationError(Exception):
    """Box placement failed within the configured retry budget."""


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    label: str


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs of the synthetic world; defaults define the reference scenario.

    Unknown objects are kept above the pseudo-label area floor (side such
    that side^2 > 2000) so that every planted unknown is recoverable through
    the downstream filter rules.
    """

    image_size: int = 2048
    channels: int = 48
    background_prototypes: int = 5
    noise_sigma: float = 0.1
    known_per_level: dict = field(
        default_factory=lambda: {"P3": 8, "P4": 6, "P5": 4, "P6": 5}
    )
    unknown_per_level: dict = field(
        default_factory=lambda: {"P3": 6, "P4": 4, "P5": 3, "P6": 2}
    )
    class_names: tuple = ("class_a", "class_b", "class_c", "class_d")
    directions_per_object: int = 48
    min_unknown_side: float = 47.0
    placement_max_iou: float = 0.1
    placement_attempts: int = 1000
    # raw-proposal synthesis (stand-in for an unsupervised proposal generator)
    proposal_coverage: float = 0.6
    proposals_per_covered: int = 2
    proposal_jitter: float = 0.12
    junk_proposals: int = 40

    def __post_init__(self):
        if self.image_size % Level.P6.stride != 0:
            raise ValueError("image_size must be divisible by the coarsest stride (64)")
        if self.channels < 2:
            raise ValueError("channels must be >= 2")
        if self.background_prototypes < 1:
            raise ValueError("need at least one background prototype")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 < self.proposal_coverage <= 1.0:
            raise ValueError("proposal_coverage must be in (0, 1]")
        if self.directions_per_object < 1:
            raise ValueError("directions_per_object must be >= 1")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["class_names"] = list(self.class_names)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        doc = dict(doc)
        if "class_names" in doc:
            doc["class_names"] = tuple(doc["class_names"])
        return cls(**doc)


def load_scenario_config(path: str | Path) -> ScenarioConfig:
    return ScenarioConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SyntheticScenario:
    feature_maps: dict
    known_boxes: list
    unknown_boxes: list
    background_prototypes: np.ndarray
    noise_sigma: float

    @property
    def image_size(self) -> int:
        fmap = next(iter(self.feature_maps.values()))
        return fmap.width * fmap.stride

    @property
    def all_object_boxes(self) -> list[Box]:
        return [lb.box for lb in self.known_boxes] + list(self.unknown_boxes)


def _sample_side(stream: SplitMix64, lo: float, hi: float) -> float:
    u = float(stream.uniform(1)[0])
    return math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))


def _place_boxes(stream: SplitMix64, cfg: ScenarioConfig, counts: dict,
                 placed: list[Box], min_side_floor: float = 0.0) -> list[Box]:
    out: list[Box] = []
    for level in sorted(Level, key=lambda lv: lv.code):
        lo, hi = SIZE_RANGES[level]
        lo = max(lo * 1.05, min_side_floor)
        hi = hi * 0.95
        for _ in range(counts.get(level.value, 0)):
            box = None
            for _attempt in range(cfg.placement_attempts):
                side = _sample_side(stream, lo, hi)
                aspect = math.exp((float(stream.uniform(1)[0]) * 2 - 1) * math.log(4 / 3))
                w = side * math.sqrt(aspect)
                h = side / math.sqrt(aspect)
                if w >= cfg.image_size or h >= cfg.image_size:
                    continue
                x = float(stream.uniform(1)[0]) * (cfg.image_size - w)
                y = float(stream.uniform(1)[0]) * (cfg.image_size - h)
                cand = Box(x=x, y=y, w=w, h=h)
                if max_iou(cand, placed) < cfg.placement_max_iou:
                    box = cand
                    break
            if box is None:
                raise GenerationError(
                    f"could not place a {level.value}-band box after "
                    f"{cfg.placement_attempts} attempts"
                )
            placed.append(box)
            out.append(box)
    return out


def generate_scenario(seed: int, cfg: ScenarioConfig = ScenarioConfig()) -> SyntheticScenario:
    """Deterministically build feature maps plus known/unknown ground truth."""
    placed: list[Box] = []
    box_stream = SplitMix64(derive_seed(seed, "boxes"))
    known_raw = _place_boxes(box_stream, cfg, cfg.known_per_level, placed)
    unknown = _place_boxes(
        box_stream, cfg, cfg.unknown_per_level, placed, min_side_floor=cfg.min_unknown_side
    )
    known = [
        LabeledBox(box=b, label=cfg.class_names[i % len(cfg.class_names)])
        for i, b in enumerate(known_raw)
    ]

    c = cfg.channels
    prototypes = (
        SplitMix64(derive_seed(seed, "prototypes"))
        .normal(cfg.background_prototypes * c)
        .reshape(cfg.background_prototypes, c)
    )
    directions = SplitMix64(derive_seed(seed, "objects"))
    object_vectors = [
        directions.normal(cfg.directions_per_object * c).reshape(-1, c)
        for _ in range(len(placed))
    ]

    feature_maps: dict[Level, FeatureMap] = {}
    for level in sorted(Level, key=lambda lv: lv.code):
        side = cfg.image_size // level.stride
        bg_stream = SplitMix64(derive_seed(seed, "background", level.value))
        proto_idx = bg_stream.integers(side * side, cfg.background_prototypes)
        grid = prototypes[proto_idx].reshape(side, side, c)
        grid = grid + cfg.noise_sigma * bg_stream.normal(side * side * c).reshape(
            side, side, c
        )
        paint_stream = SplitMix64(derive_seed(seed, "paint", level.value))
        for obj_idx, box in enumerate(placed):
            i0, i1, j0, j1 = grid_cell_span(
                box.x, box.y, box.w, box.h, level.stride, side, side
            )
            n_cells = (i1 - i0) * (j1 - j0)
            if n_cells <= 0:
                continue
            vectors = object_vectors[obj_idx]
            if vectors.shape[0] == 1:
                block = np.broadcast_to(vectors[0], (n_cells, c)).copy()
            else:
                pick = paint_stream.integers(n_cells, vectors.shape[0])
                block = vectors[pick]
            block = block + cfg.noise_sigma * paint_stream.normal(n_cells * c).reshape(
                n_cells, c
            )
            grid[i0:i1, j0:j1, :] = block.reshape(i1 - i0, j1 - j0, c)
        feature_maps[level] = FeatureMap(level=level, data=grid.astype(np.float32))

    return SyntheticScenario(
        feature_maps=feature_maps,
        known_boxes=known,
        unknown_boxes=unknown,
        background_prototypes=prototypes,
        noise_sigma=cfg.noise_sigma,
    )


def _jittered(stream: SplitMix64, box: Box, rel: float, image_size: int) -> Box:
    u = stream.uniform(4)
    w = box.w * math.exp((u[2] * 2 - 1) * rel)
    h = box.h * math.exp((u[3] * 2 - 1) * rel)
    w = min(w, image_size - 1.0)
    h = min(h, image_size - 1.0)
    cx = box.x + box.w / 2 + (u[0] * 2 - 1) * rel * box.w
    cy = box.y + box.h / 2 + (u[1] * 2 - 1) * rel * box.h
    x = min(max(cx - w / 2, 0.0), image_size - w)
    y = min(max(cy - h / 2, 0.0), image_size - h)
    return Box(x=float(x), y=float(y), w=float(w), h=float(h))


def generate_raw_proposals(
    scenario: SyntheticScenario, cfg: ScenarioConfig, seed: int
) -> list[ScoredBox]:
    """Noisy region proposals standing in for an unsupervised generator.

    Covers only a fraction of the unknown objects (the rest are left for
    self-training to discover), adds jittered copies of known objects (the
    known-IoU filter rule removes those) and size/aspect junk boxes.
    """
    stream = SplitMix64(derive_seed(seed, "raw-proposals"))
    img = scenario.image_size
    out: list[ScoredBox] = []

    n_unknown = len(scenario.unknown_boxes)
    n_cover = max(1, round(cfg.proposal_coverage * n_unknown))
    covered = sorted(stream.choice(n_unknown, n_cover).tolist())
    for idx in covered:
        for _ in range(cfg.proposals_per_covered):
            box = _jittered(stream, scenario.unknown_boxes[idx], cfg.proposal_jitter, img)
            score = 0.3 + 0.6 * float(stream.uniform(1)[0])
            out.append(ScoredBox(box=box, score=score))

    for labeled in scenario.known_boxes:
        box = _jittered(stream, labeled.box, cfg.proposal_jitter, img)
        score = 0.3 + 0.6 * float(stream.uniform(1)[0])
        out.append(ScoredBox(box=box, score=score))

    for _ in range(cfg.junk_proposals):
        side = _sample_side(stream, 25.0, 500.0)
        aspect = math.exp((float(stream.uniform(1)[0]) * 2 - 1) * math.log(6.0))
        w = min(side * math.sqrt(aspect), img - 1.0)
        h = min(side / math.sqrt(aspect), img - 1.0)
        x = float(stream.uniform(1)[0]) * (img - w)
        y = float(stream.uniform(1)[0]) * (img - h)
        score = 0.8 * float(stream.uniform(1)[0])
        out.append(ScoredBox(box=Box(x=x, y=y, w=w, h=h), score=score))
    return out


def sample_background_boxes(
    scenario: SyntheticScenario, count: int, seed: int, max_overlap: float = 0.05
) -> list[Box]:
    """Boxes over plain background, for scoring-separation checks.

    Rejects candidates that overlap any object by more than ``max_overlap``
    of either box's area (plain IoU would let a small object hide inside a
    large candidate).
    """
    stream = SplitMix64(derive_seed(seed, "background-boxes"))
    img = scenario.image_size
    objects = scenario.all_object_boxes
    out: list[Box] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 1000 * count:
            raise GenerationError("could not sample enough background boxes")
        side = _sample_side(stream, 47.0, 300.0)
        aspect = math.exp((float(stream.uniform(1)[0]) * 2 - 1) * math.log(4 / 3))
        w = side * math.sqrt(aspect)
        h = side / math.sqrt(aspect)
        if w >= img or h >= img:
            continue
        x = float(stream.uniform(1)[0]) * (img - w)
        y = float(stream.uniform(1)[0]) * (img - h)
        cand = Box(x=x, y=y, w=w, h=h)
        if all(_overlap_fraction(cand, obj) <= max_overlap for obj in objects):
            out.append(cand)
    return out


def _overlap_fraction(a: Box, b: Box) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / min(a.w * a.h, b.w * b.h)
