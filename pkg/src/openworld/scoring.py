"""Soft labeling of region proposals from pooled reconstruction errors.

Each proposal is routed to a pyramid level by its side length, its
reconstruction error is pooled with a 1x1 RoIAlign (2x2 bilinear sample
points), and the pooled error is converted into the likelihood of being a
true unknown object:

    s = (f_fg(re) / (f_bg(re) + f_fg(re)))^gamma

where f_fg / f_bg are the fitted foreground/background densities of the
routed level. gamma trades precision against recall: all proposals survive
as gamma -> 0, all sub-ratio proposals vanish as gamma grows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autoencoder as ae_mod
from .autoencoder import Autoencoder
from .boxes import Box, area
from .features import SIZE_RANGES, ErrorMap, FeatureMap, Level
from .weibull import WeibullPair, load_pairs, save_pairs


class ScoringError(Exception):
    pass


DEFAULT_GAMMA = 4.0


@dataclass(frozen=True)
class RewModel:
    """Persisted scoring artifact: reconstruction-error Weibull model.

    Bundles the per-level autoencoders and fitted density pairs with the
    size-based routing table and the sharpening exponent gamma.
    """

    autoencoders: Mapping[Level, Autoencoder]
    pairs: Mapping[Level, WeibullPair]
    size_ranges: Mapping[Level, tuple[float, float]] = field(
        default_factory=lambda: dict(SIZE_RANGES)
    )
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be finite and > 0, got {self.gamma}")
        missing = set(self.autoencoders) ^ set(self.pairs)
        if missing:
            raise ValueError(f"autoencoders and pairs disagree on levels: {missing}")

    @property
    def levels(self) -> list[Level]:
        return sorted(self.autoencoders, key=lambda lv: lv.code)


@dataclass(frozen=True)
class SoftLabeledProposal:
    box: Box
    soft_label: float
    pooled_error: float
    level: Level
    flag: str | None = None

    def __post_init__(self):
        if self.flag is None and not 0.0 <= self.soft_label <= 1.0:
            raise ValueError(f"soft label out of range: {self.soft_label}")


def route_level(
    box: Box, size_ranges: Mapping[Level, tuple[float, float]] = SIZE_RANGES
) -> Level:
    """Level whose side-length band contains sqrt(area), clamped outside."""
    side = math.sqrt(area(box))
    ordered = sorted(size_ranges, key=lambda lv: lv.code)
    for level in ordered[:-1]:
        if side < size_ranges[level][1]:
            return level
    return ordered[-1]


def pooled_error(emap: ErrorMap, box: Box, stride: int) -> float:
    """1x1 RoIAlign over the error map: mean of 2x2 bilinear samples.

    The box is mapped to grid units by dividing by the stride (no rounding);
    sample points sit at the quarter positions of the box. Cell (i, j) holds
    its value at grid point (j + 0.5, i + 0.5); sampling clamps to the border
    cells outside that range. Raises if the box misses the map entirely.
    """
    h, w = emap.height, emap.width
    if box.x >= w * stride or box.y >= h * stride or box.x2 <= 0 or box.y2 <= 0:
        raise ScoringError("box lies entirely outside the error map")
    gx0, gy0 = box.x / stride, box.y / stride
    gw, gh = box.w / stride, box.h / stride
    total = 0.0
    for fy in (0.25, 0.75):
        for fx in (0.25, 0.75):
            total += _bilinear(emap.data, gx0 + fx * gw, gy0 + fy * gh, h, w)
    return total / 4.0


def _bilinear(data: np.ndarray, gx: float, gy: float, h: int, w: int) -> float:
    u = min(max(gx - 0.5, 0.0), w - 1.0)
    v = min(max(gy - 0.5, 0.0), h - 1.0)
    j0 = min(int(math.floor(u)), w - 2) if w > 1 else 0
    i0 = min(int(math.floor(v)), h - 2) if h > 1 else 0
    fx = u - j0
    fy = v - i0
    j1 = min(j0 + 1, w - 1)
    i1 = min(i0 + 1, h - 1)
    top = data[i0, j0] * (1 - fx) + data[i0, j1] * fx
    bot = data[i1, j0] * (1 - fx) + data[i1, j1] * fx
    return float(top * (1 - fy) + bot * fy)


def pooled_errors_batch(emap: ErrorMap, boxes: np.ndarray, stride: int) -> np.ndarray:
    """Vectorized ``pooled_error`` for an (N, 4) array of (x, y, w, h) rows.

    Out-of-map boxes are not checked here; callers feeding arbitrary boxes
    should pre-validate. Agrees with the scalar path to float precision.
    """
    h, w = emap.height, emap.width
    gx0 = boxes[:, 0] / stride
    gy0 = boxes[:, 1] / stride
    gw = boxes[:, 2] / stride
    gh = boxes[:, 3] / stride
    acc = np.zeros(boxes.shape[0])
    for fy in (0.25, 0.75):
        for fx in (0.25, 0.75):
            u = np.clip(gx0 + fx * gw - 0.5, 0.0, w - 1.0)
            v = np.clip(gy0 + fy * gh - 0.5, 0.0, h - 1.0)
            j0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
            i0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
            fxs = u - j0
            fys = v - i0
            j1 = np.minimum(j0 + 1, w - 1)
            i1 = np.minimum(i0 + 1, h - 1)
            d = emap.data
            top = d[i0, j0] * (1 - fxs) + d[i0, j1] * fxs
            bot = d[i1, j0] * (1 - fxs) + d[i1, j1] * fxs
            acc += top * (1 - fys) + bot * fys
    return acc / 4.0


def _soft_label_and_flag(
    pair: WeibullPair, re: float, gamma: float
) -> tuple[float, str | None]:
    if re < 0:
        raise ValueError("pooled reconstruction error must be >= 0")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    log_fg = float(pair.fg.log_pdf(np.float64(re)))
    log_bg = float(pair.bg.log_pdf(np.float64(re)))
    fg_dead = log_fg == -np.inf
    bg_dead = log_bg == -np.inf
    if (fg_dead and bg_dead) or (math.isinf(log_fg) and math.isinf(log_bg)):
        return 0.0, "both densities vanish at this error value"
    if fg_dead:
        return 0.0, None
    if bg_dead or log_fg == np.inf:
        return 1.0, None
    # ratio = f_fg / (f_bg + f_fg) computed in the log domain
    ratio = 1.0 / (1.0 + math.exp(min(log_bg - log_fg, 700.0)))
    return float(ratio**gamma), None


def soft_label(pair: WeibullPair, re: float, gamma: float = DEFAULT_GAMMA) -> float:
    """Likelihood in [0, 1] that a pooled error comes from a true object."""
    value, _ = _soft_label_and_flag(pair, re, gamma)
    return value


def label_proposals(
    model: RewModel,
    error_maps: Mapping[Level, ErrorMap],
    proposals: Sequence[Box],
) -> list[SoftLabeledProposal]:
    """Route, pool, and score each proposal; output order matches input.

    Per-proposal failures (e.g. a box outside the map) produce flagged
    entries instead of aborting the batch.
    """
    needed = {route_level(b, model.size_ranges) for b in proposals}
    missing = {lv for lv in needed if lv not in error_maps}
    if missing:
        raise ScoringError(
            "missing error maps for levels: "
            + ", ".join(sorted(lv.value for lv in missing))
        )
    out: list[SoftLabeledProposal] = []
    for box in proposals:
        level = route_level(box, model.size_ranges)
        try:
            re = pooled_error(error_maps[level], box, level.stride)
            value, flag = _soft_label_and_flag(model.pairs[level], re, model.gamma)
        except ScoringError as err:
            out.append(
                SoftLabeledProposal(
                    box=box, soft_label=0.0, pooled_error=0.0, level=level, flag=str(err)
                )
            )
            continue
        out.append(
            SoftLabeledProposal(
                box=box, soft_label=value, pooled_error=re, level=level, flag=flag
            )
        )
    return out


def compute_error_maps(
    model: RewModel, feature_maps: Mapping[Level, FeatureMap]
) -> dict[Level, ErrorMap]:
    return {
        level: ae_mod.error_map(model.autoencoders[level], fmap)
        for level, fmap in feature_maps.items()
    }


def save_model(model: RewModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for level in model.levels:
        ae_mod.save_autoencoder(
            model.autoencoders[level], directory / f"autoencoder_{level.value}.json"
        )
    save_pairs(model.pairs, directory / "weibull.json")
    manifest = {
        "gamma": model.gamma,
        "levels": [lv.value for lv in model.levels],
        "size_ranges": {lv.value: list(model.size_ranges[lv]) for lv in model.size_ranges},
    }
    (directory / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(directory: str | Path) -> RewModel:
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    levels = [Level(v) for v in manifest["levels"]]
    autoencoders = {
        lv: ae_mod.load_autoencoder(directory / f"autoencoder_{lv.value}.json")
        for lv in levels
    }
    pairs = load_pairs(directory / "weibull.json")
    size_ranges = {
        Level(name): tuple(rng) for name, rng in manifest["size_ranges"].items()
    }
    return RewModel(
        autoencoders=autoencoders,
        pairs=pairs,
        size_ranges=size_ranges,
        gamma=manifest["gamma"],
    )
