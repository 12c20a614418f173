"""Exponentiated-Weibull density, MLE fitting, and per-level error sampling.

The density family has two shape parameters (a, c) and a scale lambda:

    f(x) = (a*c/lam) * [1 - exp(-(x/lam)^c)]^(a-1) * exp(-(x/lam)^c) * (x/lam)^(c-1)

With lam = 1 this is the classical exponentiated Weibull; the scale is fitted
alongside the shapes because reconstruction errors carry arbitrary units.
Fitting maximizes the log-likelihood over log-parameters with a Nelder-Mead
simplex from five fixed starting points, so results are reproducible without
a numerical-optimization dependency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .boxes import Box
from .features import ErrorMap, Level, grid_cell_span
from .rng import SplitMix64, derive_seed


class WeibullError(Exception):
    """Base class for fitting problems."""


class DegenerateSamplesError(WeibullError):
    """Samples carry no usable spread (e.g. all values identical)."""


class FitError(WeibullError):
    """The optimizer failed to produce finite parameters."""


class EmptyRegionError(WeibullError):
    """A foreground or background cell set came out empty."""


@dataclass(frozen=True)
class ExpWeibull:
    """Exponentiated-Weibull parameters: shapes ``a``, ``c``; scale ``lam``."""

    a: float
    c: float
    lam: float

    def __post_init__(self):
        for name in ("a", "c", "lam"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")

    def log_pdf(self, x) -> np.ndarray:
        """Elementwise log-density; -inf where the density is 0."""
        x = np.asarray(x, dtype=np.float64)
        if (x < 0).any():
            raise ValueError("reconstruction errors must be >= 0")
        out = np.full(x.shape, -np.inf)
        pos = x > 0
        if pos.any():
            xs = x[pos]
            log_z = np.log(xs) - math.log(self.lam)
            with np.errstate(over="ignore", under="ignore"):
                t = np.exp(self.c * log_z)
                # log(1 - exp(-t)), stable for both tiny and large t
                log_g = np.where(t > 0, np.log(-np.expm1(-np.minimum(t, 745.0))), -np.inf)
                val = (
                    math.log(self.a * self.c / self.lam)
                    + (self.a - 1.0) * log_g
                    - t
                    + (self.c - 1.0) * log_z
                )
            val = np.where(np.isnan(val), -np.inf, val)
            out[pos] = val
        zero = ~pos
        if zero.any():
            out[zero] = self._log_pdf_at_zero()
        return out

    def pdf(self, x) -> np.ndarray:
        """Elementwise density. At x = 0 the analytic limit is used."""
        scalar = np.isscalar(x)
        with np.errstate(over="ignore"):
            res = np.exp(self.log_pdf(x))
        return float(res) if scalar else res

    def _log_pdf_at_zero(self) -> float:
        # f(x) ~ (a*c/lam) * (x/lam)^(a*c - 1) near 0: the limit depends on a*c.
        ac = self.a * self.c
        if ac > 1.0:
            return -np.inf
        if ac == 1.0:
            return math.log(ac / self.lam)
        return np.inf

    def cdf(self, x) -> np.ndarray:
        """F(x) = (1 - exp(-(x/lam)^c))^a."""
        x = np.asarray(x, dtype=np.float64)
        if (x < 0).any():
            raise ValueError("reconstruction errors must be >= 0")
        out = np.zeros(x.shape)
        pos = x > 0
        if pos.any():
            t = np.exp(self.c * (np.log(x[pos]) - math.log(self.lam)))
            out[pos] = np.exp(self.a * np.log(-np.expm1(-np.minimum(t, 745.0))))
        return out

    def inverse_cdf(self, u) -> np.ndarray:
        """Analytic quantile function: lam * (-log(1 - u^(1/a)))^(1/c)."""
        u = np.asarray(u, dtype=np.float64)
        if ((u < 0) | (u >= 1)).any():
            raise ValueError("u must lie in [0, 1)")
        out = np.zeros(u.shape)
        pos = u > 0
        if pos.any():
            inner = -np.log1p(-np.power(u[pos], 1.0 / self.a))
            out[pos] = self.lam * np.power(inner, 1.0 / self.c)
        return out

    def sample(self, n: int, seed: int) -> np.ndarray:
        """``n`` draws by inverse-CDF transform of splitmix64 uniforms."""
        return self.inverse_cdf(SplitMix64(seed).uniform(n))


@dataclass(frozen=True)
class ErrorSamples:
    """Non-empty collection of non-negative reconstruction errors."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64).ravel()
        if arr.size == 0:
            raise ValueError("error sample set must be non-empty")
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise ValueError("error samples must be finite and >= 0")
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class WeibullPair:
    """Fitted foreground and background models for one pyramid level."""

    level: Level
    fg: ExpWeibull
    bg: ExpWeibull
    fg_sample_count: int
    bg_sample_count: int

    def __post_init__(self):
        if self.fg_sample_count < 1 or self.bg_sample_count < 1:
            raise ValueError("sample counts must be positive")


def mean_log_likelihood(model: ExpWeibull, samples: np.ndarray) -> float:
    values = model.log_pdf(samples)
    return float(np.mean(values))


def nelder_mead(
    fn: Callable[[np.ndarray], float],
    x0: np.ndarray,
    step: float = 0.25,
    max_iter: int = 500,
    ftol: float = 1e-8,
) -> tuple[np.ndarray, float]:
    """Minimize ``fn`` with a standard Nelder-Mead simplex.

    Coefficients: reflection 1, expansion 2, contraction 0.5, shrink 0.5.
    Stops when the spread of simplex function values falls below ``ftol`` or
    after ``max_iter`` iterations. Returns the best vertex seen.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    simplex = [x0.copy()]
    for i in range(n):
        v = x0.copy()
        v[i] += step
        simplex.append(v)
    values = [fn(v) for v in simplex]

    for _ in range(max_iter):
        order = np.argsort(values, kind="stable")
        simplex = [simplex[i] for i in order]
        values = [values[i] for i in order]
        if math.isfinite(values[-1]) and values[-1] - values[0] < ftol:
            break

        centroid = np.mean(simplex[:-1], axis=0)
        reflected = centroid + (centroid - simplex[-1])
        f_ref = fn(reflected)
        if f_ref < values[0]:
            expanded = centroid + 2.0 * (centroid - simplex[-1])
            f_exp = fn(expanded)
            if f_exp < f_ref:
                simplex[-1], values[-1] = expanded, f_exp
            else:
                simplex[-1], values[-1] = reflected, f_ref
        elif f_ref < values[-2]:
            simplex[-1], values[-1] = reflected, f_ref
        else:
            contracted = centroid + 0.5 * (simplex[-1] - centroid)
            f_con = fn(contracted)
            if f_con < values[-1]:
                simplex[-1], values[-1] = contracted, f_con
            else:
                best = simplex[0]
                simplex = [best] + [best + 0.5 * (v - best) for v in simplex[1:]]
                values = [values[0]] + [fn(v) for v in simplex[1:]]

    best_idx = int(np.argmin(values))
    return simplex[best_idx], values[best_idx]


# Fixed (a, c) multi-start grid; the scale start is the sample median.
_FIT_STARTS = ((1.0, 1.0), (1.0, 2.0), (2.0, 1.0), (3.0, 0.7), (0.7, 3.0))
_SAMPLE_FLOOR = 1e-12


def fit_mle(
    samples: ErrorSamples,
    min_samples: int = 100,
    max_iter: int = 500,
    ftol: float = 1e-8,
) -> ExpWeibull:
    """Maximum-likelihood exponentiated-Weibull fit.

    Runs Nelder-Mead on (log a, log c, log lam) from the five documented
    starts and returns the best vertex; the achieved log-likelihood is never
    below that of any start point because the simplex keeps its best vertex.
    """
    x = np.maximum(samples.values, _SAMPLE_FLOOR)
    if x.size < min_samples:
        raise WeibullError(f"need >= {min_samples} samples, got {x.size}")
    if np.ptp(x) == 0:
        raise DegenerateSamplesError("all error samples are identical")

    log_x = np.log(x)

    # search box: each log-parameter confined to [-20, 20]; the family has a
    # likelihood ridge (a -> inf, lam -> 0) for sharp-onset data, and the box
    # turns that into a finite, stable fit
    def neg_mean_ll(theta: np.ndarray) -> float:
        if np.abs(theta).max() > 20.0:
            return np.inf
        a, c, lam = np.exp(theta)
        log_z = log_x - theta[2]
        with np.errstate(over="ignore", under="ignore"):
            t = np.exp(c * log_z)
            log_g = np.log(-np.expm1(-np.minimum(t, 745.0)))
            ll = (
                math.log(a * c / lam)
                + (a - 1.0) * log_g
                - t
                + (c - 1.0) * log_z
            )
        mean = np.mean(ll)
        return -float(mean) if np.isfinite(mean) else np.inf

    median = float(np.median(x))
    best_theta, best_val = None, np.inf
    for a0, c0 in _FIT_STARTS:
        theta0 = np.log([a0, c0, median])
        theta, val = nelder_mead(neg_mean_ll, theta0, max_iter=max_iter, ftol=ftol)
        if val < best_val:
            best_theta, best_val = theta, val

    if best_theta is None or not np.isfinite(best_val):
        raise FitError("no multi-start produced a finite log-likelihood")
    a, c, lam = np.exp(best_theta)
    if not all(map(math.isfinite, (a, c, lam))):
        raise FitError(f"optimizer produced non-finite parameters {best_theta}")
    return ExpWeibull(a=float(a), c=float(c), lam=float(lam))


def cell_region_masks(
    emap: ErrorMap,
    known_boxes: Sequence[Box],
    pseudo_boxes: Sequence[Box],
    stride: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Foreground/background boolean masks over the error grid.

    A cell belongs to the foreground when its center (in input pixels) falls
    inside any known box, half-open on the right/bottom edges; to the
    background when it is inside no known and no pseudo box.
    """
    h, w = emap.height, emap.width
    known = _coverage_mask(known_boxes, h, w, stride)
    pseudo = _coverage_mask(pseudo_boxes, h, w, stride)
    return known, ~known & ~pseudo


def _coverage_mask(boxes: Sequence[Box], h: int, w: int, stride: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for b in boxes:
        i0, i1, j0, j1 = grid_cell_span(b.x, b.y, b.w, b.h, stride, h, w)
        if j1 > j0 and i1 > i0:
            mask[i0:i1, j0:j1] = True
    return mask


def sample_errors(
    emap: ErrorMap,
    known_boxes: Sequence[Box],
    pseudo_boxes: Sequence[Box],
    stride: int,
    max_samples: int = 100_000,
    seed: int = 0,
) -> tuple[ErrorSamples, ErrorSamples]:
    """Split cell errors into foreground/background sample sets.

    Each side is uniformly subsampled to ``max_samples`` with its own
    deterministic stream derived from ``seed``.
    """
    fg_mask, bg_mask = cell_region_masks(emap, known_boxes, pseudo_boxes, stride)
    fg = emap.data[fg_mask]
    bg = emap.data[bg_mask]
    if fg.size == 0:
        raise EmptyRegionError("no cells fall inside known boxes")
    if bg.size == 0:
        raise EmptyRegionError("no cells remain outside known and pseudo boxes")
    fg = _subsample(fg, max_samples, derive_seed(seed, "fg"))
    bg = _subsample(bg, max_samples, derive_seed(seed, "bg"))
    return ErrorSamples(fg), ErrorSamples(bg)


def _subsample(values: np.ndarray, max_samples: int, seed: int) -> np.ndarray:
    if values.size <= max_samples:
        return values
    idx = SplitMix64(seed).choice(values.size, max_samples)
    return values[np.sort(idx)]


@dataclass(frozen=True)
class WeibullFitConfig:
    max_samples: int = 100_000
    min_samples: int = 100
    seed: int = 0


def fit_pair(
    error_maps: Mapping[Level, ErrorMap],
    known_boxes: Sequence[Box],
    pseudo_boxes: Sequence[Box],
    config: WeibullFitConfig = WeibullFitConfig(),
) -> dict[Level, WeibullPair]:
    """Fit one foreground/background model pair per pyramid level."""
    pairs: dict[Level, WeibullPair] = {}
    for level in sorted(error_maps, key=lambda lv: lv.code):
        emap = error_maps[level]
        fg, bg = sample_errors(
            emap,
            known_boxes,
            pseudo_boxes,
            stride=level.stride,
            max_samples=config.max_samples,
            seed=derive_seed(config.seed, level.value),
        )
        if len(fg) < config.min_samples or len(bg) < config.min_samples:
            raise WeibullError(
                f"{level.value}: need >= {config.min_samples} samples per side, "
                f"got fg={len(fg)}, bg={len(bg)}"
            )
        pairs[level] = WeibullPair(
            level=level,
            fg=fit_mle(fg, min_samples=config.min_samples),
            bg=fit_mle(bg, min_samples=config.min_samples),
            fg_sample_count=len(fg),
            bg_sample_count=len(bg),
        )
    return pairs


def pair_to_dict(pair: WeibullPair) -> dict:
    return {
        "level": pair.level.value,
        "fg": {"a": pair.fg.a, "c": pair.fg.c, "lambda": pair.fg.lam},
        "bg": {"a": pair.bg.a, "c": pair.bg.c, "lambda": pair.bg.lam},
        "fg_sample_count": pair.fg_sample_count,
        "bg_sample_count": pair.bg_sample_count,
    }


def pair_from_dict(doc: dict) -> WeibullPair:
    def model(part: dict) -> ExpWeibull:
        return ExpWeibull(a=part["a"], c=part["c"], lam=part["lambda"])

    return WeibullPair(
        level=Level(doc["level"]),
        fg=model(doc["fg"]),
        bg=model(doc["bg"]),
        fg_sample_count=doc["fg_sample_count"],
        bg_sample_count=doc["bg_sample_count"],
    )


def save_pairs(pairs: Mapping[Level, WeibullPair], path: str | Path) -> None:
    doc = [pair_to_dict(pairs[lv]) for lv in sorted(pairs, key=lambda lv: lv.code)]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_pairs(path: str | Path) -> dict[Level, WeibullPair]:
    doc = json.loads(Path(path).read_text())
    pairs = [pair_from_dict(item) for item in doc]
    return {pair.level: pair for pair in pairs}
