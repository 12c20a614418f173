"""Pyramid-level feature and error map containers with bit-exact binary I/O.

The on-disk format ("RFM1") is deliberately minimal so golden files can be
byte-compared and other implementations can read them without a tensor
library:

    magic   4 bytes  ASCII "RFM1"
    header  5 x u32 little-endian: level code (3..6), H, W, C, stride
    payload H*W*C float32 little-endian, row-major, channel-fastest

Error maps reuse the same layout with C = 1.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"RFM1"
_HEADER = struct.Struct("<5I")


class Level(str, enum.Enum):
    """Feature pyramid level. Stride is input pixels per feature cell."""

    P3 = "P3"
    P4 = "P4"
    P5 = "P5"
    P6 = "P6"

    @property
    def stride(self) -> int:
        return _STRIDES[self]

    @property
    def code(self) -> int:
        return int(self.value[1])

    @classmethod
    def from_code(cls, code: int) -> "Level":
        for level in cls:
            if level.code == code:
                return level
        raise FormatError(f"unknown pyramid level code {code}")


_STRIDES = {Level.P3: 8, Level.P4: 16, Level.P5: 32, Level.P6: 64}

# Default latent (bottleneck) width of the per-level reconstruction model.
DEFAULT_LATENT_DIMS = {Level.P3: 32, Level.P4: 16, Level.P5: 8, Level.P6: 4}

# Side-length band (pixels) of the objects each level is responsible for.
SIZE_RANGES = {
    Level.P3: (32.0, 64.0),
    Level.P4: (64.0, 128.0),
    Level.P5: (128.0, 256.0),
    Level.P6: (256.0, 512.0),
}


class FeatureIOError(Exception):
    """Base class for feature-file problems."""


class FormatError(FeatureIOError):
    """Bad magic bytes or malformed header."""


class TruncatedFileError(FeatureIOError):
    """Payload shorter than the header promises."""


class NonFiniteDataError(FeatureIOError):
    """NaN or infinity in the payload."""


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x C feature grid at one pyramid level.

    ``data`` is row-major with channels fastest; immutable after
    construction (the array is flagged read-only).
    """

    level: Level
    data: np.ndarray
    stride: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"feature data must be H x W x C, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"feature dimensions must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteDataError("feature map contains non-finite values")
        stride = self.stride or self.level.stride
        if stride != self.level.stride:
            raise ValueError(
                f"stride {stride} inconsistent with level {self.level.value} "
                f"(expected {self.level.stride})"
            )
        object.__setattr__(self, "stride", stride)
        arr = arr.copy() if not arr.flags.owndata or arr.base is not None else arr
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ErrorMap:
    """H x W grid of non-negative per-cell reconstruction errors."""

    level: Level
    data: np.ndarray
    stride: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"error data must be H x W, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteDataError("error map contains non-finite values")
        if (arr < 0).any():
            raise ValueError("error map contains negative values")
        stride = self.stride or self.level.stride
        if stride != self.level.stride:
            raise ValueError(
                f"stride {stride} inconsistent with level {self.level.value}"
            )
        object.__setattr__(self, "stride", stride)
        arr = arr.copy() if arr.base is not None else arr
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def grid_cell_span(
    x: float, y: float, w: float, h: float, stride: int, height: int, width: int
) -> tuple[int, int, int, int]:
    """Index ranges (i0, i1, j0, j1) of cells whose centers fall in a box.

    Cell (i, j) has its center at ((j + 0.5) * stride, (i + 0.5) * stride) in
    input pixels; membership is half-open on the right/bottom edges. Ranges
    are clamped to the grid and may be empty.
    """
    j0 = max(0, math.ceil(x / stride - 0.5))
    j1 = min(width, math.ceil((x + w) / stride - 0.5))
    i0 = max(0, math.ceil(y / stride - 0.5))
    i1 = min(height, math.ceil((y + h) / stride - 0.5))
    return i0, i1, j0, j1


def write_feature_map(fmap: FeatureMap, path: str | Path) -> None:
    payload = np.ascontiguousarray(fmap.data, dtype="<f4")
    header = _HEADER.pack(
        fmap.level.code, fmap.height, fmap.width, fmap.channels, fmap.stride
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header)
        fh.write(payload.tobytes())


def read_feature_map(path: str | Path) -> FeatureMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    level, shape = _parse_header(raw, path)
    h, w, c = shape
    data = _parse_payload(raw, h * w * c, path).reshape(h, w, c)
    return FeatureMap(level=level, data=data)


def write_error_map(emap: ErrorMap, path: str | Path) -> None:
    as_features = FeatureMap(
        level=emap.level, data=emap.data[:, :, None].astype(np.float32)
    )
    write_feature_map(as_features, path)


def read_error_map(path: str | Path) -> ErrorMap:
    fmap = read_feature_map(path)
    if fmap.channels != 1:
        raise FormatError(f"{path}: error map file must have C=1, got {fmap.channels}")
    return ErrorMap(level=fmap.level, data=fmap.data[:, :, 0].astype(np.float64))


def _parse_header(raw: bytes, path) -> tuple[Level, tuple[int, int, int]]:
    if len(raw) < len(_MAGIC) + _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the fixed header")
    if raw[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    code, h, w, c, stride = _HEADER.unpack_from(raw, len(_MAGIC))
    level = Level.from_code(code)
    if min(h, w, c) < 1:
        raise FormatError(f"{path}: non-positive dimensions ({h}, {w}, {c})")
    if stride != level.stride:
        raise FormatError(
            f"{path}: stride {stride} does not match level {level.value}"
        )
    return level, (h, w, c)


def _parse_payload(raw: bytes, count: int, path) -> np.ndarray:
    start = len(_MAGIC) + _HEADER.size
    expected = count * 4
    body = raw[start:]
    if len(body) < expected:
        raise TruncatedFileError(
            f"{path}: payload has {len(body)} bytes, expected {expected}"
        )
    if len(body) > expected:
        raise FormatError(f"{path}: {len(body) - expected} trailing bytes")
    data = np.frombuffer(body, dtype="<f4", count=count).astype(np.float32)
    if not np.isfinite(data).all():
        raise NonFiniteDataError(f"{path}: payload contains non-finite values")
    return data
