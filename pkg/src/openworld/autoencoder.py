"""Per-level linear autoencoder over feature-map cells.

Encoder and decoder are single linear maps applied independently to each
spatial cell (the 1x1-kernel case), trained by plain SGD to minimize the
mean per-cell l2 reconstruction distance. Cells with large residuals after
training mark rarely-seen content; the per-cell residual norms form the
error map consumed downstream.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import DEFAULT_LATENT_DIMS, ErrorMap, FeatureMap, Level
from .rng import SplitMix64, derive_seed


class TrainingDivergedError(Exception):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class Autoencoder:
    """Linear encoder/decoder weights for one pyramid level.

    ``enc_w`` is latent x input, ``dec_w`` input x latent; biases match the
    output side of each map.
    """

    level: Level
    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray

    def __post_init__(self):
        enc_w = np.asarray(self.enc_w, dtype=np.float64)
        dec_w = np.asarray(self.dec_w, dtype=np.float64)
        enc_b = np.asarray(self.enc_b, dtype=np.float64)
        dec_b = np.asarray(self.dec_b, dtype=np.float64)
        latent, input_dim = enc_w.shape
        if latent >= input_dim:
            raise ValueError(f"latent dim {latent} must be < input dim {input_dim}")
        if dec_w.shape != (input_dim, latent):
            raise ValueError(
                f"decoder shape {dec_w.shape} does not mirror encoder {enc_w.shape}"
            )
        if enc_b.shape != (latent,) or dec_b.shape != (input_dim,):
            raise ValueError("bias shapes do not match weight shapes")
        for arr in (enc_w, enc_b, dec_w, dec_b):
            if not np.isfinite(arr).all():
                raise ValueError("autoencoder parameters must be finite")
        object.__setattr__(self, "enc_w", enc_w)
        object.__setattr__(self, "enc_b", enc_b)
        object.__setattr__(self, "dec_w", dec_w)
        object.__setattr__(self, "dec_b", dec_b)

    @property
    def input_dim(self) -> int:
        return self.enc_w.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.enc_w.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 12
    batch_cells: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_cells < 1:
            raise ValueError("batch_cells must be >= 1")


def init_autoencoder(level: Level, input_dim: int, latent_dim: int | None = None,
                     seed: int = 0) -> Autoencoder:
    """Fresh autoencoder with weights uniform in +-1/sqrt(input_dim)."""
    if latent_dim is None:
        latent_dim = DEFAULT_LATENT_DIMS[level]
    rng = SplitMix64(derive_seed(seed, "ae-init", level.value))
    bound = 1.0 / math.sqrt(input_dim)
    enc_w = (rng.uniform(latent_dim * input_dim) * 2.0 - 1.0) * bound
    dec_w = (rng.uniform(input_dim * latent_dim) * 2.0 - 1.0) * bound
    return Autoencoder(
        level=level,
        enc_w=enc_w.reshape(latent_dim, input_dim),
        enc_b=np.zeros(latent_dim),
        dec_w=dec_w.reshape(input_dim, latent_dim),
        dec_b=np.zeros(input_dim),
    )


def _check_compatible(ae: Autoencoder, fmap: FeatureMap) -> None:
    if fmap.channels != ae.input_dim:
        raise ValueError(
            f"feature map has {fmap.channels} channels, autoencoder expects {ae.input_dim}"
        )
    if fmap.level != ae.level:
        raise ValueError(f"level mismatch: map {fmap.level.value}, model {ae.level.value}")


def _reconstruct_cells(ae: Autoencoder, cells: np.ndarray) -> np.ndarray:
    latent = cells @ ae.enc_w.T + ae.enc_b
    return latent @ ae.dec_w.T + ae.dec_b


def reconstruct(ae: Autoencoder, fmap: FeatureMap) -> FeatureMap:
    """Apply decoder(encoder(.)) per cell; output dims equal input dims."""
    _check_compatible(ae, fmap)
    cells = fmap.data.reshape(-1, fmap.channels).astype(np.float64)
    rec = _reconstruct_cells(ae, cells)
    return FeatureMap(level=fmap.level, data=rec.reshape(fmap.data.shape))


def cell_errors(ae: Autoencoder, fmap: FeatureMap) -> np.ndarray:
    _check_compatible(ae, fmap)
    cells = fmap.data.reshape(-1, fmap.channels).astype(np.float64)
    residual = _reconstruct_cells(ae, cells) - cells
    return np.linalg.norm(residual, axis=1)


def reconstruction_loss(ae: Autoencoder, fmap: FeatureMap) -> float:
    """Mean over cells of the l2 residual norm (not squared)."""
    return float(np.mean(cell_errors(ae, fmap)))


def error_map(ae: Autoencoder, fmap: FeatureMap) -> ErrorMap:
    errors = cell_errors(ae, fmap).reshape(fmap.height, fmap.width)
    return ErrorMap(level=fmap.level, data=errors)


@dataclass(frozen=True)
class Gradients:
    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray

    def norm(self) -> float:
        return math.sqrt(
            float(np.sum(self.enc_w**2) + np.sum(self.enc_b**2)
                  + np.sum(self.dec_w**2) + np.sum(self.dec_b**2))
        )


def _cell_gradients(ae: Autoencoder, cells: np.ndarray) -> Gradients:
    n = cells.shape[0]
    latent = cells @ ae.enc_w.T + ae.enc_b
    rec = latent @ ae.dec_w.T + ae.dec_b
    residual = rec - cells
    norms = np.linalg.norm(residual, axis=1)
    # d(mean ||r_i||)/d r_i = r_i / (n ||r_i||); exactly-zero residuals are
    # stationary and contribute nothing.
    safe = np.where(norms > 0, norms, 1.0)
    upstream = residual / (n * safe[:, None])
    upstream[norms == 0] = 0.0

    dec_w = upstream.T @ latent
    dec_b = upstream.sum(axis=0)
    d_latent = upstream @ ae.dec_w
    enc_w = d_latent.T @ cells
    enc_b = d_latent.sum(axis=0)
    return Gradients(enc_w=enc_w, enc_b=enc_b, dec_w=dec_w, dec_b=dec_b)


def loss_gradient(ae: Autoencoder, fmap: FeatureMap) -> Gradients:
    """Exact gradients of ``reconstruction_loss`` for all parameter blocks."""
    _check_compatible(ae, fmap)
    cells = fmap.data.reshape(-1, fmap.channels).astype(np.float64)
    return _cell_gradients(ae, cells)


def train(ae: Autoencoder, maps: Sequence[FeatureMap], cfg: TrainConfig) -> Autoencoder:
    """Mini-batch SGD on the mean residual-norm loss.

    Cells from all maps are pooled and reshuffled every epoch with a stream
    derived from (cfg.seed, epoch). Raises ``TrainingDivergedError`` if the
    loss stops being finite.
    """
    for fmap in maps:
        _check_compatible(ae, fmap)
    if not maps:
        raise ValueError("need at least one feature map to train on")
    cells = np.concatenate(
        [m.data.reshape(-1, m.channels).astype(np.float64) for m in maps], axis=0
    )
    n = cells.shape[0]

    enc_w, enc_b = ae.enc_w.copy(), ae.enc_b.copy()
    dec_w, dec_b = ae.dec_w.copy(), ae.dec_b.copy()
    work = replace(ae, enc_w=enc_w, enc_b=enc_b, dec_w=dec_w, dec_b=dec_b)
    lr = cfg.learning_rate

    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            perm = SplitMix64(derive_seed(cfg.seed, "ae-shuffle", epoch)).permutation(n)
            for start in range(0, n, cfg.batch_cells):
                batch = cells[perm[start : start + cfg.batch_cells]]
                grads = _cell_gradients(work, batch)
                enc_w -= lr * grads.enc_w
                enc_b -= lr * grads.enc_b
                dec_w -= lr * grads.dec_w
                dec_b -= lr * grads.dec_b
                try:
                    work = replace(
                        work, enc_w=enc_w, enc_b=enc_b, dec_w=dec_w, dec_b=dec_b
                    )
                except ValueError:
                    # parameters left the finite range mid-epoch
                    raise TrainingDivergedError(epoch)
            epoch_residual = _reconstruct_cells(work, cells) - cells
            epoch_loss = float(np.mean(np.linalg.norm(epoch_residual, axis=1)))
            if not math.isfinite(epoch_loss):
                raise TrainingDivergedError(epoch)
    return work


def training_loss(ae: Autoencoder, maps: Sequence[FeatureMap]) -> float:
    """Mean residual norm over the pooled cells of several maps."""
    losses = []
    weights = []
    for m in maps:
        losses.append(reconstruction_loss(ae, m))
        weights.append(m.height * m.width)
    return float(np.average(losses, weights=weights))


def save_autoencoder(ae: Autoencoder, path: str | Path) -> None:
    """Persist as JSON: dims plus base64 little-endian float64 blobs."""
    def blob(arr: np.ndarray) -> str:
        return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()

    doc = {
        "level": ae.level.value,
        "input_dim": ae.input_dim,
        "latent_dim": ae.latent_dim,
        "enc_w": blob(ae.enc_w),
        "enc_b": blob(ae.enc_b),
        "dec_w": blob(ae.dec_w),
        "dec_b": blob(ae.dec_b),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_autoencoder(path: str | Path) -> Autoencoder:
    doc = json.loads(Path(path).read_text())

    def blob(key: str, shape: tuple[int, ...]) -> np.ndarray:
        raw = base64.b64decode(doc[key])
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    c, latent = doc["input_dim"], doc["latent_dim"]
    return Autoencoder(
        level=Level(doc["level"]),
        enc_w=blob("enc_w", (latent, c)),
        enc_b=blob("enc_b", (latent,)),
        dec_w=blob("dec_w", (c, latent)),
        dec_b=blob("dec_b", (c,)),
    )
