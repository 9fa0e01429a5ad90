# synthetic noise for experiments

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from backend.errors import NegativeSignal, NegativeStd, ConfigError
from backend.rng import STREAM_NOISE, check_seed, make_rng
from backend.tensor_io import ArrayLike, as_array

logger = logging.getLogger(__name__)

# reference levels: std 25 on [0, 255] images, lambda 30
REFERENCE_STD = 25.0 / 255.0
REFERENCE_LAMBDA = 30.0


class NoiseKind(Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind
    std: float = 0.0
    lam: float = REFERENCE_LAMBDA
    seed: int = 0

    def __post_init__(self):
        check_seed(self.seed)
        if self.kind == NoiseKind.GAUSSIAN and self.std < 0:
            raise NegativeStd(f"std must be >= 0, got {self.std}")
        if self.kind == NoiseKind.POISSON and not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")

    def apply(self, clean: ArrayLike) -> np.ndarray:
        if self.kind == NoiseKind.GAUSSIAN:
            return add_gaussian(clean, self.std, self.seed)
        return add_poisson(clean, self.lam, self.seed)


def add_gaussian(clean: ArrayLike, std: float, seed: int) -> np.ndarray:
    """clean + N(0, std^2), i.i.d. per element

    Element i in row-major order takes draw i of the (seed, noise) stream, so
    its noise depends only on the seed and its flat index, never on the
    shape or values of the rest of the tensor.
    """
    if std < 0:
        raise NegativeStd(f"std must be >= 0, got {std}")
    x = as_array(clean)
    if std == 0:
        return x.astype(np.float32)

    rng = make_rng(seed, STREAM_NOISE, 0)
    noise = rng.standard_normal(x.size).reshape(x.shape)
    out = (x.astype(np.float64) + std * noise).astype(np.float32)
    logger.debug(f"Gaussian noise std={std} on {x.shape}, seed={seed}")
    return out


def add_poisson(clean: ArrayLike, lam: float, seed: int) -> np.ndarray:
    """x = Poisson(lam * s) / lam, so E[x] = s and Var[x] = s / lam

    Counts are drawn in row-major order from one (seed, noise) stream. The
    sampler's rejection loop consumes a value-dependent number of draws, so
    an element's count also depends on the signal before it.
    """
    if not lam > 0:
        raise ConfigError(f"lambda must be > 0, got {lam}")
    x = as_array(clean)
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise NegativeSignal("Poisson noise needs a finite non-negative signal")

    rng = make_rng(seed, STREAM_NOISE, 1)
    # numpy switches from inversion to PTRS rejection for large means
    counts = rng.poisson(lam * x.astype(np.float64))
    out = (counts / lam).astype(np.float32)
    logger.debug(f"Poisson noise lambda={lam} on {x.shape}, seed={seed}")
    return out
