# similar-slice sampling, distance map, dissimilar mask and masked loss

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from backend.errors import AllPixelsExcluded, ConfigError, DimMismatch, EvenPatchSize
from backend.rng import STREAM_SLICES, check_seed, make_rng
from backend.tensor_io import ArrayLike, as_array, to_hwc

logger = logging.getLogger(__name__)

# settings used for low-dose CT
DEFAULT_SLICE_RANGE = 2
DEFAULT_MASK_PATCH = 7
DEFAULT_THRESHOLD_HU = 30.0


class LossKind(Enum):
    MSE = "mse"
    L1 = "l1"


@dataclass
class SliceSampler:
    """draws a partner slice j for slice i from [i-k, i+k], clamped, j != i"""

    num_slices: int
    k: int = DEFAULT_SLICE_RANGE
    seed: int = 0
    _draws: Dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        check_seed(self.seed)
        if not 1 <= self.k < self.num_slices:
            raise ConfigError(
                f"slice range k={self.k} must satisfy 1 <= k < {self.num_slices}")

    def candidates(self, i: int) -> np.ndarray:
        if not 0 <= i < self.num_slices:
            raise ConfigError(f"slice index {i} outside [0, {self.num_slices})")
        lo = max(0, i - self.k)
        hi = min(self.num_slices - 1, i + self.k)
        span = np.arange(lo, hi + 1)
        return span[span != i]

    def sample_at(self, i: int, draw: int) -> int:
        """stateless draw number `draw` for slice i"""
        options = self.candidates(i)
        rng = make_rng(self.seed, STREAM_SLICES, i, draw)
        return int(options[rng.integers(0, len(options))])

    def sample(self, i: int) -> int:
        """next draw for slice i, counting draws per slice"""
        draw = self._draws.get(i, 0)
        self._draws[i] = draw + 1
        return self.sample_at(i, draw)


def sample_similar_slice(sampler: SliceSampler, i: int) -> int:
    return sampler.sample(i)


@dataclass(frozen=True, eq=False)
class DissimilarMask:
    """1 marks a dissimilar pixel, excluded from the loss"""

    mask: np.ndarray    # (H, W) uint8
    d_th: float
    s: int

    @property
    def excluded(self) -> int:
        return int(self.mask.sum())

    @property
    def weights(self) -> np.ndarray:
        """(H, W) float weights of the included pixels"""
        return 1.0 - self.mask.astype(np.float64)


def distance_map(x_i: ArrayLike, x_j: ArrayLike, s: int = DEFAULT_MASK_PATCH) -> np.ndarray:
    """d(u, v) = mean over channels of |s x s box mean of (x_i - x_j)|

    reflect padding at the borders (edge pixel not repeated).
    """
    if s < 1 or s % 2 == 0:
        raise EvenPatchSize(f"patch size must be odd and >= 1, got {s}")
    a = to_hwc(x_i)
    b = to_hwc(x_j)
    if a.shape != b.shape:
        raise DimMismatch(f"slices differ in shape: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    # scipy 'mirror' is numpy 'reflect'
    box = ndimage.uniform_filter(diff, size=(s, s, 1), mode="mirror")
    return np.abs(box).mean(axis=2)


def dissimilar_mask(d: np.ndarray, d_th: float = DEFAULT_THRESHOLD_HU,
                    s: int = DEFAULT_MASK_PATCH) -> DissimilarMask:
    if d_th < 0:
        raise ConfigError(f"threshold must be >= 0, got {d_th}")
    d = np.asarray(d)
    if d.ndim != 2:
        raise DimMismatch(f"distance map must be 2-d, got {d.shape}")
    return DissimilarMask((d > d_th).astype(np.uint8), float(d_th), int(s))


def _mask_weights(mask, spatial: Tuple[int, int]) -> np.ndarray:
    if mask is None:
        return np.ones(spatial, dtype=np.float64)
    m = mask.mask if isinstance(mask, DissimilarMask) else np.asarray(mask)
    if m.shape != spatial:
        raise DimMismatch(f"mask {m.shape} does not cover {spatial}")
    return 1.0 - m.astype(np.float64)


def masked_loss_and_grad(pred: ArrayLike, target: ArrayLike,
                         mask: Optional[DissimilarMask] = None,
                         kind: LossKind = LossKind.MSE) -> Tuple[float, np.ndarray]:
    """mean error over included pixels and its gradient w.r.t. pred"""
    p = to_hwc(pred).astype(np.float64)
    t = to_hwc(target).astype(np.float64)
    if p.shape != t.shape:
        raise DimMismatch(f"prediction {p.shape} vs target {t.shape}")
    weights = _mask_weights(mask, p.shape[:2])[:, :, None]
    count = weights.sum() * p.shape[2]
    if count == 0:
        raise AllPixelsExcluded("every pixel of the sample is masked out")

    diff = p - t
    if kind == LossKind.MSE:
        loss = float((weights * diff * diff).sum() / count)
        grad = 2.0 * weights * diff / count
    else:
        loss = float((weights * np.abs(diff)).sum() / count)
        grad = weights * np.sign(diff) / count
    return loss, grad.reshape(as_array(pred).shape)


def masked_loss(pred: ArrayLike, target: ArrayLike, mask: Optional[DissimilarMask] = None,
                kind: LossKind = LossKind.MSE) -> float:
    return masked_loss_and_grad(pred, target, mask, kind)[0]
