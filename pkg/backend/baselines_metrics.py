# non-local means baseline and image quality metrics

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage
from skimage.metrics import structural_similarity

from backend.errors import ConfigError, DimMismatch, OutOfBounds, ShapeTooSmall
from backend.tensor_io import HU_WINDOW_WIDTH, ArrayLike, as_array, from_hwc, to_hwc

logger = logging.getLogger(__name__)

# peak conventions
UNIT_PEAK = 1.0
HU_PEAK = HU_WINDOW_WIDTH

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class NlmParams:
    """h is in image-value units; patch distance is the squared difference summed over
    every pixel and channel of the patch"""

    h: float
    patch_size: int = 3
    window_radius: int = 7

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError(f"h must be > 0, got {self.h}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch size must be odd and >= 1, got {self.patch_size}")
        if self.window_radius < 1:
            raise ConfigError(f"window radius must be >= 1, got {self.window_radius}")
        if self.window_radius < self.patch_size // 2:
            raise ConfigError(
                f"window radius {self.window_radius} is below the patch radius "
                f"{self.patch_size // 2}")

    @property
    def patch_radius(self) -> int:
        return self.patch_size // 2


def _offsets(radius: int):
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            yield dy, dx


def _shifted(padded: np.ndarray, pad: int, dy: int, dx: int, h: int, w: int) -> np.ndarray:
    return padded[pad + dy:pad + dy + h, pad + dx:pad + dx + w]


def _patch_distance_map(img: np.ndarray, padded: np.ndarray, pad: int, dy: int, dx: int,
                        p: NlmParams) -> np.ndarray:
    """squared patch difference, summed over the patch, between every pixel and its
    (dy, dx) neighbour"""
    h, w, _ = img.shape
    diff = (img - _shifted(padded, pad, dy, dx, h, w)) ** 2
    box = ndimage.uniform_filter(diff.sum(axis=2), size=p.patch_size, mode="mirror")
    return np.maximum(box * p.patch_size ** 2, 0.0)


def nlm_denoise(img: ArrayLike, p: NlmParams) -> np.ndarray:
    """out(u) = sum_b w(u, b) img(b) over the search window

    w(u, b) ~ exp(-||P(u) - P(b)||^2 / h^2) with P the patch around a pixel,
    normalised to sum 1 over the window.
    """
    src = as_array(img)
    arr = to_hwc(src).astype(np.float64)
    h, w, c = arr.shape
    pad = p.window_radius
    padded = np.pad(arr, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    h2 = p.h * p.h

    weighted = np.zeros_like(arr)
    weight_sum = np.zeros((h, w, 1))
    for dy, dx in _offsets(p.window_radius):
        d2 = _patch_distance_map(arr, padded, pad, dy, dx, p)
        wgt = np.exp(-d2 / h2)[:, :, None]
        weighted += wgt * _shifted(padded, pad, dy, dx, h, w)
        weight_sum += wgt
    out = weighted / weight_sum
    logger.debug(f"NLM on {h}x{w}x{c}: h={p.h}, patch {p.patch_size}, "
                 f"window radius {p.window_radius}")
    return from_hwc(out.astype(np.float32), src.ndim)


def nlm_weights(img: ArrayLike, p: NlmParams, pixel: Tuple[int, int]) -> np.ndarray:
    """normalised (2r+1, 2r+1) weight window used for one output pixel"""
    arr = to_hwc(img).astype(np.float64)
    h, w, _ = arr.shape
    u, v = pixel
    if not (0 <= u < h and 0 <= v < w):
        raise OutOfBounds(f"pixel {pixel} outside {h}x{w}")
    pad = p.window_radius
    padded = np.pad(arr, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    size = 2 * p.window_radius + 1
    weights = np.empty((size, size))
    for dy, dx in _offsets(p.window_radius):
        d2 = _patch_distance_map(arr, padded, pad, dy, dx, p)
        weights[dy + pad, dx + pad] = math.exp(-d2[u, v] / (p.h * p.h))
    return weights / weights.sum()


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    x = as_array(a).astype(np.float64)
    y = as_array(b).astype(np.float64)
    if x.shape != y.shape:
        raise DimMismatch(f"cannot compare {x.shape} with {y.shape}")
    return x, y


def psnr(a: ArrayLike, b: ArrayLike, peak: float = UNIT_PEAK) -> float:
    """10 log10(peak^2 / mse); inf when the inputs are identical"""
    if not peak > 0:
        raise ConfigError(f"peak must be > 0, got {peak}")
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a: ArrayLike, b: ArrayLike, peak: float = UNIT_PEAK) -> float:
    """mean SSIM, 11x11 gaussian window (sigma 1.5), channels averaged for (H, W, C)"""
    if not peak > 0:
        raise ConfigError(f"peak must be > 0, got {peak}")
    x, y = _pair(a, b)
    if x.ndim not in (2, 3):
        raise DimMismatch(f"ssim needs a 2-d or (H, W, C) image, got {x.shape}")
    if min(x.shape[:2]) < 11:
        raise ShapeTooSmall(f"ssim needs at least 11x11 pixels, got {x.shape[:2]}")
    value = structural_similarity(
        x, y,
        data_range=peak,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
        channel_axis=2 if x.ndim == 3 else None,
    )
    return float(value)


def ssim_constant(mu_a: float, mu_b: float, peak: float = UNIT_PEAK) -> float:
    """closed form for two constant images: only the luminance term is left"""
    c1 = (SSIM_K1 * peak) ** 2
    return (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
