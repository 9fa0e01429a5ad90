# procedural test images and a synthetic CT volume

import logging
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from backend.errors import ConfigError
from backend.rng import STREAM_PHANTOM, check_seed, make_rng

logger = logging.getLogger(__name__)

TEXTURE_KINDS = ("stripes", "checker", "blobs", "rings")

# soft tissue background and the contrast of the structures that come and go between slices
TISSUE_HU = 40.0
BLOB_HU = 300.0
# blob templates: the top share of a smooth random field, clipped to the body
BLOB_COVERAGE = 0.2


def _unit(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo == 0:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def texture(kind: str, size: int = 64, seed: int = 0) -> np.ndarray:
    """(size, size) float32 texture in [0.1, 0.9]"""
    if kind not in TEXTURE_KINDS:
        raise ConfigError(f"unknown texture '{kind}', expected one of {TEXTURE_KINDS}")
    if size < 8:
        raise ConfigError(f"texture size must be >= 8, got {size}")
    check_seed(seed)
    rng = make_rng(seed, STREAM_PHANTOM, TEXTURE_KINDS.index(kind))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    if kind == "stripes":
        angle = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 7)
        phase = np.cos(angle) * xx + np.sin(angle) * yy
        img = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * freq * phase))
        img = ndimage.gaussian_filter(img, 0.7, mode="reflect")
    elif kind == "checker":
        cells = int(rng.integers(4, 9))
        img = ((np.floor(xx * cells) + np.floor(yy * cells)) % 2).astype(np.float64)
        img = ndimage.gaussian_filter(img, 0.5, mode="reflect")
    elif kind == "blobs":
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 12,
                                        mode="wrap")
        img = (field > np.quantile(field, 0.5)).astype(np.float64)
        img = 0.6 * img + 0.4 * _unit(field)
    else:
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        r = np.hypot(yy - cy, xx - cx)
        img = 0.5 + 0.5 * np.cos(2 * np.pi * rng.uniform(4, 8) * r)

    return (0.1 + 0.8 * _unit(img)).astype(np.float32)


def texture_set(count: int = 4, size: int = 64, seed: int = 0) -> List[np.ndarray]:
    """`count` textures cycling through the kinds, each with its own seed"""
    return [texture(TEXTURE_KINDS[i % len(TEXTURE_KINDS)], size, seed + i)
            for i in range(count)]


def hu_volume(slices: int = 32, size: int = 32, seed: int = 0,
              change_fraction: float = 0.2) -> Tuple[np.ndarray, np.ndarray]:
    """(D, size, size) HU volume and its per-slice blob masks

    a smooth anatomy that drifts slowly along the slice axis, plus bright
    blobs inside the body. Each blob persists along the slices and appears
    or vanishes between neighbouring slices with probability
    `change_fraction`; with 0 every slice carries the same blobs.
    """
    if slices < 2 or size < 8:
        raise ConfigError(f"volume needs >= 2 slices of >= 8 px, got {slices}x{size}")
    if not 0 <= change_fraction < 1:
        raise ConfigError(f"change fraction must be in [0, 1), got {change_fraction}")
    check_seed(seed)

    rng = make_rng(seed, STREAM_PHANTOM, 100)
    yy, xx = np.mgrid[0:size, 0:size] / size
    body = (np.hypot(yy - 0.5, xx - 0.5) < 0.45).astype(np.float64)
    organs = ndimage.gaussian_filter(rng.standard_normal((2, size, size)), (0, size / 8, size / 8))
    organs = 80.0 * (2 * _unit(organs) - 1)

    field = ndimage.gaussian_filter(
        make_rng(seed, STREAM_PHANTOM, 101).standard_normal((size, size)), size / 16, mode="wrap")
    template = (field > np.quantile(field, 1 - BLOB_COVERAGE)) & (body > 0)
    labels, count = ndimage.label(template)
    toggle_rng = make_rng(seed, STREAM_PHANTOM, 102)
    flips = np.empty((slices, count), dtype=bool)
    flips[0] = toggle_rng.random(count) < 0.5
    flips[1:] = toggle_rng.random((slices - 1, count)) < change_fraction
    present = np.logical_xor.accumulate(flips, axis=0)
    # label 0 is background
    blobs = np.concatenate([np.zeros((slices, 1), dtype=bool), present], axis=1)[:, labels]

    vol = np.empty((slices, size, size), dtype=np.float64)
    for i in range(slices):
        t = i / (slices - 1)
        anatomy = (1 - t) * organs[0] + t * organs[1]
        vol[i] = body * (TISSUE_HU + anatomy) + (1 - body) * -1000.0
    vol[blobs] += BLOB_HU

    logger.debug(f"HU volume {vol.shape}: {count} blobs, {blobs.mean():.3f} of pixels covered")
    return vol.astype(np.float32), blobs
