# desk-scale experiments: equivalence, mask ablation, median vs mean, NLM sweep

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.baselines_metrics import HU_PEAK, UNIT_PEAK, NlmParams, nlm_denoise, psnr
from backend.errors import ConfigError
from backend.neural_denoiser import im2col
from backend.noise_sim import REFERENCE_STD, add_gaussian
from backend.phantoms import hu_volume, texture_set
from backend.rng import STREAM_PHANTOM, check_seed, make_rng
from backend.sim_search import (
    NearestImages, PairingKind, PairingMethod, build_neighbors, construct_similar_pair
)
from backend.training import (
    DatasetHandle, TrainConfig, TrainMode, denoise, iterative_refine, train
)
from backend.volume_pairing import LossKind

logger = logging.getLogger(__name__)

EQUIVALENCE_ROWS = 10
EQUIVALENCE_STD = 0.05
ABLATION_STD_HU = 25.0
HU_SCALE = 1000.0
NLM_FACTORS = (0.5, 0.75, 1.0, 1.5, 2.0)
# texture benchmark search: k, patch side, window radius
TEXTURE_K = 16
TEXTURE_PATCH = 7
TEXTURE_WINDOW = 7


# --- noise2clean vs noise2sim on exact duplicates ---

@dataclass
class EquivalenceResult:
    pixels: int
    gap: float
    clean_params: np.ndarray
    sim_params: np.ndarray


def tripled_image(pixels: int, seed: int) -> Tuple[np.ndarray, NearestImages]:
    """clean image made of three identical copies, and its exact duplicate table

    values are a permutation grid, so every pixel has exactly two
    zero-distance partners: its twins in the other copies.
    """
    width = max(1, round(pixels / (3 * EQUIVALENCE_ROWS)))
    count = EQUIVALENCE_ROWS * width
    rng = make_rng(seed, STREAM_PHANTOM, 200)
    base = (rng.permutation(count) / count - 0.5).reshape(EQUIVALENCE_ROWS, width)
    clean = np.tile(base, (1, 3)).astype(np.float32)

    h, w = clean.shape
    rows, cols = np.mgrid[0:h, 0:w]
    copy = cols // width
    twins = []
    for offset in (1, 2):
        other = (copy + offset) % 3
        twins.append(np.stack([rows, other * width + cols % width], axis=-1))
    coords = np.stack(twins, axis=2)
    # rank by row-major index, matching the search tie-break
    order = np.argsort(coords[..., 1], axis=2, kind="stable")
    coords = np.take_along_axis(coords, order[..., None], axis=2).astype(np.int32)
    dists = np.zeros((h, w, 2), dtype=np.float32)
    return clean, NearestImages((h, w, 1), 2, 1, coords, dists)


def _least_squares(inp: np.ndarray, target: np.ndarray) -> np.ndarray:
    """closed-form fit of a linear 3x3 conv with bias, weights then bias"""
    cols = im2col(inp[None, :, :, None].astype(np.float64), 3)
    design = np.hstack([cols, np.ones((cols.shape[0], 1))])
    theta, *_ = np.linalg.lstsq(design, target.reshape(-1).astype(np.float64), rcond=None)
    return theta


def _conv_config(mode: TrainMode, steps: int, seed: int, lr0: float) -> TrainConfig:
    return TrainConfig(mode=mode, k=2, s=1, pairing=PairingMethod(PairingKind.SORTED_PAIR, 1, 2),
                       batch=1, steps=steps, lr0=lr0, seed=seed, augment=False,
                       arch="conv", residual=False, log_every=max(1, steps // 5))


def equivalence_gap(pixels: int, seed: int, std: float = EQUIVALENCE_STD,
                    steps: Optional[int] = None, lr0: float = 1e-2) -> EquivalenceResult:
    """L-inf distance between the noise2clean and noise2sim linear conv solutions

    steps=None solves both least-squares problems in closed form;
    otherwise both models are trained with the optimiser.
    """
    clean, neighbors = tripled_image(pixels, seed)
    noisy = add_gaussian(clean, std, seed)

    if steps is None:
        first, second = construct_similar_pair(
            neighbors, noisy, PairingMethod(PairingKind.SORTED_PAIR, 1, 2), seed)
        theta_c = _least_squares(noisy, clean)
        theta_s = _least_squares(first, second)
    else:
        model_c = train(_conv_config(TrainMode.NOISE2CLEAN, steps, seed, lr0),
                        DatasetHandle(noisy=[noisy], clean=[clean]))
        model_s = train(_conv_config(TrainMode.NOISE2SIM, steps, seed, lr0),
                        DatasetHandle(noisy=[noisy], neighbors=[neighbors]))
        theta_c = model_c.parameter_vector().astype(np.float64)
        theta_s = model_s.parameter_vector().astype(np.float64)

    gap = float(np.max(np.abs(theta_c - theta_s)))
    logger.info(f"Equivalence on {clean.size} pixels: L-inf gap {gap:.4g}")
    return EquivalenceResult(int(clean.size), gap, theta_c, theta_s)


def equivalence_curve(sizes: Sequence[int] = (100, 1000, 10000), seed: int = 0,
                      trials: int = 5, steps: Optional[int] = None) -> List[Tuple[int, float]]:
    """mean gap per sample count over `trials` seeds; steps=None uses the closed form"""
    curve = []
    for size in sizes:
        gaps = [equivalence_gap(size, seed + t, steps=steps).gap for t in range(trials)]
        curve.append((size, float(np.mean(gaps))))
    return curve


# --- dissimilar mask on a volume with moving structures ---

def mask_ablation(seed: int, steps: int = 1000, slices: int = 32, size: int = 32,
                  width1: int = 8, width2: int = 16, lr0: float = 1e-3,
                  batch: int = 4) -> Dict[str, float]:
    """PSNR (peak 400 HU) of masked and unmasked volume training"""
    clean, _ = hu_volume(slices, size, seed)
    noisy = add_gaussian(clean, ABLATION_STD_HU, seed)
    data = DatasetHandle(noisy=[noisy])

    results = {"noisy": psnr(noisy, clean, HU_PEAK)}
    for name, use_mask in (("masked", True), ("unmasked", False)):
        cfg = TrainConfig(mode=TrainMode.NOISE2SIM_VOLUME, loss=LossKind.MSE, k=2, s=7,
                          d_th=30.0, use_mask=use_mask, batch=batch, steps=steps, lr0=lr0,
                          seed=seed, width1=width1, width2=width2, value_scale=HU_SCALE,
                          log_every=max(1, steps // 5))
        model = train(cfg, data)
        results[name] = psnr(denoise(model, noisy, volume=True), clean, HU_PEAK)
    logger.info(f"Mask ablation: noisy {results['noisy']:.2f} dB, "
                f"masked {results['masked']:.2f} dB, unmasked {results['unmasked']:.2f} dB")
    return results


# --- L1 vs MSE on skewed noise ---

def skewed_noise(shape: Tuple[int, ...], sigma: float, seed: int, site: int) -> np.ndarray:
    """sigma * (Exp(1) - ln 2): median 0, mean sigma * (1 - ln 2)"""
    rng = make_rng(seed, STREAM_PHANTOM, 300, site)
    return sigma * (rng.exponential(1.0, size=shape) - math.log(2.0))


def median_vs_mean(seed: int, sigma: float = 0.1, images: int = 8, size: int = 16,
                   steps: int = 1500, lr0: float = 1e-2, signal: float = 0.5) -> Dict[str, float]:
    """noise2noise on a constant signal; L1 should find the median, MSE the mean"""
    check_seed(seed)
    shape = (size, size)
    noisy = [(signal + skewed_noise(shape, sigma, seed, 2 * i)).astype(np.float32)
             for i in range(images)]
    paired = [(signal + skewed_noise(shape, sigma, seed, 2 * i + 1)).astype(np.float32)
              for i in range(images)]
    data = DatasetHandle(noisy=noisy, paired=paired)

    results = {
        "median": signal,
        "mean": signal + sigma * (1.0 - math.log(2.0)),
        "tolerance": 3.0 * sigma / math.sqrt(images * size * size),
    }
    for loss in (LossKind.L1, LossKind.MSE):
        cfg = TrainConfig(mode=TrainMode.NOISE2NOISE, loss=loss, batch=images, steps=steps,
                          lr0=lr0, seed=seed, augment=False, arch="conv", residual=False,
                          log_every=max(1, steps // 5))
        model = train(cfg, data)
        results[loss.value] = float(np.mean([model.predict(x) for x in noisy]))
    logger.info(f"Median vs mean: l1 -> {results['l1']:.4f}, mse -> {results['mse']:.4f} "
                f"(median {results['median']:.4f}, mean {results['mean']:.4f})")
    return results


# --- NLM baseline and the texture benchmark ---

def nlm_sweep(noisy: np.ndarray, clean: np.ndarray, sigma: float,
              factors: Sequence[float] = NLM_FACTORS, patch_size: int = 3,
              window_radius: int = 7, peak: float = UNIT_PEAK) -> Tuple[float, float, List]:
    """(best h, best PSNR, [(h, PSNR), ...]) over h = factor * sigma"""
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    rows = []
    for factor in factors:
        h = factor * sigma
        out = nlm_denoise(noisy, NlmParams(h, patch_size, window_radius))
        rows.append((h, psnr(out, clean, peak)))
    best_h, best = max(rows, key=lambda r: r[1])
    logger.info(f"NLM sweep: best h={best_h:.4g} at {best:.2f} dB")
    return best_h, best, rows


def texture_benchmark(seed: int, steps: int = 2000, count: int = 4, size: int = 64,
                      std: float = REFERENCE_STD, width1: int = 16, width2: int = 32,
                      lr0: float = 1e-3, rounds: int = 1) -> Dict[str, float]:
    """noise2sim on procedural textures against the noisy input and tuned NLM

    The first search runs on the noisy images; each refinement round searches
    again on the current denoised images and retrains.
    """
    clean = texture_set(count, size, seed)
    noisy = [add_gaussian(c, std, seed + i) for i, c in enumerate(clean)]
    neighbors = build_neighbors(noisy, TEXTURE_K, TEXTURE_PATCH, TEXTURE_WINDOW)
    cfg = TrainConfig(mode=TrainMode.NOISE2SIM, k=TEXTURE_K, s=TEXTURE_PATCH,
                      search_window=TEXTURE_WINDOW, batch=4, crop=min(size, 48), steps=steps,
                      lr0=lr0, seed=seed, width1=width1, width2=width2,
                      log_every=max(1, steps // 10))
    data = DatasetHandle(noisy=noisy, neighbors=neighbors)
    model = train(cfg, data)
    if rounds:
        model = iterative_refine(model, data, rounds, cfg)

    def mean_psnr(images):
        return float(np.mean([psnr(a, c) for a, c in zip(images, clean)]))

    nlm_best = float(np.mean([nlm_sweep(n, c, std)[1] for n, c in zip(noisy, clean)]))
    results = {
        "noisy": mean_psnr(noisy),
        "noise2sim": mean_psnr([denoise(model, n) for n in noisy]),
        "nlm": nlm_best,
    }
    logger.info(f"Textures: noisy {results['noisy']:.2f} dB, "
                f"noise2sim {results['noise2sim']:.2f} dB, NLM {results['nlm']:.2f} dB")
    return results

