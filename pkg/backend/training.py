# training loops: noise2clean, noise2noise, noise2sim (2D and volume)

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from backend.errors import (
    ConfigError, CropTooLarge, DegenerateData, DimMismatch, RoleMissing, ShapeMismatch
)
from backend.neural_denoiser import (
    DEFAULT_LR, ArchSpec, DenoiserModel, OptimState, adam_step
)
from backend.rng import STREAM_AUGMENT, STREAM_TRAIN, STREAM_ZCD, check_seed, make_rng
from backend.sim_search import (
    DEFAULT_K, DEFAULT_PATCH, NearestImages, PairingKind, PairingMethod,
    build_neighbors, construct_similar_pair
)
from backend.tensor_io import ArrayLike, Tensor, as_array, from_hwc, to_hwc
from backend.volume_pairing import (
    DEFAULT_MASK_PATCH, DEFAULT_SLICE_RANGE, DEFAULT_THRESHOLD_HU, LossKind, SliceSampler,
    dissimilar_mask, distance_map, masked_loss_and_grad
)

logger = logging.getLogger(__name__)

# abort when more than half of the drawn samples were fully masked
MIN_DRAWS_BEFORE_ABORT = 10

DEFAULT_TILE_MARGIN = 16

Sample = Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]


class TrainMode(Enum):
    NOISE2CLEAN = "noise2clean"
    NOISE2NOISE = "noise2noise"
    NOISE2SIM = "noise2sim"
    NOISE2SIM_VOLUME = "noise2sim-volume"


@dataclass
class TrainConfig:
    """k and s mean neighbours/patch size in 2D and slice range/mask patch for volumes"""

    mode: TrainMode = TrainMode.NOISE2SIM
    loss: LossKind = LossKind.MSE
    k: Optional[int] = None
    s: Optional[int] = None
    d_th: Optional[float] = None
    pairing: PairingMethod = field(default_factory=lambda: PairingMethod(PairingKind.RANDOM_TO_RANDOM))
    search_window: Optional[int] = None
    batch: int = 4
    crop: Optional[int] = None
    steps: int = 1000
    lr0: float = DEFAULT_LR
    seed: int = 0
    augment: bool = True
    use_mask: bool = True
    arch: str = "unet"
    width1: int = 32
    width2: int = 64
    relu: bool = True
    residual: bool = True
    value_scale: float = 1.0
    workers: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.mode = TrainMode(self.mode)
        self.loss = LossKind(self.loss)
        if isinstance(self.pairing, str):
            self.pairing = PairingMethod.parse(self.pairing)
        volume = self.mode == TrainMode.NOISE2SIM_VOLUME
        if self.k is None:
            self.k = DEFAULT_SLICE_RANGE if volume else DEFAULT_K
        if self.s is None:
            self.s = DEFAULT_MASK_PATCH if volume else DEFAULT_PATCH
        if volume and self.use_mask and self.d_th is None:
            self.d_th = DEFAULT_THRESHOLD_HU

    @property
    def is_volume(self) -> bool:
        return self.mode == TrainMode.NOISE2SIM_VOLUME

    def validate(self) -> None:
        check_seed(self.seed)
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.crop is not None and self.crop < 4:
            raise ConfigError(f"crop must be >= 4, got {self.crop}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.s < 1 or self.s % 2 == 0:
            raise ConfigError(f"s must be odd and >= 1, got {self.s}")
        if self.workers < 0 or self.log_every < 1:
            raise ConfigError("workers must be >= 0 and log_every >= 1")
        if self.is_volume:
            if self.d_th is not None and self.d_th < 0:
                raise ConfigError(f"d_th must be >= 0, got {self.d_th}")
        elif self.d_th is not None:
            raise ConfigError("d_th only applies to noise2sim-volume")
        # raises on bad layouts
        self.arch_spec(1)

    def arch_spec(self, channels: int) -> ArchSpec:
        return ArchSpec(kind=self.arch, in_channels=channels, width1=self.width1,
                        width2=self.width2, relu=self.relu, residual=self.residual,
                        value_scale=self.value_scale)


@dataclass
class DatasetHandle:
    """training images by role; volumes are (D, H, W) or (D, H, W, C)"""

    noisy: List[np.ndarray]
    clean: Optional[List[np.ndarray]] = None
    paired: Optional[List[np.ndarray]] = None
    neighbors: Optional[List[NearestImages]] = None

    def __post_init__(self):
        self.noisy = [as_array(x) for x in self.noisy]
        if not self.noisy:
            raise RoleMissing("dataset holds no noisy images")
        for role in ("clean", "paired"):
            images = getattr(self, role)
            if images is None:
                continue
            images = [as_array(x) for x in images]
            if len(images) != len(self.noisy):
                raise DimMismatch(f"{len(images)} {role} images for {len(self.noisy)} noisy")
            for a, b in zip(images, self.noisy):
                if a.shape != b.shape:
                    raise DimMismatch(f"{role} image {a.shape} vs noisy {b.shape}")
            setattr(self, role, images)
        if self.neighbors is not None and len(self.neighbors) != len(self.noisy):
            raise DimMismatch(
                f"{len(self.neighbors)} neighbor tables for {len(self.noisy)} images")

    def require(self, mode: TrainMode) -> None:
        if mode == TrainMode.NOISE2CLEAN and self.clean is None:
            raise RoleMissing("noise2clean needs clean images")
        if mode == TrainMode.NOISE2NOISE and self.paired is None:
            raise RoleMissing("noise2noise needs paired noisy images")


def augment(sample: Sample, seed: int, crop: Optional[int] = None, flips: bool = True,
            draw: int = 0) -> Sample:
    """random crop, then a random 90-degree rotation and mirror, shared by all parts"""
    inp, target, mask = sample
    h, w = inp.shape[:2]
    if crop is not None and (crop > h or crop > w):
        raise CropTooLarge(f"crop {crop} exceeds image {h}x{w}")
    if crop is None and not flips:
        return sample

    rng = make_rng(seed, STREAM_AUGMENT, draw)
    if crop is not None:
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        window = (slice(top, top + crop), slice(left, left + crop))
    else:
        window = (slice(None), slice(None))
    rot = int(rng.integers(0, 4)) if flips else 0
    mirror = bool(rng.integers(0, 2)) if flips else False

    def geometry(a):
        if a is None:
            return None
        a = np.rot90(a[window], rot, axes=(0, 1))
        if mirror:
            a = a[:, ::-1]
        return np.ascontiguousarray(a)

    return geometry(inp), geometry(target), geometry(mask)


def _channels(x: np.ndarray, volume: bool) -> int:
    if volume:
        if x.ndim not in (3, 4):
            raise ShapeMismatch(f"volume mode expects (D, H, W[, C]) data, got {x.shape}")
        return 1 if x.ndim == 3 else x.shape[3]
    if x.ndim not in (2, 3):
        raise ShapeMismatch(f"2D modes expect (H, W[, C]) images, got {x.shape}")
    return 1 if x.ndim == 2 else x.shape[2]


class Trainer:
    """runs one training job and keeps its loss history"""

    def __init__(self, config: TrainConfig, progress: bool = False):
        config.validate()
        self.config = config
        self.progress = progress
        self.history: List[Dict[str, float]] = []
        self.skipped = 0
        self.drawn = 0
        self.model: Optional[DenoiserModel] = None
        self.opt: Optional[OptimState] = None
        self._images: List[np.ndarray] = []
        self._targets: Optional[List[np.ndarray]] = None
        self._neighbors: Optional[List[NearestImages]] = None
        self._samplers: List[SliceSampler] = []

    def fit(self, data: DatasetHandle, model: Optional[DenoiserModel] = None) -> DenoiserModel:
        cfg = self.config
        data.require(cfg.mode)
        channels = self._prepare(data)

        if model is None:
            self.model = DenoiserModel(cfg.arch_spec(channels), seed=cfg.seed)
        else:
            if model.arch.in_channels != channels:
                raise ShapeMismatch(
                    f"model takes {model.arch.in_channels} channels, data has {channels}")
            self.model = model.copy()
        self.opt = OptimState(lr0=cfg.lr0, total=cfg.steps)
        self.history = []
        self.skipped = 0
        self.drawn = 0

        logger.info(f"Training {cfg.mode.value}: {len(self._images)} inputs, "
                    f"{cfg.steps} steps, batch {cfg.batch}, loss {cfg.loss.value}, "
                    f"{self.model.num_parameters} parameters")

        bar = tqdm(total=cfg.steps, desc=cfg.mode.value, disable=not self.progress)
        try:
            for step, items, skipped in self._batches():
                self._run_step(step, items, skipped)
                bar.update(1)
        finally:
            bar.close()

        logger.info(f"Finished: final loss {self.history[-1]['loss']:.6g}, "
                    f"{self.skipped} of {self.drawn} samples skipped")
        return self.model

    # data

    def _prepare(self, data: DatasetHandle) -> int:
        cfg = self.config
        images = [x for x in data.noisy]
        channels = {_channels(x, cfg.is_volume) for x in images}
        if len(channels) != 1:
            raise ShapeMismatch(f"images disagree on channel count: {sorted(channels)}")

        if cfg.is_volume:
            self._images = [x if x.ndim == 4 else x[..., None] for x in images]
            self._samplers = [SliceSampler(len(v), cfg.k, cfg.seed) for v in self._images]
        else:
            self._images = [to_hwc(x) for x in images]

        self._targets = None
        if cfg.mode == TrainMode.NOISE2CLEAN:
            self._targets = [to_hwc(x) for x in data.clean]
        elif cfg.mode == TrainMode.NOISE2NOISE:
            self._targets = [to_hwc(x) for x in data.paired]

        self._neighbors = None
        if cfg.mode == TrainMode.NOISE2SIM:
            if data.neighbors is None:
                logger.info(f"Searching similar pixels (k={cfg.k}, s={cfg.s})")
                data.neighbors = build_neighbors(self._images, cfg.k, cfg.s,
                                                 cfg.search_window, max(1, cfg.workers))
            for nb, img in zip(data.neighbors, self._images):
                if tuple(nb.shape) != img.shape:
                    raise DimMismatch(f"neighbor table {nb.shape} vs image {img.shape}")
            self._neighbors = data.neighbors
        return channels.pop()

    def _draw(self, step: int, item: int) -> Sample:
        cfg = self.config
        rng = make_rng(cfg.seed, STREAM_TRAIN, step, item)
        idx = int(rng.integers(0, len(self._images)))
        draw = step * cfg.batch + item
        mask = None

        if cfg.mode == TrainMode.NOISE2SIM:
            inp, target = construct_similar_pair(self._neighbors[idx], self._images[idx],
                                                 cfg.pairing, cfg.seed, draw)
        elif cfg.is_volume:
            volume = self._images[idx]
            i = int(rng.integers(0, len(volume)))
            j = self._samplers[idx].sample_at(i, draw)
            inp, target = volume[i], volume[j]
            if cfg.use_mask:
                mask = dissimilar_mask(distance_map(inp, target, cfg.s), cfg.d_th, cfg.s).mask
        else:
            inp, target = self._images[idx], self._targets[idx]

        return augment((inp, target, mask), cfg.seed, cfg.crop, cfg.augment, draw)

    def _make_batch(self, step: int) -> Tuple[int, List[Sample], int]:
        items, skipped = [], 0
        for item in range(self.config.batch):
            sample = self._draw(step, item)
            if sample[2] is not None and sample[2].all():
                skipped += 1
                continue
            items.append(sample)
        return step, items, skipped

    def _batches(self) -> Iterator[Tuple[int, List[Sample], int]]:
        steps = range(self.config.steps)
        workers = self.config.workers
        if workers == 0:
            for step in steps:
                yield self._make_batch(step)
            return
        # bounded prefetch, consumed in step order
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = deque()
            for step in steps:
                pending.append(pool.submit(self._make_batch, step))
                if len(pending) > 2 * workers:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()

    # optimisation

    def _run_step(self, step: int, items: List[Sample], skipped: int) -> None:
        cfg = self.config
        self.drawn += cfg.batch
        self.skipped += skipped
        if skipped:
            logger.warning(f"step {step}: {skipped} fully masked samples skipped")
        if self.drawn >= MIN_DRAWS_BEFORE_ABORT and 2 * self.skipped > self.drawn:
            raise DegenerateData(
                f"{self.skipped} of {self.drawn} samples were fully masked; "
                f"d_th={cfg.d_th} is likely too small")

        lr = self.opt.current_lr()
        loss = math.nan
        if items:
            loss, grads = self.batch_gradients(items)
            lr = adam_step(self.model, grads, self.opt)

        self.history.append({"step": step, "lr": lr, "loss": loss, "skipped": self.skipped})
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info(f"step {step}/{cfg.steps}: lr={lr:.3e} loss={loss:.6g} "
                        f"skipped={self.skipped}")

    def batch_gradients(self, items: List[Sample]) -> Tuple[float, Dict[str, np.ndarray]]:
        """mean masked loss over the batch and its parameter gradients"""
        n = len(items)
        groups: Dict[tuple, List[Sample]] = {}
        for sample in items:
            groups.setdefault(sample[0].shape, []).append(sample)

        total = 0.0
        grads: Dict[str, np.ndarray] = {}
        for group in groups.values():
            out = self.model.forward(np.stack([g[0] for g in group]))
            douts = []
            for pred, (_, target, mask) in zip(out, group):
                loss, dout = masked_loss_and_grad(pred, target, mask, self.config.loss)
                total += loss
                douts.append(dout / n)
            part, _ = self.model.backward(np.stack(douts))
            for name, g in part.items():
                grads[name] = grads[name] + g if name in grads else g
        return total / n, grads


def train(config: TrainConfig, data: DatasetHandle,
          model: Optional[DenoiserModel] = None, progress: bool = False) -> DenoiserModel:
    return Trainer(config, progress).fit(data, model)


# --- inference ---

def _tile_starts(size: int, tile: int, margin: int) -> List[int]:
    if size <= tile:
        return [0]
    stride = tile - 2 * margin
    starts = list(range(0, size - tile, stride))
    starts.append(size - tile)
    return starts


def _trusted(start: int, tile: int, size: int, margin: int) -> Tuple[int, int]:
    lo = start if start == 0 else start + margin
    hi = start + tile if start + tile >= size else start + tile - margin
    return lo, hi


def denoise_image(model: DenoiserModel, img: np.ndarray, tile: Optional[int] = None,
                  margin: int = DEFAULT_TILE_MARGIN) -> np.ndarray:
    """one (H, W, C) image, optionally through overlapping tiles"""
    h, w, c = img.shape
    if tile is None or (h <= tile and w <= tile):
        return model.predict(img)
    if tile % 2 or margin % 2 or tile <= 2 * margin:
        raise ConfigError(f"tile {tile} must be even and larger than twice the margin {margin}")

    # even dims keep every tile aligned with the 2x2 pooling grid
    ph, pw = h + h % 2, w + w % 2
    padded = np.pad(img, ((0, ph - h), (0, pw - w), (0, 0)), mode="reflect")
    acc = np.zeros(padded.shape, dtype=np.float64)
    hits = np.zeros((ph, pw, 1), dtype=np.float64)
    th, tw = min(tile, ph), min(tile, pw)
    for top in _tile_starts(ph, th, margin):
        r0, r1 = _trusted(top, th, ph, margin)
        for left in _tile_starts(pw, tw, margin):
            c0, c1 = _trusted(left, tw, pw, margin)
            out = model.predict(padded[top:top + th, left:left + tw])
            acc[r0:r1, c0:c1] += out[r0 - top:r1 - top, c0 - left:c1 - left]
            hits[r0:r1, c0:c1] += 1
    return (acc / hits)[:h, :w].astype(np.float32)


def denoise(model: DenoiserModel, x: ArrayLike, tile: Optional[int] = None,
            volume: Optional[bool] = None, margin: int = DEFAULT_TILE_MARGIN) -> np.ndarray:
    """denoise an image or, slice by slice, a volume"""
    arr = as_array(x)
    if volume is None:
        if isinstance(x, Tensor):
            volume = x.axis_labels[0] == "slice"
        else:
            volume = arr.ndim == 4 or (arr.ndim == 3 and arr.shape[2] != model.arch.in_channels)
    if volume:
        slices = [denoise_image(model, to_hwc(s), tile, margin) for s in arr]
        out = np.stack(slices)
        return out[..., 0] if arr.ndim == 3 else out
    return from_hwc(denoise_image(model, to_hwc(arr), tile, margin), arr.ndim)


# --- iterative refinement ---

def refine_neighbors(model: DenoiserModel, data: DatasetHandle,
                     config: TrainConfig) -> List[NearestImages]:
    """similar-pixel coordinates searched on the current denoised images"""
    guides = [denoise(model, x, volume=False) for x in data.noisy]
    return build_neighbors(guides, config.k, config.s, config.search_window,
                           max(1, config.workers))


def reference_neighbors(data: DatasetHandle, config: TrainConfig) -> List[NearestImages]:
    """similarity from the clean images, values still from the noisy ones"""
    if data.clean is None:
        raise RoleMissing("reference similarity needs clean images")
    return build_neighbors(data.clean, config.k, config.s, config.search_window,
                           max(1, config.workers))


def iterative_refine(model: DenoiserModel, data: DatasetHandle, rounds: int,
                     config: TrainConfig, progress: bool = False) -> DenoiserModel:
    """re-search on denoised images, keep noisy values, retrain from scratch"""
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    if config.mode != TrainMode.NOISE2SIM:
        raise ConfigError("iterative refinement needs the noise2sim 2D mode")
    for r in range(rounds):
        neighbors = refine_neighbors(model, data, config)
        round_data = DatasetHandle(noisy=data.noisy, clean=data.clean, neighbors=neighbors)
        logger.info(f"Refinement round {r + 1}/{rounds}")
        model = train(config, round_data, progress=progress)
    return model


# --- zero-mean conditional discrepancy ---

def estimate_zcd(data: DatasetHandle, m: int, seed: int,
                 chunk_elements: int = 1 << 22) -> Tuple[np.ndarray, float, float]:
    """per-pixel mean of x' - x'' over m random similar pairs

    draw number d uses image d % len(images); all images must share one size.
    """
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    check_seed(seed)
    if data.neighbors is None:
        raise RoleMissing("estimate_zcd needs precomputed similar pixels")
    images = [to_hwc(x) for x in data.noisy]
    if len({img.shape for img in images}) != 1:
        raise DimMismatch("estimate_zcd needs images of one size")

    h, w, c = images[0].shape
    hw = h * w
    total = np.zeros((hw, c), dtype=np.float64)
    n_img = len(images)
    for idx, (img, nb) in enumerate(zip(images, data.neighbors)):
        if tuple(nb.shape) != img.shape:
            raise DimMismatch(f"neighbor table {nb.shape} vs image {img.shape}")
        draws = m // n_img + (1 if idx < m % n_img else 0)
        values = img.reshape(hw, c).astype(np.float64)
        table = nb.similar_set()
        rows = np.arange(hw)
        per_chunk = max(1, chunk_elements // (2 * hw))
        for chunk, start in enumerate(range(0, draws, per_chunk)):
            count = min(per_chunk, draws - start)
            rng = make_rng(seed, STREAM_ZCD, idx, chunk)
            picks = rng.integers(0, nb.k + 1, size=(2, count, hw))
            first = values[table[rows, picks[0]]]
            second = values[table[rows, picks[1]]]
            total += (first - second).sum(axis=0)

    mean = (total / m).reshape(h, w, c)
    mean = from_hwc(mean, as_array(data.noisy[0]).ndim)
    lo, hi = float(mean.min()), float(mean.max())
    logger.info(f"ZCD estimate over {m} pairs: range [{lo:.3g}, {hi:.3g}]")
    return mean, lo, hi
