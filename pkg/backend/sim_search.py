# similar-pixel search and similar-image pairs for 2D images

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from backend.errors import (
    BadMagic, ConfigError, DataError, DimMismatch, EvenPatchSize, IndexOutOfRange,
    IoFailure, KTooLarge, OutOfBounds, TruncatedPayload, UnsupportedDtype
)
from backend.rng import STREAM_PAIRING, make_rng
from backend.tensor_io import ArrayLike, as_array, from_hwc, to_hwc

logger = logging.getLogger(__name__)

NEIGHBORS_MAGIC = b"N2SN"
NEIGHBORS_VERSION = 1
_NEIGHBOR_HEADER = struct.Struct("<4sIB3III")
_RECORD = np.dtype([("u", "<u4"), ("v", "<u4"), ("d", "<f4")])

# budget for one chunk of the pairwise distance tensor (float64 elements)
_CHUNK_ELEMENTS = 1 << 22

DEFAULT_K = 8
DEFAULT_PATCH = 3


@dataclass(frozen=True, eq=False)
class NearestImages:
    """k most similar pixels of every pixel, sorted by patch distance"""

    shape: Tuple[int, int, int]
    k: int
    s: int
    coords: np.ndarray   # (H, W, k, 2) int32, (row, col)
    dists: np.ndarray    # (H, W, k) float32

    def __post_init__(self):
        h, w, c = (int(v) for v in self.shape)
        coords = np.ascontiguousarray(self.coords, dtype=np.int32)
        dists = np.ascontiguousarray(self.dists, dtype=np.float32)
        if coords.shape != (h, w, self.k, 2) or dists.shape != (h, w, self.k):
            raise DimMismatch(
                f"neighbor tables {coords.shape}/{dists.shape} do not match "
                f"{(h, w)} with k={self.k}")
        rows, cols = coords[..., 0], coords[..., 1]
        if rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w:
            raise OutOfBounds("neighbor coordinate outside the image")
        uu, vv = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        if np.any((rows == uu[..., None]) & (cols == vv[..., None])):
            raise DataError("a pixel lists itself among its neighbors")
        if self.k > 1 and np.any(np.diff(dists, axis=-1) < 0):
            raise DataError("neighbor distances must be nondecreasing")
        coords.flags.writeable = False
        dists.flags.writeable = False
        object.__setattr__(self, "shape", (h, w, c))
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "dists", dists)

    @property
    def flat_coords(self) -> np.ndarray:
        """(H*W, k) row-major pixel indices of the neighbors"""
        h, w, _ = self.shape
        flat = self.coords[..., 0].astype(np.int64) * w + self.coords[..., 1]
        return flat.reshape(h * w, self.k)

    def similar_set(self) -> np.ndarray:
        """(H*W, k+1) table of pixel indices, column 0 is the pixel itself"""
        h, w, _ = self.shape
        own = np.arange(h * w, dtype=np.int64)[:, None]
        return np.concatenate([own, self.flat_coords], axis=1)


class PairingKind(IntEnum):
    ORIGINAL_TO_RANDOM = 1
    RANDOM_TO_ORIGINAL = 2
    SORTED_PAIR = 3
    RANDOM_TO_RANDOM = 4


@dataclass(frozen=True)
class PairingMethod:
    kind: PairingKind = PairingKind.RANDOM_TO_RANDOM
    j1: int = 1
    j2: int = 2

    @classmethod
    def parse(cls, text: str) -> "PairingMethod":
        """'1', '2', '4', '3' or '3:j1,j2'"""
        head, _, tail = str(text).strip().partition(":")
        try:
            kind = PairingKind(int(head))
        except ValueError:
            raise ConfigError(f"unknown pairing method '{text}'") from None
        if kind != PairingKind.SORTED_PAIR or not tail:
            return cls(kind)
        try:
            j1, j2 = (int(v) for v in tail.split(","))
        except ValueError:
            raise ConfigError(f"sorted pairing needs 'j1,j2', got '{tail}'") from None
        return cls(kind, j1, j2)

    def __str__(self) -> str:
        if self.kind == PairingKind.SORTED_PAIR:
            return f"3:{self.j1},{self.j2}"
        return str(int(self.kind))


def _check_patch_size(s: int) -> None:
    if s < 1 or s % 2 == 0:
        raise EvenPatchSize(f"patch size must be odd and >= 1, got {s}")


def _padded(img: np.ndarray, r: int) -> np.ndarray:
    return np.pad(img.astype(np.float64), ((r, r), (r, r), (0, 0)), mode="reflect")


def _patch_stack(img: np.ndarray, s: int) -> np.ndarray:
    """(H*W, s*s*C) patches in row-major pixel order"""
    h, w, c = img.shape
    r = s // 2
    win = sliding_window_view(_padded(img, r), (s, s), axis=(0, 1))
    # (H, W, C, s, s) -> (H, W, s, s, C)
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, s * s * c)


def _squared_distances(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - candidates[None, :, :]
    return np.square(diff).sum(axis=-1)


def patch_distance(img: ArrayLike, a: Tuple[int, int], b: Tuple[int, int], s: int) -> float:
    """Euclidean distance between the s x s patches centred at a and b"""
    _check_patch_size(s)
    arr = to_hwc(img)
    h, w, _ = arr.shape
    for u, v in (a, b):
        if not (0 <= u < h and 0 <= v < w):
            raise OutOfBounds(f"coordinate ({u}, {v}) outside {h}x{w}")
    padded = _padded(arr, s // 2)
    pa = padded[a[0]:a[0] + s, a[1]:a[1] + s, :].reshape(1, -1)
    pb = padded[b[0]:b[0] + s, b[1]:b[1] + s, :].reshape(1, -1)
    return float(np.sqrt(_squared_distances(pa, pb)[0, 0]))


def _select_k(d2: np.ndarray, k: int) -> np.ndarray:
    """k smallest per row, ties broken by column index"""
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
    out = np.empty((d2.shape[0], k), dtype=np.int64)
    for i in range(d2.shape[0]):
        idx = np.flatnonzero(d2[i] <= kth[i])
        order = np.argsort(d2[i, idx], kind="stable")
        out[i] = idx[order[:k]]
    return out


def _min_window_candidates(h: int, w: int, window: int) -> int:
    return (min(window, h - 1) + 1) * (min(window, w - 1) + 1) - 1


def knn_similar_pixels(img: ArrayLike, k: int = DEFAULT_K, s: int = DEFAULT_PATCH,
                       window: Optional[int] = None, workers: int = 1) -> NearestImages:
    """exact k-NN over patch distance, self excluded

    window=None searches the whole image; otherwise candidates are limited
    to a (2*window+1)^2 neighbourhood and the result is exact within it.
    """
    _check_patch_size(s)
    arr = to_hwc(img)
    h, w, c = arr.shape
    n = h * w
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k >= n:
        raise KTooLarge(f"k={k} needs at least {k + 1} pixels, image has {n}")
    if window is not None:
        if window < 1:
            raise ConfigError(f"search window must be >= 1, got {window}")
        if _min_window_candidates(h, w, window) < k:
            raise KTooLarge(f"window {window} holds fewer than k={k} candidates")

    stack = _patch_stack(arr, s)
    rows = np.arange(n) // w
    cols = np.arange(n) % w
    chunk = max(1, min(n, _CHUNK_ELEMENTS // max(1, n * stack.shape[1])))

    def solve(start: int) -> Tuple[int, np.ndarray, np.ndarray]:
        stop = min(n, start + chunk)
        idx = np.arange(start, stop)
        d2 = _squared_distances(stack[start:stop], stack)
        d2[np.arange(stop - start), idx] = np.inf
        if window is not None:
            far = ((np.abs(rows[idx][:, None] - rows[None, :]) > window) |
                   (np.abs(cols[idx][:, None] - cols[None, :]) > window))
            d2[far] = np.inf
        nearest = _select_k(d2, k)
        picked = np.take_along_axis(d2, nearest, axis=1)
        return start, nearest, picked

    starts = range(0, n, chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(solve, starts))
    else:
        parts = [solve(start) for start in starts]

    flat = np.empty((n, k), dtype=np.int64)
    d2_all = np.empty((n, k), dtype=np.float64)
    for start, nearest, picked in parts:
        flat[start:start + len(nearest)] = nearest
        d2_all[start:start + len(nearest)] = picked

    coords = np.stack([flat // w, flat % w], axis=-1).reshape(h, w, k, 2)
    dists = np.sqrt(d2_all).reshape(h, w, k)
    logger.info(f"k-NN search on {h}x{w}x{c}: k={k}, s={s}, window={window}, "
                f"mean distance {float(dists.mean()):.4g}")
    return NearestImages((h, w, c), k, s, coords, dists)


def build_neighbors(guides: Sequence[ArrayLike], k: int = DEFAULT_K, s: int = DEFAULT_PATCH,
                    window: Optional[int] = None, workers: int = 1) -> List[NearestImages]:
    """search on guide images (noisy, denoised or clean)"""
    return [knn_similar_pixels(g, k, s, window, workers) for g in guides]


def _check_match(n: NearestImages, arr: np.ndarray) -> None:
    if tuple(arr.shape) != tuple(n.shape):
        raise DimMismatch(f"image {arr.shape} does not match neighbor table {n.shape}")


def materialize_nearest_image(n: NearestImages, img: ArrayLike, j: int) -> np.ndarray:
    """image whose pixel (u, v) is the j-th most similar pixel of (u, v)"""
    if not 1 <= j <= n.k:
        raise IndexOutOfRange(f"j must be in [1, {n.k}], got {j}")
    src = as_array(img)
    arr = to_hwc(src)
    _check_match(n, arr)
    out = arr[n.coords[..., j - 1, 0], n.coords[..., j - 1, 1]]
    return from_hwc(out, src.ndim)


def _random_similar(n: NearestImages, arr: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w, c = arr.shape
    table = n.similar_set()
    pick = rng.integers(0, n.k + 1, size=h * w)
    src = table[np.arange(h * w), pick]
    return arr.reshape(h * w, c)[src].reshape(h, w, c)


def construct_similar_pair(n: NearestImages, img: ArrayLike, method: PairingMethod,
                           seed: int, draw: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """(input, target) pair built from the similar sets of every pixel"""
    src = as_array(img)
    arr = to_hwc(src)
    _check_match(n, arr)
    kind = method.kind

    if kind == PairingKind.SORTED_PAIR:
        if method.j1 == method.j2:
            raise ConfigError("sorted pairing needs two different neighbor ranks")
        first = materialize_nearest_image(n, src, method.j1)
        second = materialize_nearest_image(n, src, method.j2)
        return first, second

    rng = make_rng(seed, STREAM_PAIRING, draw)
    if kind == PairingKind.ORIGINAL_TO_RANDOM:
        return src.copy(), from_hwc(_random_similar(n, arr, rng), src.ndim)
    if kind == PairingKind.RANDOM_TO_ORIGINAL:
        return from_hwc(_random_similar(n, arr, rng), src.ndim), src.copy()
    first = _random_similar(n, arr, rng)
    second = _random_similar(n, arr, rng)
    return from_hwc(first, src.ndim), from_hwc(second, src.ndim)


def neighbor_overlap(a: NearestImages, b: NearestImages) -> np.ndarray:
    """(H, W) count of neighbor coordinates the two tables share"""
    if a.shape[:2] != b.shape[:2]:
        raise DimMismatch(f"neighbor tables cover {a.shape} and {b.shape}")
    fa = a.flat_coords[:, :, None]
    fb = b.flat_coords[:, None, :]
    shared = (fa == fb).any(axis=2).sum(axis=1)
    return shared.reshape(a.shape[:2])


# --- N2SN files ---

def save_neighbors(n: NearestImages, path: str) -> None:
    h, w, c = n.shape
    header = _NEIGHBOR_HEADER.pack(NEIGHBORS_MAGIC, NEIGHBORS_VERSION, 3, h, w, c, n.k, n.s)
    records = np.empty((h, w, n.k), dtype=_RECORD)
    records["u"] = n.coords[..., 0]
    records["v"] = n.coords[..., 1]
    records["d"] = n.dists
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(records.tobytes(order="C"))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    logger.debug(f"Saved neighbors {n.shape} k={n.k} to {path}")


def load_neighbors(path: str) -> NearestImages:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e

    if buf[:4] != NEIGHBORS_MAGIC:
        raise BadMagic(f"{path}: expected {NEIGHBORS_MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < _NEIGHBOR_HEADER.size:
        raise TruncatedPayload(f"{path}: header is cut short")
    _, version, ndim, h, w, c, k, s = _NEIGHBOR_HEADER.unpack_from(buf)
    if version != NEIGHBORS_VERSION or ndim != 3:
        raise UnsupportedDtype(f"{path}: unsupported neighbor file version {version}")

    count = h * w * k
    need = _NEIGHBOR_HEADER.size + count * _RECORD.itemsize
    if len(buf) < need:
        raise TruncatedPayload(f"{path}: expected {need} bytes, got {len(buf)}")
    records = np.frombuffer(buf, dtype=_RECORD, count=count,
                            offset=_NEIGHBOR_HEADER.size).reshape(h, w, k)
    coords = np.stack([records["u"], records["v"]], axis=-1).astype(np.int32)
    return NearestImages((h, w, c), k, s, coords, records["d"].astype(np.float32))
