# tensor type and file formats (N2ST binary, PGM P5)

import logging
import os
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from backend.errors import (
    BadMagic, DataError, IoFailure, ShapeMismatch, TruncatedPayload, UnsupportedDtype
)

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"N2ST"
TENSOR_VERSION = 1
DTYPE_F32 = 0

# magic, version, dtype code, ndim
_HEADER = struct.Struct("<4sIBB")

# CT display window [-160, 240] HU
HU_WINDOW_LEVEL = 40.0
HU_WINDOW_WIDTH = 400.0


class Domain(IntEnum):
    RAW = 0
    UNIT_INTERVAL = 1
    HOUNSFIELD = 2


AXIS_NAMES = ("height", "width", "channel", "bin", "slice")

DEFAULT_LABELS = {
    1: ("width",),
    2: ("height", "width"),
    3: ("height", "width", "channel"),
    4: ("slice", "height", "width", "channel"),
}
VOLUME_LABELS = ("slice", "height", "width")


@dataclass(frozen=True, eq=False)
class Tensor:
    """immutable float32 array with value-domain metadata"""

    data: np.ndarray
    domain: Domain = Domain.RAW
    axis_labels: Tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim < 1 or arr.ndim > 4:
            raise ShapeMismatch(f"tensor order must be 1..4, got {arr.ndim}")
        if 0 in arr.shape:
            raise ShapeMismatch(f"zero-sized dimension in {arr.shape}")
        arr.flags.writeable = False

        domain = Domain(self.domain)
        if domain == Domain.UNIT_INTERVAL and not np.all(np.isfinite(arr)):
            raise DataError("unit-interval tensor contains non-finite values")

        labels = tuple(self.axis_labels) or DEFAULT_LABELS[arr.ndim]
        if len(labels) != arr.ndim:
            raise ShapeMismatch(
                f"{len(labels)} axis labels for a {arr.ndim}-d tensor")
        for label in labels:
            if label not in AXIS_NAMES:
                raise ShapeMismatch(f"unknown axis label '{label}'")

        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "axis_labels", labels)

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def with_data(self, data: np.ndarray) -> "Tensor":
        """same metadata, new values (labels kept only if the order matches)"""
        data = np.asarray(data)
        labels = self.axis_labels if data.ndim == self.ndim else ()
        return Tensor(data, self.domain, labels)

    def __repr__(self) -> str:
        return (f"Tensor(dims={self.dims}, domain={self.domain.name}, "
                f"labels={self.axis_labels})")


ArrayLike = Union[Tensor, np.ndarray]


def as_array(x: ArrayLike) -> np.ndarray:
    """array view of a Tensor or array; float64 stays float64, anything else is float32"""
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


def window_hu(x: np.ndarray, level: float = HU_WINDOW_LEVEL,
              width: float = HU_WINDOW_WIDTH) -> np.ndarray:
    """clip HU values to a display window and map it to [0, 1]"""
    lo = level - width / 2.0
    hi = level + width / 2.0
    return np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


# --- N2ST framing ---

def encode_tensor(t: Tensor) -> bytes:
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, DTYPE_F32, t.ndim)
    dims = struct.pack(f"<{t.ndim}I", *t.dims)
    domain = struct.pack("<B", int(t.domain))
    payload = t.data.astype("<f4", copy=False).tobytes(order="C")
    return header + dims + domain + payload


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """parse one N2ST frame starting at `offset`; returns (tensor, end offset)"""
    if len(buf) - offset < 4 or buf[offset:offset + 4] != TENSOR_MAGIC:
        raise BadMagic(f"expected {TENSOR_MAGIC!r}, got {bytes(buf[offset:offset + 4])!r}")
    if len(buf) - offset < _HEADER.size:
        raise TruncatedPayload("header is cut short")

    _, version, dtype, ndim = _HEADER.unpack_from(buf, offset)
    if version != TENSOR_VERSION:
        raise UnsupportedDtype(f"unsupported N2ST version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(f"unsupported dtype code {dtype}")
    if ndim < 1 or ndim > 4:
        raise DataError(f"invalid tensor order {ndim}")

    pos = offset + _HEADER.size
    if len(buf) - pos < 4 * ndim + 1:
        raise TruncatedPayload("dimension table is cut short")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    (domain_code,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    try:
        domain = Domain(domain_code)
    except ValueError:
        raise DataError(f"unknown domain code {domain_code}") from None

    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise TruncatedPayload(
            f"payload needs {4 * count} bytes, only {len(buf) - pos} present")

    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return Tensor(data.astype(np.float32), domain), end


# --- files ---

def load_tensor(path: str) -> Tensor:
    """load an N2ST or binary PGM (P5) file"""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e

    if buf[:4] == TENSOR_MAGIC:
        tensor, end = decode_tensor(buf)
        if end != len(buf):
            raise DataError(f"{len(buf) - end} trailing bytes after payload in {path}")
        logger.debug(f"Loaded {path}: {tensor}")
        return tensor
    if buf[:2] == b"P5":
        return _load_pgm(path)
    raise BadMagic(f"{path}: not an N2ST or P5 PGM file (magic {buf[:4]!r})")


def save_tensor(t: Tensor, path: str) -> None:
    """write N2ST, or PGM when the path ends with .pgm"""
    try:
        if path.lower().endswith(".pgm"):
            _save_pgm(t, path)
        else:
            with open(path, "wb") as f:
                f.write(encode_tensor(t))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    logger.debug(f"Saved {t} to {path}")


def _load_pgm(path: str) -> Tensor:
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            pixels = np.array(img)
    except (UnidentifiedImageError, SyntaxError) as e:
        raise BadMagic(f"{path}: unreadable PGM ({e})") from e
    except OSError as e:
        raise TruncatedPayload(f"{path}: {e}") from e

    if mode == "L":
        peak = 255.0
    elif mode in ("I", "I;16", "I;16B", "I;16L"):
        peak = 65535.0
    else:
        raise UnsupportedDtype(f"{path}: PGM mode {mode} is not grayscale")

    values = pixels.astype(np.float64) / peak
    logger.debug(f"PGM {path}: mode {mode}, size {pixels.shape}")
    return Tensor(values.astype(np.float32), Domain.UNIT_INTERVAL)


def _save_pgm(t: Tensor, path: str) -> None:
    data = t.data
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    if data.ndim != 2:
        raise ShapeMismatch(f"PGM export needs a 2-d image, got dims {t.dims}")

    if t.domain == Domain.HOUNSFIELD:
        unit = window_hu(data)
    else:
        unit = np.clip(np.nan_to_num(data.astype(np.float64)), 0.0, 1.0)
    pixels = np.round(unit * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def to_hwc(x: ArrayLike) -> np.ndarray:
    """(H, W) or (H, W, C) image as an (H, W, C) array of as_array dtype"""
    arr = as_array(x)
    if arr.ndim == 2:
        return arr[:, :, None]
    if arr.ndim == 3:
        return arr
    raise ShapeMismatch(f"expected a 2-d or 3-d image, got dims {arr.shape}")


def from_hwc(arr: np.ndarray, ndim: int) -> np.ndarray:
    """undo to_hwc for an image that came in with `ndim` dims"""
    if ndim == 2:
        return arr[:, :, 0]
    return arr
