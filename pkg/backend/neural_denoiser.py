# small residual encoder-decoder denoiser with hand-written backprop

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from backend.errors import (
    BadMagic, ConfigError, DataError, IoFailure, MissingForwardCache, ShapeMismatch,
    ShapeTooSmall, TruncatedPayload, UnsupportedDtype
)
from backend.rng import STREAM_INIT, make_rng
from backend.tensor_io import ArrayLike, Tensor, as_array, decode_tensor, encode_tensor
from backend.volume_pairing import LossKind, masked_loss_and_grad

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"N2SM"
MODEL_VERSION = 1

DEFAULT_LR = 5e-4
MIN_SPATIAL = 4


@dataclass(frozen=True)
class ArchSpec:
    """network layout

    unet: conv3x3+relu x2 | maxpool 2x2 | conv3x3+relu x2 | nearest 2x up
          + conv3x3+relu | concat skip | conv3x3+relu | conv1x1
    conv: one 3x3 convolution, linear
    output = x + scale * net(x / scale) when residual is on.
    """

    kind: str = "unet"
    in_channels: int = 1
    width1: int = 32
    width2: int = 64
    relu: bool = True
    residual: bool = True
    value_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("unet", "conv"):
            raise ConfigError(f"unknown architecture '{self.kind}'")
        if self.in_channels < 1 or self.width1 < 1 or self.width2 < 1:
            raise ConfigError("channel counts must be positive")
        if not self.value_scale > 0:
            raise ConfigError(f"value scale must be > 0, got {self.value_scale}")

    def layers(self) -> List[Tuple[str, Tuple[int, int, int, int]]]:
        """(name, kernel shape (kh, kw, c_in, c_out)) in forward order"""
        c, w1, w2 = self.in_channels, self.width1, self.width2
        if self.kind == "conv":
            return [("conv", (3, 3, c, c))]
        return [
            ("enc1a", (3, 3, c, w1)),
            ("enc1b", (3, 3, w1, w1)),
            ("enc2a", (3, 3, w1, w2)),
            ("enc2b", (3, 3, w2, w2)),
            ("up1", (3, 3, w2, w1)),
            ("dec1", (3, 3, 2 * w1, w1)),
            ("out", (1, 1, w1, c)),
        ]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        return cls(**known)


# --- layer primitives (NHWC) ---

def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    """source index of every position of a reflect-padded axis"""
    q = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(q)
    q = np.abs(q)
    return np.where(q > n - 1, 2 * (n - 1) - q, q)


def _fold_axis(g: np.ndarray, axis: int, n: int, before: int, after: int) -> np.ndarray:
    """adjoint of reflect padding along one axis"""
    src = _reflect_index(n, before, after)
    moved = np.moveaxis(g, axis, 0)
    out = moved[before:before + n].copy()
    for p in list(range(before)) + list(range(before + n, before + n + after)):
        out[src[p]] += moved[p]
    return np.moveaxis(out, 0, axis)


def _pad_spatial(x: np.ndarray, pads: Tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)), mode="reflect")


def _unpad_spatial(g: np.ndarray, shape: Tuple[int, ...],
                   pads: Tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pads
    if not any(pads):
        return g
    g = _fold_axis(g, 1, shape[1], top, bottom)
    return _fold_axis(g, 2, shape[2], left, right)


def im2col(x: np.ndarray, kh: int) -> np.ndarray:
    """(N*H*W, kh*kh*C) rows of reflect-padded kh x kh neighbourhoods"""
    n, h, wd, c = x.shape
    if kh == 1:
        return x.reshape(n * h * wd, c)
    r = kh // 2
    xp = _pad_spatial(x, (r, r, r, r))
    win = sliding_window_view(xp, (kh, kh), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, kh * kh * c)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """'same' convolution with reflect padding; w is (kh, kw, c_in, c_out)"""
    kh, kw, c_in, c_out = w.shape
    n, h, wd, c = x.shape
    if c != c_in:
        raise ShapeMismatch(f"conv expects {c_in} channels, got {c}")
    cols = im2col(x, kh)
    out = cols @ w.reshape(kh * kw * c_in, c_out) + b
    return out.reshape(n, h, wd, c_out), (x.shape, cols, w)


def conv_backward(dout: np.ndarray, cache):
    xshape, cols, w = cache
    kh, kw, c_in, c_out = w.shape
    n, h, wd, c = xshape
    d2 = dout.reshape(-1, c_out)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = d2 @ w.reshape(kh * kw * c_in, c_out).T
    if kh == 1:
        return dcols.reshape(xshape), dw, db

    r = kh // 2
    dcols = dcols.reshape(n, h, wd, kh, kw, c)
    dxp = np.zeros((n, h + 2 * r, wd + 2 * r, c), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    return _unpad_spatial(dxp, xshape, (r, r, r, r)), dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    return dout * (cache > 0)


def maxpool_forward(x: np.ndarray):
    n, h, w, c = x.shape
    blocks = (x.reshape(n, h // 2, 2, w // 2, 2, c)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(n, h // 2, w // 2, c, 4))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, arg = cache
    n, h, w, c = shape
    blocks = np.zeros((n, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    return (blocks.reshape(n, h // 2, w // 2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(shape))


def upsample_forward(x: np.ndarray):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), x.shape


def upsample_backward(dout: np.ndarray, shape) -> np.ndarray:
    n, h, w, c = shape
    return dout.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


# --- model ---

class DenoiserModel:
    """parameters plus the activations of the last forward pass"""

    def __init__(self, arch: ArchSpec, params: Optional[Dict[str, np.ndarray]] = None,
                 seed: int = 0, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self._cache = None
        self._cached_input = None
        if params is None:
            self.params = init_params(arch, seed, self.dtype)
        else:
            self.params = {}
            for name, shape in self.param_shapes().items():
                if name not in params:
                    raise ShapeMismatch(f"missing parameter '{name}'")
                value = np.asarray(params[name], dtype=self.dtype)
                if value.shape != shape:
                    raise ShapeMismatch(
                        f"parameter '{name}' has shape {value.shape}, expected {shape}")
                self.params[name] = value.copy()

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for name, kernel in self.arch.layers():
            shapes[f"{name}.w"] = kernel
            shapes[f"{name}.b"] = (kernel[3],)
        return shapes

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_shapes()])

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.arch, self.params, dtype=self.dtype)

    def clear_cache(self) -> None:
        self._cache = None
        self._cached_input = None

    # forward / backward on NHWC batches

    def forward(self, x: np.ndarray, keep_cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4:
            raise ShapeMismatch(f"expected an NHWC batch, got {x.shape}")
        n, h, w, c = x.shape
        if h < MIN_SPATIAL or w < MIN_SPATIAL:
            raise ShapeTooSmall(f"spatial dims must be >= {MIN_SPATIAL}, got {h}x{w}")
        if c != self.arch.in_channels:
            raise ShapeMismatch(f"model expects {self.arch.in_channels} channels, got {c}")

        scale = self.dtype.type(self.arch.value_scale)
        pads = (0, 0, 0, 0)
        if self.arch.kind == "unet":
            pads = (0, h % 2, 0, w % 2)
        z = _pad_spatial(x / scale if scale != 1 else x, pads)

        y, caches = self._net_forward(z)
        y = y[:, :h, :w, :]
        out = x + y * scale if self.arch.residual else y * scale

        if keep_cache:
            self._cache = (caches, pads, z.shape, x.shape)
            self._cached_input = x
        else:
            self.clear_cache()
        return out

    def _net_forward(self, z: np.ndarray):
        p = self.params
        caches = []

        def conv(t, name, act):
            t, cc = conv_forward(t, p[f"{name}.w"], p[f"{name}.b"])
            caches.append(("conv", name, cc))
            if act and self.arch.relu:
                t, rc = relu_forward(t)
                caches.append(("relu", name, rc))
            return t

        if self.arch.kind == "conv":
            return conv(z, "conv", act=False), caches

        e1 = conv(conv(z, "enc1a", True), "enc1b", True)
        pooled, pc = maxpool_forward(e1)
        caches.append(("pool", None, pc))
        e2 = conv(conv(pooled, "enc2a", True), "enc2b", True)
        up, uc = upsample_forward(e2)
        caches.append(("up", None, uc))
        u1 = conv(up, "up1", True)
        cat = np.concatenate([u1, e1], axis=-1)
        caches.append(("cat", None, u1.shape[-1]))
        d1 = conv(cat, "dec1", True)
        return conv(d1, "out", act=False), caches

    def backward(self, grad_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """gradients of the parameters and of the input for the cached forward"""
        if self._cache is None:
            raise MissingForwardCache("backward called without a cached forward pass")
        caches, pads, zshape, xshape = self._cache
        grad_out = np.asarray(grad_out, dtype=self.dtype)
        if grad_out.shape != xshape:
            raise ShapeMismatch(f"gradient {grad_out.shape} vs output {xshape}")

        scale = self.dtype.type(self.arch.value_scale)
        dy = grad_out * scale
        dyp = np.zeros(zshape, dtype=self.dtype)
        dyp[:, :xshape[1], :xshape[2], :] = dy

        grads: Dict[str, np.ndarray] = {}
        skip = None
        g = dyp
        for kind, name, cache in reversed(caches):
            if kind == "conv":
                g, dw, db = conv_backward(g, cache)
                grads[f"{name}.w"] = dw
                grads[f"{name}.b"] = db
            elif kind == "relu":
                g = relu_backward(g, cache)
            elif kind == "cat":
                g, skip = g[..., :cache], g[..., cache:]
            elif kind == "up":
                g = upsample_backward(g, cache)
            elif kind == "pool":
                # the skip branch joins e1 here
                g = maxpool_backward(g, cache) + skip

        dz = _unpad_spatial(g, xshape, pads)
        dx = dz / scale if scale != 1 else dz
        if self.arch.residual:
            dx = dx + grad_out
        return grads, dx

    # images

    def predict(self, img: ArrayLike) -> np.ndarray:
        """denoise one (H, W) or (H, W, C) image"""
        arr = as_array(img)
        batch = arr[None, :, :, None] if arr.ndim == 2 else arr[None]
        out = self.forward(batch, keep_cache=False)[0]
        return (out[:, :, 0] if arr.ndim == 2 else out).astype(np.float32)


def init_params(arch: ArchSpec, seed: int = 0, dtype=np.float32,
                zero_output: bool = True) -> Dict[str, np.ndarray]:
    """He-uniform kernels, zero biases, zero final layer so the net starts at identity"""
    rng = make_rng(seed, STREAM_INIT, 0)
    params = {}
    layers = arch.layers()
    last = layers[-1][0]
    for name, kernel in layers:
        kh, kw, c_in, c_out = kernel
        if zero_output and name == last:
            params[f"{name}.w"] = np.zeros(kernel, dtype=dtype)
        else:
            limit = math.sqrt(6.0 / (kh * kw * c_in))
            params[f"{name}.w"] = rng.uniform(-limit, limit, size=kernel).astype(dtype)
        params[f"{name}.b"] = np.zeros((c_out,), dtype=dtype)
    return params


def randomize(model: DenoiserModel, seed: int, bias_scale: float = 0.1) -> DenoiserModel:
    """random values for every parameter, including the output layer"""
    params = init_params(model.arch, seed, model.dtype, zero_output=False)
    rng = make_rng(seed, STREAM_INIT, 1)
    for name in params:
        if name.endswith(".b"):
            params[name] = rng.uniform(-bias_scale, bias_scale,
                                       size=params[name].shape).astype(model.dtype)
    return DenoiserModel(model.arch, params, dtype=model.dtype)


def forward(model: DenoiserModel, x: ArrayLike) -> np.ndarray:
    """denoiser output for an image, same dims as x; caches activations"""
    arr = as_array(x)
    batch = arr[None, :, :, None] if arr.ndim == 2 else arr[None]
    out = model.forward(batch)[0]
    return out[:, :, 0] if arr.ndim == 2 else out


def backward(model: DenoiserModel, x: ArrayLike, grad_out: ArrayLike) -> Dict[str, np.ndarray]:
    """parameter gradients for the forward pass cached on x"""
    arr = as_array(x)
    batch = arr[None, :, :, None] if arr.ndim == 2 else arr[None]
    cached = model._cached_input
    if cached is None or cached.shape != batch.shape or not np.array_equal(
            cached, batch.astype(model.dtype)):
        raise MissingForwardCache("no forward pass cached for this input")
    g = np.asarray(grad_out)
    g = g[None, :, :, None] if g.ndim == 2 else g[None]
    grads, _ = model.backward(g)
    return grads


@dataclass
class GradientCheck:
    """worst relative error per parameter tensor; skipped counts elements whose
    difference stencil crossed a ReLU or max-pool switch"""
    errors: Dict[str, float]
    checked: int = 0
    skipped: int = 0

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)


def gradient_check(model: DenoiserModel, x: np.ndarray, target: np.ndarray,
                   h: float = 1e-3, kind: LossKind = LossKind.MSE,
                   floor: float = 1e-6, skip_kinks: bool = False,
                   kink_tol: float = 1e-10) -> GradientCheck:
    """compare backward against central differences, one parameter element at a time

    Between activation switches the MSE loss is quadratic in any single weight,
    so the second difference at h and at h/2 agree there. With skip_kinks an
    element whose two second differences disagree is counted as skipped.
    """

    def loss_at() -> float:
        out = model.forward(x, keep_cache=False)
        return sum(masked_loss_and_grad(out[i], target[i], None, kind)[0]
                   for i in range(len(out)))

    out = model.forward(x)
    dout = np.stack([masked_loss_and_grad(out[i], target[i], None, kind)[1]
                     for i in range(len(out))])
    grads, _ = model.backward(dout)
    base = loss_at()

    result = GradientCheck(errors={})
    for name, p in model.params.items():
        worst = 0.0
        flat = p.reshape(-1)
        analytic = grads[name].reshape(-1)
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + h
            plus = loss_at()
            flat[idx] = saved - h
            minus = loss_at()
            if skip_kinks:
                flat[idx] = saved + h / 2
                half_plus = loss_at()
                flat[idx] = saved - h / 2
                half_minus = loss_at()
            flat[idx] = saved

            if skip_kinks:
                full = plus - 2 * base + minus
                half = 4 * (half_plus - 2 * base + half_minus)
                if abs(full - half) > kink_tol * max(1.0, abs(base)):
                    result.skipped += 1
                    continue
            numeric = (plus - minus) / (2 * h)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            result.checked += 1
        result.errors[name] = worst
    if result.skipped:
        logger.debug(f"Gradient check skipped {result.skipped} of "
                     f"{result.checked + result.skipped} elements at a switch")
    return result


# --- optimizer ---

def cosine_lr(step: int, total: int, lr0: float = DEFAULT_LR) -> float:
    if total <= 0:
        raise ConfigError(f"schedule horizon must be > 0, got {total}")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class OptimState:
    """Adam moments and the cosine schedule position"""

    lr0: float = DEFAULT_LR
    total: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return cosine_lr(min(self.step, self.total), self.total, self.lr0)


def adam_step(model: DenoiserModel, grads: Dict[str, np.ndarray], opt: OptimState) -> float:
    """one bias-corrected Adam update at the scheduled rate; returns that rate"""
    for name, p in model.params.items():
        if name not in grads or np.shape(grads[name]) != p.shape:
            raise ShapeMismatch(f"gradient for '{name}' missing or misshaped")

    lr = opt.current_lr()
    t = opt.step + 1
    corr1 = 1.0 - opt.beta1 ** t
    corr2 = 1.0 - opt.beta2 ** t
    for name, p in model.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = opt.m.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        v = opt.v.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + opt.eps)
        p -= update.astype(p.dtype)
    opt.step = t
    model.clear_cache()
    return lr


# --- checkpoints ---

def save_model(model: DenoiserModel, path: str, opt: Optional[OptimState] = None) -> None:
    names = list(model.param_shapes())
    meta = {
        "arch": model.arch.to_dict(),
        "params": names,
        "optimizer": None if opt is None else {
            "lr0": opt.lr0, "total": opt.total, "beta1": opt.beta1,
            "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
        },
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(blob)), blob]
    for name in names:
        parts.append(encode_tensor(Tensor(model.params[name])))
    if opt is not None:
        for name in names:
            for moments in (opt.m, opt.v):
                value = moments.get(name, np.zeros(model.params[name].shape))
                parts.append(encode_tensor(Tensor(value)))
    try:
        with open(path, "wb") as f:
            f.write(b"".join(parts))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    logger.info(f"Saved model ({model.num_parameters} parameters) to {path}")


def load_model(path: str) -> Tuple[DenoiserModel, Optional[OptimState]]:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    if buf[:4] != MODEL_MAGIC:
        raise BadMagic(f"{path}: expected {MODEL_MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < 12:
        raise TruncatedPayload(f"{path}: header is cut short")
    version, size = struct.unpack_from("<II", buf, 4)
    if version != MODEL_VERSION:
        raise UnsupportedDtype(f"{path}: unsupported model version {version}")
    if len(buf) < 12 + size:
        raise TruncatedPayload(f"{path}: descriptor is cut short")
    try:
        meta = json.loads(buf[12:12 + size].decode("utf-8"))
    except ValueError as e:
        raise DataError(f"{path}: corrupt descriptor ({e})") from e

    arch = ArchSpec.from_dict(meta["arch"])
    pos = 12 + size
    params = {}
    for name in meta["params"]:
        tensor, pos = decode_tensor(buf, pos)
        params[name] = tensor.data
    model = DenoiserModel(arch, params)

    opt = None
    if meta.get("optimizer"):
        opt = OptimState(**meta["optimizer"])
        for name in meta["params"]:
            m, pos = decode_tensor(buf, pos)
            v, pos = decode_tensor(buf, pos)
            opt.m[name] = m.data.astype(np.float64)
            opt.v[name] = v.data.astype(np.float64)
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes")
    logger.info(f"Loaded {arch.kind} model from {path}")
    return model, opt
