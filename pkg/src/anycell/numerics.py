"""Dense float64 array ops with explicit forward/backward pairs.

Every differentiable op here comes as ``op(...)`` plus ``op_backward(...)``.
Layers built on top (``Linear``, ``LayerNorm``) return ``(out, cache)`` from
``forward`` and consume the cache in ``backward``, accumulating parameter
gradients into :class:`Param` objects.  Nothing is recorded on a tape.

Tensors are plain ``numpy.ndarray`` of dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import DimensionError, DomainError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


@dataclass(eq=False)
class Param:
    """A named value with its gradient buffer and a trainable flag."""

    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, g: np.ndarray) -> None:
        # frozen params keep an all-zero gradient
        if self.trainable:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class Module:
    """Base class giving deterministic hierarchical parameter names.

    Attributes are walked in insertion order; ``Param`` attributes are
    leaves, ``Module`` attributes and lists of modules are recursed into.
    """

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(name + ".")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    yield from sub.named_params(f"{name}.{i}.")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.trainable = flag
            if not flag:
                p.zero_grad()


# ---------------------------------------------------------------- matmul

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dc: np.ndarray):
    return dc @ b.T, a.T @ dc


# ----------------------------------------------------------- elementwise

def _check_pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.size == 1 or b.size == 1 or a.shape == b.shape:
        return a, b
    raise DimensionError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if like.shape == g.shape:
        return g
    return np.sum(g).reshape(like.shape)


def add(a, b):
    a, b = _check_pair(a, b)
    return a + b


def add_backward(a, b, dout):
    a, b = as_tensor(a), as_tensor(b)
    return _unbroadcast(dout, a), _unbroadcast(dout, b)


def mul(a, b):
    a, b = _check_pair(a, b)
    return a * b


def mul_backward(a, b, dout):
    a, b = as_tensor(a), as_tensor(b)
    return _unbroadcast(dout * b, a), _unbroadcast(dout * a, b)


def neg(x):
    return -as_tensor(x)


def neg_backward(x, dout):
    return -dout


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the result strictly inside (0, 1); beyond |x| ~ 37 it would round to 1 (or underflow to 0)
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid_backward(out, dout):
    return dout * out * (1.0 - out)


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, dout):
    return dout * (x > 0)


def softmax_rows(x):
    x = as_tensor(x)
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_backward(out, dout):
    return out * (dout - np.sum(dout * out, axis=-1, keepdims=True))


def log(x):
    x = as_tensor(x)
    if np.any(x <= 0):
        raise DomainError("log of non-positive entry")
    return np.log(x)


def log_backward(x, dout):
    return dout / x


_UNARY = {
    "neg": (neg, lambda x, out, d: neg_backward(x, d)),
    "sigmoid": (sigmoid, lambda x, out, d: sigmoid_backward(out, d)),
    "relu": (relu, lambda x, out, d: relu_backward(x, d)),
    "softmax-rows": (softmax_rows, lambda x, out, d: softmax_rows_backward(out, d)),
    "log": (log, lambda x, out, d: log_backward(x, d)),
}
_BINARY = {"add": (add, add_backward), "mul": (mul, mul_backward)}


def elementwise(op: str, *inputs):
    """Dispatch one of add, mul, sigmoid, relu, softmax-rows, log, neg."""
    if op in _UNARY:
        return _UNARY[op][0](*inputs)
    if op in _BINARY:
        return _BINARY[op][0](*inputs)
    raise ValueError(f"unknown elementwise op {op!r}")


def elementwise_backward(op: str, inputs, out, dout):
    """Gradients w.r.t. each input, returned as a tuple."""
    if op in _UNARY:
        return (_UNARY[op][1](as_tensor(inputs[0]), out, dout),)
    if op in _BINARY:
        return _BINARY[op][1](*inputs, dout)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- conv2d
#
# Internally convolutions run channels-last (N×H×W×C) so that im2col is a
# single strided view whose innermost chunk is a contiguous kw·C run.
# Kernel matrices in that layout are (kh·kw·C)×F, row order (i, j, c).

def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected C×H×W or N×C×H×W input, got {x.shape}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def kernel_matrix(kernels: np.ndarray) -> np.ndarray:
    """F×C×kh×kw kernels -> (kh·kw·C)×F matrix for the NHWC path."""
    f, c, kh, kw = kernels.shape
    return kernels.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)


def kernel_from_matrix(wm: np.ndarray, shape) -> np.ndarray:
    f, c, kh, kw = shape
    return wm.reshape(kh, kw, c, f).transpose(3, 2, 0, 1)


def im2col_nhwc(x, kh: int, kw: int, stride: int, pad: int):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else np.ascontiguousarray(x)
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    # canonical strides: numpy may report arbitrary strides on size-1 axes of a contiguous array
    e = xp.itemsize
    s = (xp.shape[1] * xp.shape[2] * c * e, xp.shape[2] * c * e, c * e, e)
    view = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, kh, kw * c), (s[0], s[1] * stride, s[2] * stride, s[1], s[3]),
        writeable=False)
    return view.reshape(n * ho * wo, kh * kw * c), ho, wo


def conv2d_nhwc(x, wm, kh: int, kw: int, stride: int = 1, pad: int = 0):
    """Channels-last conv. Returns (out N×Ho×Wo×F, cols) with cols kept for backward."""
    n = x.shape[0]
    cols, ho, wo = im2col_nhwc(x, kh, kw, stride, pad)
    return (cols @ wm).reshape(n, ho, wo, wm.shape[1]), cols


def conv2d_nhwc_backward(cols, wm, dout, x_shape, kh: int, kw: int, stride: int = 1,
                         pad: int = 0, need_dx: bool = True):
    """Returns (dx or None, dwm)."""
    n, h, w, c = x_shape
    f = dout.shape[-1]
    d2 = dout.reshape(-1, f)
    dwm = cols.T @ d2
    if not need_dx:
        return None, dwm
    if stride == 1 and pad <= kh - 1 and pad <= kw - 1 and kh == kw:
        # stride 1: input gradient is a full convolution with flipped kernels
        wf = wm.reshape(kh, kw, c, f)[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * f, c)
        dcols, _, _ = im2col_nhwc(dout, kh, kw, 1, kh - 1 - pad)
        return (dcols @ wf).reshape(n, h, w, c), dwm
    ho, wo = dout.shape[1], dout.shape[2]
    dcols = (d2 @ wm.T).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pad:pad + h, pad:pad + w, :], dwm


def _check_conv(x, kernels, stride, pad):
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise DimensionError(
            f"conv2d output would be {ho}x{wo} for input {x.shape}, kernels {kernels.shape}")


def conv2d(x, kernels, stride: int = 1, pad: int = 0, bias=None):
    """Zero-padded cross-correlation. ``x`` is C×H×W or N×C×H×W."""
    x = as_tensor(x)
    xb, squeeze = _batched(x)
    _check_conv(xb, kernels, stride, pad)
    f, _, kh, kw = kernels.shape
    out, _ = conv2d_nhwc(xb.transpose(0, 2, 3, 1), kernel_matrix(kernels), kh, kw, stride, pad)
    if bias is not None:
        out = out + bias
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if squeeze else out


def conv2d_backward(x, kernels, dout, stride: int = 1, pad: int = 0):
    """Returns (dx, dkernels, dbias)."""
    x = as_tensor(x)
    xb, squeeze = _batched(x)
    db, _ = _batched(as_tensor(dout))
    f, c, kh, kw = kernels.shape
    xl = xb.transpose(0, 2, 3, 1)
    dl = np.ascontiguousarray(db.transpose(0, 2, 3, 1))
    cols, _, _ = im2col_nhwc(xl, kh, kw, stride, pad)
    dxl, dwm = conv2d_nhwc_backward(cols, kernel_matrix(kernels), dl, xl.shape, kh, kw, stride, pad)
    dx = np.ascontiguousarray(dxl.transpose(0, 3, 1, 2))
    return (dx[0] if squeeze else dx), kernel_from_matrix(dwm, kernels.shape), db.sum(axis=(0, 2, 3))


def conv_transpose2d(x, kernels, bias=None):
    """Transposed conv with kernel size == stride (non-overlapping blocks).

    ``kernels`` is Cin×Cout×s×s; output spatial dims are multiplied by s.
    """
    x = as_tensor(x)
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    cin, cout, s, s2 = kernels.shape
    if cin != c or s != s2:
        raise DimensionError(f"conv_transpose2d mismatch: input {x.shape}, kernels {kernels.shape}")
    out = np.einsum("nchw,cfab->nfhawb", xb, kernels, optimize=True).reshape(n, cout, h * s, w * s)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out[0] if squeeze else out


def conv_transpose2d_backward(x, kernels, dout):
    x = as_tensor(x)
    xb, squeeze = _batched(x)
    db, _ = _batched(as_tensor(dout))
    n, c, h, w = xb.shape
    cin, cout, s, _ = kernels.shape
    d6 = db.reshape(n, cout, h, s, w, s)
    dx = np.einsum("nfhawb,cfab->nchw", d6, kernels, optimize=True)
    dk = np.einsum("nchw,nfhawb->cfab", xb, d6, optimize=True)
    dbias = db.sum(axis=(0, 2, 3))
    return (dx[0] if squeeze else dx), dk, dbias


# ------------------------------------------------------ pooling / resizing

def maxpool2x2(x):
    """2×2 max pooling, stride 2. Returns (out, argmax mask)."""
    xb, squeeze = _batched(as_tensor(x))
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    blocks = xb.reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))
    # first max wins on ties so the routing is unique
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    mask = mask.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (out[0] if squeeze else out), (mask[0] if squeeze else mask)


def maxpool2x2_backward(mask, dout):
    up = upsample_nearest2x(dout)
    return up * mask


def upsample_nearest2x(x):
    x = as_tensor(x)
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def upsample_nearest2x_backward(dout):
    *lead, h, w = dout.shape
    return dout.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))


def bilinear_matrix(n_in: int, factor: int = 2) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-centred bilinear upsampling."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def bilinear_upsample(x, factor: int = 2):
    """Bilinear resize of the last two axes; a fixed linear map."""
    x = as_tensor(x)
    mh = bilinear_matrix(x.shape[-2], factor)
    mw = bilinear_matrix(x.shape[-1], factor)
    return mh @ x @ mw.T


def bilinear_upsample_backward(dout, factor: int = 2):
    h, w = dout.shape[-2] // factor, dout.shape[-1] // factor
    mh = bilinear_matrix(h, factor)
    mw = bilinear_matrix(w, factor)
    return mh.T @ dout @ mw


# --------------------------------------------------------- layer modules

class Linear(Module):
    """y = x Wᵀ + b over the last axis."""

    def __init__(self, w: np.ndarray, b: np.ndarray | None = None, trainable: bool = True):
        self.weight = Param(w, trainable)
        if b is not None:
            self.bias = Param(b, trainable)

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std=None):
        std = np.sqrt(2.0 / (d_in + d_out)) if std is None else std
        w = rng.normal(0.0, std, size=(d_out, d_in))
        return cls(w, np.zeros(d_out) if bias else None)

    def forward(self, x):
        y = x @ self.weight.value.T
        if hasattr(self, "bias"):
            y = y + self.bias.value
        return y, x

    def backward(self, cache, dy):
        x = cache
        if self.weight.trainable:
            self.weight.accumulate(dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1]))
        if hasattr(self, "bias") and self.bias.trainable:
            self.bias.accumulate(dy.reshape(-1, dy.shape[-1]).sum(axis=0))
        return dy @ self.weight.value


LN_EPS = 1e-8


def layer_norm(x, eps: float = LN_EPS):
    """Normalize the last axis (no affine). Returns (xhat, inv_std)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def layer_norm_backward(xhat, inv, dxhat):
    d = xhat.shape[-1]
    return inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                      - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Param(np.ones(d))
        self.beta = Param(np.zeros(d))

    def forward(self, x):
        xhat, inv = layer_norm(x)
        return xhat * self.gamma.value + self.beta.value, (xhat, inv)

    def backward(self, cache, dy):
        xhat, inv = cache
        d = dy.shape[-1]
        self.gamma.accumulate(np.sum((dy * xhat).reshape(-1, d), axis=0))
        self.beta.accumulate(dy.reshape(-1, d).sum(axis=0))
        return layer_norm_backward(xhat, inv, dy * self.gamma.value)


# -------------------------------------------------------- gradient oracle

def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b) -> float:
    """max |a-b| / max(|a|, |b|, 1e-8), the norm used by every gradient check."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / denom)
