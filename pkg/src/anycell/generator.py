"""Auxiliary UNet that maps an image to positive/negative prompt probabilities.

The network emits two logit channels; a per-channel sigmoid gives the
probability that a pixel is a good positive (inside a nucleus) or negative
(clear background) prompt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .numerics import (Module, Param, conv2d_nhwc, conv2d_nhwc_backward, kernel_from_matrix,
                       kernel_matrix, sigmoid)

DEFAULT_WIDTHS = (8, 16, 32, 64)
LOG_CLAMP = 1e-12


@dataclass
class GeneratorOutput:
    M: np.ndarray  # 2 × H × W logits


@dataclass
class ProbabilityMap:
    P_pos: np.ndarray
    P_neg: np.ndarray

    @property
    def shape(self):
        return self.P_pos.shape

    def swapped(self) -> "ProbabilityMap":
        return ProbabilityMap(self.P_neg, self.P_pos)


class Conv(Module):
    """k×k conv (stride 1, same padding) on channels-last tensors."""

    def __init__(self, kernel: np.ndarray, bias: np.ndarray):
        self.kernel = Param(kernel)
        self.bias = Param(bias)

    @classmethod
    def init(cls, rng, c_in, c_out, k=3):
        std = np.sqrt(2.0 / (c_in * k * k))
        return cls(rng.normal(0.0, std, size=(c_out, c_in, k, k)), np.zeros(c_out))

    @property
    def k(self) -> int:
        return self.kernel.shape[-1]

    def forward(self, x):
        k = self.k
        wm = kernel_matrix(self.kernel.value)
        out, cols = conv2d_nhwc(x, wm, k, k, 1, k // 2)
        return out + self.bias.value, (cols, wm, x.shape)

    def backward(self, cache, dy, need_dx=True):
        cols, wm, xshape = cache
        k = self.k
        dx, dwm = conv2d_nhwc_backward(cols, wm, dy, xshape, k, k, 1, k // 2, need_dx)
        self.kernel.accumulate(kernel_from_matrix(dwm, self.kernel.shape))
        self.bias.accumulate(dy.reshape(-1, dy.shape[-1]).sum(axis=0))
        return dx


class DoubleConv(Module):
    def __init__(self, a: Conv, b: Conv):
        self.a = a
        self.b = b

    @classmethod
    def init(cls, rng, c_in, c_out):
        return cls(Conv.init(rng, c_in, c_out), Conv.init(rng, c_out, c_out))

    def forward(self, x):
        h1, ca = self.a.forward(x)
        r1 = np.maximum(h1, 0.0)
        h2, cb = self.b.forward(r1)
        return np.maximum(h2, 0.0), (ca, h1, cb, h2)

    def backward(self, cache, dy, need_dx=True):
        ca, h1, cb, h2 = cache
        dr1 = self.b.backward(cb, dy * (h2 > 0))
        return self.a.backward(ca, dr1 * (h1 > 0), need_dx)


def _pool(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(idx, dy):
    n, hh, ww, c = dy.shape
    d = np.zeros((n, hh, ww, c, 4))
    np.put_along_axis(d, idx[..., None], dy[..., None], axis=-1)
    return d.reshape(n, hh, ww, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * hh, 2 * ww, c)


def _up(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _up_backward(dy):
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class UNet(Module):
    """4-level UNet: conv-relu-conv-relu per level, 2× max pooling down,
    nearest upsampling + skip concatenation up, final 1×1 conv to 2 channels."""

    levels = 4

    def __init__(self, rng: np.random.Generator, in_channels: int = 1, widths=DEFAULT_WIDTHS):
        if len(widths) != self.levels:
            raise ValueError(f"need {self.levels} channel widths, got {widths}")
        self._widths = tuple(widths)
        self.down = []
        c = in_channels
        for w in widths:
            self.down.append(DoubleConv.init(rng, c, w))
            c = w
        self.up = []
        for w in reversed(widths[:-1]):
            self.up.append(DoubleConv.init(rng, c + w, w))
            c = w
        self.head = Conv.init(rng, c, 2, k=1)

    @property
    def widths(self):
        return self._widths

    def forward(self, images):
        """B×C×H×W -> (B×2×H×W logits, cache)."""
        images = np.asarray(images, dtype=np.float64)
        h, w = images.shape[-2:]
        div = 2 ** (self.levels - 1)
        if h % div or w % div:
            raise DimensionError(f"spatial dims {h}×{w} must be divisible by {div}")
        x = np.ascontiguousarray(images.transpose(0, 2, 3, 1))
        skips, c_down, pools = [], [], []
        for i, blk in enumerate(self.down):
            x, c = blk.forward(x)
            c_down.append(c)
            if i < self.levels - 1:
                skips.append(x)
                x, idx = _pool(x)
                pools.append(idx)
        c_up = []
        for blk, skip in zip(self.up, reversed(skips)):
            x = np.concatenate([_up(x), skip], axis=-1)
            x, c = blk.forward(x)
            c_up.append((c, skip.shape[-1]))
        out, c_head = self.head.forward(x)
        logits = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        return logits, (c_down, pools, c_up, c_head)

    def backward(self, cache, dlogits):
        c_down, pools, c_up, c_head = cache
        dx = self.head.backward(c_head, np.ascontiguousarray(dlogits.transpose(0, 2, 3, 1)))
        dskips = []
        for blk, (c, n_skip) in zip(reversed(self.up), reversed(c_up)):
            dcat = blk.backward(c, dx)
            dskips.append(dcat[..., -n_skip:])
            dx = _up_backward(dcat[..., :-n_skip])
        for i in reversed(range(self.levels)):
            if i < self.levels - 1:
                dx = _pool_backward(pools[i], dx) + dskips[i]
            dx = self.down[i].backward(c_down[i], dx, need_dx=i > 0)


def generate(image: np.ndarray, unet: UNet) -> GeneratorOutput:
    """Logit map M for one C×H×W image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"expected C×H×W image, got {image.shape}")
    logits, _ = unet.forward(image[None])
    return GeneratorOutput(logits[0])


def to_probability(out: GeneratorOutput) -> ProbabilityMap:
    p = sigmoid(out.M)
    return ProbabilityMap(p[0], p[1])


def _check_binary(t, name):
    t = np.asarray(t, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError(f"{name} must be binary (0/1)")
    return t


def bce_with_logits(logits, targets):
    """Mean clamped BCE of sigmoid(logits) vs binary targets, and d/dlogits."""
    s = sigmoid(logits)
    lp = np.log(np.maximum(s, LOG_CLAMP))
    ln = np.log(np.maximum(1.0 - s, LOG_CLAMP))
    loss = -np.mean(targets * lp + (1.0 - targets) * ln)
    # derivative of the clamped form; a clamped log contributes nothing
    g = -targets * (1.0 - s) * (s > LOG_CLAMP) + (1.0 - targets) * s * ((1.0 - s) > LOG_CLAMP)
    return float(loss), g / logits.size


def generator_targets(target_pos, target_neg) -> np.ndarray:
    return np.stack([_check_binary(target_pos, "target_pos"), _check_binary(target_neg, "target_neg")], axis=-3)


def generator_loss(pred: GeneratorOutput, target_pos, target_neg) -> float:
    """Mean BCE over both channels and every pixel."""
    t = generator_targets(target_pos, target_neg)
    if t.shape != pred.M.shape:
        raise DimensionError(f"target shape {t.shape} does not match logits {pred.M.shape}")
    return bce_with_logits(pred.M, t)[0]
