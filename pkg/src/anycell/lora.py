"""Low-rank adapters on the query and value projections of attention.

The adapted projection is ``h = W0 x + B A x`` with ``A`` r×d and ``B`` d×r.
Internally activations are row vectors, so the code computes
``x W0ᵀ + (x Aᵀ) Bᵀ``; it is the transpose of the column form.
The key projection never carries an adapter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import Module, Param, softmax_rows, softmax_rows_backward


class LoRAAdapter(Module):
    def __init__(self, A: np.ndarray, B: np.ndarray, scale: float = 1.0):
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        r, d = A.shape
        if B.shape != (d, r):
            raise DimensionError(f"adapter shapes disagree: A {A.shape}, B {B.shape}")
        if r < 1 or r > d:
            raise ConfigError(f"adapter rank must be in [1, {d}], got {r}")
        self.A = Param(A)
        self.B = Param(B)
        self._scale = scale

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, rank: int, std: float = 0.02):
        if rank < 1 or rank > d:
            raise ConfigError(f"adapter rank must be in [1, {d}], got {rank}")
        # B = 0 so the adapted layer starts as the base layer
        return cls(rng.normal(0.0, std, size=(rank, d)), np.zeros((d, rank)))

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def delta(self) -> np.ndarray:
        return self._scale * (self.B.value @ self.A.value)


def adapted_project(x: np.ndarray, base: Param, adapter: LoRAAdapter) -> np.ndarray:
    """``x W0ᵀ + (x Aᵀ) Bᵀ`` over the last axis of ``x``."""
    d = base.shape[1]
    if x.shape[-1] != d or adapter.d != d:
        raise DimensionError(
            f"width mismatch: x {x.shape}, base {base.shape}, adapter d={adapter.d}")
    out = x @ base.value.T
    low = x @ adapter.A.value.T
    return out + adapter._scale * (low @ adapter.B.value.T)


def adapted_project_backward(x, base: Param, adapter: LoRAAdapter, dout):
    """Accumulates into A, B (and W0 only if it is trainable); returns dx."""
    s = adapter._scale
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    low = x2 @ adapter.A.value.T
    dlow = s * (d2 @ adapter.B.value)
    adapter.B.accumulate(s * (d2.T @ low))
    adapter.A.accumulate(dlow.T @ x2)
    if base.trainable:
        base.accumulate(d2.T @ x2)
    dx = dout @ base.value + (dlow @ adapter.A.value).reshape(x.shape)
    return dx


def merge(base: Param, adapter: LoRAAdapter) -> np.ndarray:
    if base.shape != (adapter.d, adapter.d):
        raise DimensionError(f"cannot merge adapter d={adapter.d} into base {base.shape}")
    return base.value + adapter.delta()


# ------------------------------------------------------ multi-head core

def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def mha(q, k, v, heads: int):
    """Scaled dot-product attention on already-projected q (…×n×d), k, v (…×m×d)."""
    if q.shape[-1] % heads:
        raise ConfigError(f"width {q.shape[-1]} not divisible by {heads} heads")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    att = softmax_rows((qh @ kh.swapaxes(-1, -2)) * scale)
    out = merge_heads(att @ vh)
    return out, (qh, kh, vh, att, scale, heads)


def mha_backward(cache, dout):
    qh, kh, vh, att, scale, heads = cache
    doh = split_heads(dout, heads)
    datt = doh @ vh.swapaxes(-1, -2)
    dvh = att.swapaxes(-1, -2) @ doh
    dscores = softmax_rows_backward(att, datt) * scale
    dqh = dscores @ kh
    dkh = dscores.swapaxes(-1, -2) @ qh
    return merge_heads(dqh), merge_heads(dkh), merge_heads(dvh)


class AdaptedAttention(Module):
    """Self-attention with frozen base projections and Q/V adapters."""

    def __init__(self, Wq, Wk, Wv, Wo, adapter_q: LoRAAdapter, adapter_v: LoRAAdapter,
                 head_count: int):
        d = np.shape(Wq)[0]
        if d % head_count:
            raise ConfigError(f"width {d} not divisible by {head_count} heads")
        self.Wq = Param(Wq, trainable=False)
        self.Wk = Param(Wk, trainable=False)
        self.Wv = Param(Wv, trainable=False)
        self.Wo = Param(Wo, trainable=False)
        self.adapter_q = adapter_q
        self.adapter_v = adapter_v
        self._heads = head_count

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int, rank: int):
        std = 1.0 / np.sqrt(d)
        ws = [rng.normal(0.0, std, size=(d, d)) for _ in range(4)]
        return cls(*ws, LoRAAdapter.init(rng, d, rank), LoRAAdapter.init(rng, d, rank), heads)

    @property
    def head_count(self) -> int:
        return self._heads

    def base_params(self) -> list[Param]:
        return [self.Wq, self.Wk, self.Wv, self.Wo]

    def adapter_params(self) -> list[Param]:
        return self.adapter_q.params() + self.adapter_v.params()

    def forward(self, x):
        q = adapted_project(x, self.Wq, self.adapter_q)
        k = x @ self.Wk.value.T
        v = adapted_project(x, self.Wv, self.adapter_v)
        o, core = mha(q, k, v, self._heads)
        return o @ self.Wo.value.T, (x, o, core)

    def backward(self, cache, dy):
        x, o, core = cache
        d = x.shape[-1]
        if self.Wo.trainable:
            self.Wo.accumulate(dy.reshape(-1, d).T @ o.reshape(-1, d))
        dq, dk, dv = mha_backward(core, dy @ self.Wo.value)
        if self.Wk.trainable:
            self.Wk.accumulate(dk.reshape(-1, d).T @ x.reshape(-1, d))
        dx = dk @ self.Wk.value
        dx = dx + adapted_project_backward(x, self.Wq, self.adapter_q, dq)
        dx = dx + adapted_project_backward(x, self.Wv, self.adapter_v, dv)
        return dx


def attention_forward(x, layer: AdaptedAttention):
    return layer.forward(x)[0]


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    def __add__(self, other: "ParamCount") -> "ParamCount":
        return ParamCount(self.trainable + other.trainable, self.frozen + other.frozen)

    def as_dict(self) -> dict:
        return {"trainable": self.trainable, "frozen": self.frozen, "total": self.total}


def count_params(params) -> ParamCount:
    t = sum(p.size for p in params if p.trainable)
    f = sum(p.size for p in params if not p.trainable)
    return ParamCount(t, f)


def count_adapter_params(layers) -> dict:
    """Trainable / frozen / total counts over a list of adapted attention layers."""
    total = ParamCount(0, 0)
    for layer in layers:
        total = total + count_params(layer.params())
    return total.as_dict()
