"""Frozen point-prompt encoder: fixed sinusoidal position code plus a label vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError
from .numerics import Module, Param
from .selection import POSITIVE, PromptSet

# highest frequency as a multiple of the lowest (pi)
MAX_FREQ_RATIO = 64.0


@dataclass
class PromptEmbedding:
    tokens: np.ndarray  # n × d


def frequencies(d: int) -> np.ndarray:
    """d/4 geometric frequencies from pi to pi * MAX_FREQ_RATIO.

    At the lowest frequency sin/cos of pi*u is injective on u in (0, 1), so no
    two pixels of an image can share a code.
    """
    if d % 4:
        raise ConfigError(f"prompt width must be divisible by 4, got {d}")
    f = d // 4
    if f == 1:
        return np.array([np.pi])
    return np.pi * MAX_FREQ_RATIO ** (np.arange(f) / (f - 1))


def positional_encoding(u_x, u_y, d: int) -> np.ndarray:
    """Code for normalized coordinates in (0, 1): [sin ωx, cos ωx, sin ωy, cos ωy]."""
    w = frequencies(d)
    ax = np.asarray(u_x, dtype=np.float64)[..., None] * w
    ay = np.asarray(u_y, dtype=np.float64)[..., None] * w
    return np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=-1)


def dense_positional_encoding(grid: int, image_size: int, d: int) -> np.ndarray:
    """Codes of the grid-cell centres in pixel units, (grid·grid) × d, row-major."""
    cell = image_size / grid
    centres = (np.arange(grid) + 0.5) * cell / image_size
    uy, ux = np.meshgrid(centres, centres, indexing="ij")
    return positional_encoding(ux.ravel(), uy.ravel(), d)


class PromptEncoder(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        frequencies(d)
        self._d = d
        self.label_pos = Param(rng.normal(0.0, 1.0, size=d), trainable=False)
        self.label_neg = Param(rng.normal(0.0, 1.0, size=d), trainable=False)
        self.no_prompt = Param(rng.normal(0.0, 1.0, size=d), trainable=False)

    @property
    def d(self) -> int:
        return self._d


def encode_prompts(prompts: PromptSet, image_size: int, encoder: PromptEncoder) -> PromptEmbedding:
    if len(prompts) == 0:
        return PromptEmbedding(encoder.no_prompt.value[None].copy())
    for p in prompts:
        if not (0 <= p.x < image_size and 0 <= p.y < image_size):
            raise ValidationError(f"prompt {p} lies outside the {image_size}×{image_size} image")
    xs = np.array([p.x for p in prompts], dtype=np.float64)
    ys = np.array([p.y for p in prompts], dtype=np.float64)
    pe = positional_encoding((xs + 0.5) / image_size, (ys + 0.5) / image_size, encoder.d)
    labels = np.array([p.label == POSITIVE for p in prompts])
    lab = np.where(labels[:, None], encoder.label_pos.value, encoder.label_neg.value)
    return PromptEmbedding(pe + lab)
