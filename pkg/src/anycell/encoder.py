"""Toy ViT image encoder: frozen base weights, LoRA on Q/V in every block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .lora import AdaptedAttention
from .numerics import LayerNorm, Linear, Module, Param
from .optim import Adam

POLICIES = ("lora_only", "full_ft", "frozen")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    width: int = 64
    depth: int = 4
    heads: int = 4
    lora_rank: int = 4
    in_channels: int = 1
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid ** 2


@dataclass
class ImageEmbedding:
    grid: np.ndarray  # d × g × g


class MLP(Module):
    def __init__(self, fc1: Linear, fc2: Linear):
        self.fc1 = fc1
        self.fc2 = fc2

    @classmethod
    def init(cls, rng, d, hidden):
        return cls(Linear.init(rng, d, hidden), Linear.init(rng, hidden, d))

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a = np.maximum(h, 0.0)
        y, c2 = self.fc2.forward(a)
        return y, (c1, h, c2)

    def backward(self, cache, dy):
        c1, h, c2 = cache
        da = self.fc2.backward(c2, dy)
        return self.fc1.backward(c1, da * (h > 0))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, ln1, attn: AdaptedAttention, ln2, mlp: MLP):
        self.ln1 = ln1
        self.attn = attn
        self.ln2 = ln2
        self.mlp = mlp

    def forward(self, x):
        a, c_ln1 = self.ln1.forward(x)
        a, c_attn = self.attn.forward(a)
        h = x + a
        m, c_ln2 = self.ln2.forward(h)
        m, c_mlp = self.mlp.forward(m)
        return h + m, (c_ln1, c_attn, c_ln2, c_mlp)

    def backward(self, cache, dy):
        c_ln1, c_attn, c_ln2, c_mlp = cache
        dh = dy + self.ln2.backward(c_ln2, self.mlp.backward(c_mlp, dy))
        return dh + self.ln1.backward(c_ln1, self.attn.backward(c_attn, dh))


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """B×C×H×W -> B×n×(C·p·p), tokens in row-major grid order."""
    b, c, h, w = images.shape
    g_h, g_w = h // p, w // p
    x = images.reshape(b, c, g_h, p, g_w, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g_h * g_w, c * p * p)


def unpatchify(tokens: np.ndarray, c: int, p: int, g: int) -> np.ndarray:
    b = tokens.shape[0]
    x = tokens.reshape(b, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, g * p, g * p)


class ImageEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        d = config.width
        self._config = config
        self.patch_embed = Linear.init(rng, config.in_channels * config.patch_size ** 2, d)
        self.pos_embed = Param(rng.normal(0.0, 0.02, size=(config.tokens, d)))
        self.blocks = [
            Block(LayerNorm(d), AdaptedAttention.init(rng, d, config.heads, config.lora_rank),
                  LayerNorm(d), MLP.init(rng, d, config.mlp_ratio * d))
            for _ in range(config.depth)
        ]
        self.neck = LayerNorm(d)

    @property
    def config(self) -> EncoderConfig:
        return self._config

    def attention_layers(self) -> list[AdaptedAttention]:
        return [b.attn for b in self.blocks]

    def adapter_params(self) -> list[Param]:
        return [p for layer in self.attention_layers() for p in layer.adapter_params()]

    def base_params(self) -> list[Param]:
        ids = {id(p) for p in self.adapter_params()}
        return [p for p in self.params() if id(p) not in ids]

    def tokens_forward(self, images):
        cfg = self._config
        x, c_embed = self.patch_embed.forward(patchify(images, cfg.patch_size))
        x = x + self.pos_embed.value
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x)
            caches.append(c)
        x, c_neck = self.neck.forward(x)
        return x, (c_embed, caches, c_neck)

    def tokens_backward(self, cache, dx):
        c_embed, caches, c_neck = cache
        dx = self.neck.backward(c_neck, dx)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            dx = blk.backward(c, dx)
        self.pos_embed.accumulate(dx.sum(axis=0))
        self.patch_embed.backward(c_embed, dx)

    def forward(self, images):
        """B×C×H×W -> (B×d×g×g grid, cache)."""
        cfg = self._config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"expected B×{cfg.in_channels}×{cfg.image_size}×{cfg.image_size} images, "
                f"got {images.shape}")
        tok, cache = self.tokens_forward(images)
        b, g = images.shape[0], cfg.grid
        return tok.reshape(b, g, g, -1).transpose(0, 3, 1, 2), cache

    def backward(self, cache, dgrid):
        b, d = dgrid.shape[:2]
        self.tokens_backward(cache, dgrid.transpose(0, 2, 3, 1).reshape(b, -1, d))


def encode(image: np.ndarray, encoder: ImageEncoder) -> ImageEmbedding:
    """Embed one C×H×W image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"expected C×H×W image, got {image.shape}")
    grid, _ = encoder.forward(image[None])
    return ImageEmbedding(grid[0])


def set_trainable_policy(encoder: ImageEncoder, policy: str) -> None:
    """lora_only: adapters only; full_ft: everything; frozen: nothing."""
    if policy not in POLICIES:
        raise ConfigError(f"unknown trainable policy {policy!r}")
    adapters = {id(p) for p in encoder.adapter_params()}
    for p in encoder.params():
        if policy == "full_ft":
            p.trainable = True
        elif policy == "lora_only":
            p.trainable = id(p) in adapters
        else:
            p.trainable = False
        if not p.trainable:
            p.zero_grad()


def pretrain_encoder(encoder: ImageEncoder, images: np.ndarray, epochs: int, rng: np.random.Generator,
                     lr: float = 1e-3, batch_size: int = 8) -> list[float]:
    """Synthesize 'pretrained' base weights by patch autoencoding.

    Trains every base parameter plus a throwaway linear head to reconstruct
    each token's own patch pixels.  Adapters stay untouched (B remains 0).
    Returns the per-epoch mean reconstruction MSE.
    """
    cfg = encoder.config
    head = Linear.init(rng, cfg.width, cfg.in_channels * cfg.patch_size ** 2)
    set_trainable_policy(encoder, "full_ft")
    for p in encoder.adapter_params():
        p.trainable = False
    opt = Adam(encoder.params() + head.params(), lr=lr)
    history = []
    n = len(images)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            batch = images[order[start:start + batch_size]]
            target = patchify(batch, cfg.patch_size)
            tok, cache = encoder.tokens_forward(batch)
            rec, c_head = head.forward(tok)
            diff = rec - target
            total += float(np.sum(diff ** 2))
            opt.zero_grad()
            dtok = head.backward(c_head, 2.0 * diff / diff.size)
            encoder.tokens_backward(cache, dtok)
            opt.step()
        history.append(total / images[:, :1].size / cfg.in_channels)
    set_trainable_policy(encoder, "frozen")
    return history
