"""The assembled segmenter: image encoder, prompt generator, prompt encoder, mask decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .checkpoint import Checkpoint
from .decoder import MaskDecoder
from .encoder import EncoderConfig, ImageEncoder
from .errors import ConfigError, ValidationError
from .generator import DEFAULT_WIDTHS, UNet
from .numerics import Module
from .prompt_encoder import PromptEncoder


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    width: int = 64
    depth: int = 4
    heads: int = 4
    lora_rank: int = 4
    decoder_depth: int = 2
    generator_widths: tuple = DEFAULT_WIDTHS

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(image_size=self.image_size, patch_size=self.patch_size, width=self.width,
                             depth=self.depth, heads=self.heads, lora_rank=self.lora_rank)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["generator_widths"] = list(self.generator_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        d = dict(d)
        if "generator_widths" in d:
            d["generator_widths"] = tuple(d["generator_widths"])
        return cls(**d)


class SACModel(Module):
    def __init__(self, config: ModelConfig, seed: int):
        self._config = config
        rng = np.random.default_rng((seed, 0))
        enc = config.encoder_config()
        self.encoder = ImageEncoder(enc, rng)
        self.prompt_encoder = PromptEncoder(config.width, rng)
        self.decoder = MaskDecoder(rng, config.width, config.heads, enc.grid, config.image_size,
                                   config.decoder_depth)
        self.generator = UNet(rng, 1, config.generator_widths)

    @property
    def config(self) -> ModelConfig:
        return self._config

    def state(self) -> dict:
        return {n: p.value.copy() for n, p in self.named_params()}

    def trainable_flags(self) -> dict:
        return {n: p.trainable for n, p in self.named_params()}

    def load_state(self, tensors: dict, trainable: dict | None = None) -> None:
        own = dict(self.named_params())
        if set(own) != set(tensors):
            missing = sorted(set(own) - set(tensors))[:3]
            extra = sorted(set(tensors) - set(own))[:3]
            raise ValidationError(f"tensor names do not match the model (missing {missing}, unexpected {extra})")
        for name, p in own.items():
            v = np.asarray(tensors[name], dtype=np.float64)
            if v.shape != p.shape:
                raise ValidationError(f"tensor {name}: shape {v.shape} != model {p.shape}")
            p.value = v.copy()
            if trainable is not None:
                p.trainable = bool(trainable[name])
            p.zero_grad()

    def to_checkpoint(self, config: dict, epoch: int, best_val_dice: float, rng_state: int) -> Checkpoint:
        return Checkpoint(self.state(), self.trainable_flags(), config, epoch, best_val_dice, rng_state)


def model_from_checkpoint(ckpt: Checkpoint) -> SACModel:
    try:
        cfg = ModelConfig.from_dict(ckpt.config["model"])
        seed = int(ckpt.config["train"]["seed"])
    except KeyError as exc:
        raise ValidationError(f"checkpoint config lacks {exc}") from None
    model = SACModel(cfg, seed)
    model.load_state(ckpt.tensors, ckpt.trainable)
    return model
