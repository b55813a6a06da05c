"""Prompt-free nucleus segmentation: a frozen ViT with Q/V low-rank adapters, an
auto-prompt UNet, point-prompt selection and a trainable two-way mask decoder."""

__version__ = "0.1.0"
