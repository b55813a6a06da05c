"""PNG figures for training curves and the selection ablation (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
_PNG_META = {"Software": None}


def plot_convergence(sac_rows: list, generator_rows: list, path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    ax = axes[0]
    if sac_rows:
        ep = [r["epoch"] for r in sac_rows]
        ax.plot(ep, [r["train_loss"] for r in sac_rows], label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("segmentation loss")
        ax2 = ax.twinx()
        ax2.plot(ep, [r["val_dice"] for r in sac_rows], color="tab:orange", label="val Dice")
        ax2.set_ylabel("validation Dice")
        ax2.set_ylim(0, 1)
    ax.set_title("fine-tuning")
    ax = axes[1]
    if generator_rows:
        ep = [r["epoch"] for r in generator_rows]
        ax.plot(ep, [r["train_loss"] for r in generator_rows], label="train")
        ax.plot(ep, [r["val_loss"] for r in generator_rows], label="val")
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE")
    ax.set_title("prompt generator")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_ablation(rows: list, path) -> None:
    names = [r["method"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].bar(names, [r["dice"] for r in rows], color="tab:blue")
    axes[0].set_ylabel("test Dice")
    axes[0].set_ylim(0, 1)
    axes[1].bar(names, [1e3 * r["select_seconds_per_image"] for r in rows], color="tab:red")
    axes[1].set_ylabel("selection ms / image")
    for ax in axes:
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
