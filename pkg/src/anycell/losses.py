"""Segmentation objectives (focal, Dice, Dice+CE) with gradients, and mask metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .numerics import sigmoid

CE_TERMS = ("full", "onesided")


@dataclass(frozen=True)
class LossConfig:
    # None gives both classes weight 1; a number a weights positives a, negatives 1 - a
    alpha_t: float | None = 0.25
    gamma: float = 2.0
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    score_weight: float = 1.0
    eps: float = 1e-6
    ce_term: str = "full"

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if min(self.focal_weight, self.dice_weight, self.score_weight) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if self.ce_term not in CE_TERMS:
            raise ConfigError(f"ce_term must be one of {CE_TERMS}")


def _pair(p, g):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and target {g.shape} differ in shape")
    return p, g


def _alpha(g, alpha_t):
    if alpha_t is None:
        return np.ones_like(g)
    return np.where(g > 0.5, alpha_t, 1.0 - alpha_t)


def focal_loss_and_grad(p, g, cfg: LossConfig = LossConfig()):
    """Mean of -a_t (1 - p_t)^gamma log p_t and its derivative w.r.t. p."""
    p, g = _pair(p, g)
    pc = np.clip(p, cfg.eps, 1.0 - cfg.eps)
    inside = (p > cfg.eps) & (p < 1.0 - cfg.eps)
    pos = g > 0.5
    pt = np.where(pos, pc, 1.0 - pc)
    a = _alpha(g, cfg.alpha_t)
    q = 1.0 - pt
    lg = np.log(pt)
    loss = np.mean(-a * q ** cfg.gamma * lg)
    # d/dpt of -(1-pt)^γ log pt
    if cfg.gamma == 0:
        dpt = -1.0 / pt
    else:
        dpt = cfg.gamma * q ** (cfg.gamma - 1.0) * lg - q ** cfg.gamma / pt
    dp = a * dpt * np.where(pos, 1.0, -1.0) * inside / p.size
    return float(loss), dp


def focal_loss(p, g, cfg: LossConfig = LossConfig()) -> float:
    return focal_loss_and_grad(p, g, cfg)[0]


def dice_loss_and_grad(p, g, eps: float = 1e-6):
    """1 - (2 Σpg + eps) / (Σp² + Σg² + eps) and its derivative w.r.t. p."""
    p, g = _pair(p, g)
    num = 2.0 * np.sum(p * g) + eps
    den = np.sum(p * p) + np.sum(g * g) + eps
    loss = 1.0 - num / den
    dp = -(2.0 * g * den - num * 2.0 * p) / den ** 2
    return float(loss), dp


def dice_loss(p, g, eps: float = 1e-6) -> float:
    return dice_loss_and_grad(p, g, eps)[0]


def bce_and_grad(p, g, eps: float = 1e-6, ce_term: str = "full"):
    """Mean binary CE on clamped probabilities; 'onesided' keeps only -g log p."""
    p, g = _pair(p, g)
    if ce_term not in CE_TERMS:
        raise ConfigError(f"ce_term must be one of {CE_TERMS}")
    pc = np.clip(p, eps, 1.0 - eps)
    inside = (p > eps) & (p < 1.0 - eps)
    term = g * np.log(pc)
    dp = g / pc
    if ce_term == "full":
        term = term + (1.0 - g) * np.log(1.0 - pc)
        dp = dp - (1.0 - g) / (1.0 - pc)
    return float(-np.mean(term)), -dp * inside / p.size


def dice_ce_loss_and_grad(p, g, eps: float = 1e-6, ce_term: str = "full"):
    dl, dd = dice_loss_and_grad(p, g, eps)
    cl, dc = bce_and_grad(p, g, eps, ce_term)
    return dl + cl, dd + dc


def dice_ce_loss(p, g, eps: float = 1e-6, ce_term: str = "full") -> float:
    return dice_ce_loss_and_grad(p, g, eps, ce_term)[0]


def soft_iou_target(mask_logits, g) -> float:
    """IoU of the binarized (logit >= 0) mask against g: the score head's target."""
    return compute_metrics((np.asarray(mask_logits) >= 0).astype(np.uint8), g).iou


def segmentation_loss_and_grad(mask_logits, score, g, cfg: LossConfig = LossConfig()):
    """Weighted focal + Dice on sigmoid(logits) plus L2 of score vs realized IoU.

    Returns (loss, d/dlogits, d/dscore).  The IoU target is treated as a constant.
    """
    logits, g = _pair(mask_logits, g)
    p = sigmoid(logits)
    fl, dfl = focal_loss_and_grad(p, g, cfg)
    dl, ddl = dice_loss_and_grad(p, g, cfg.eps)
    target = soft_iou_target(logits, g)
    loss = cfg.focal_weight * fl + cfg.dice_weight * dl + cfg.score_weight * (score - target) ** 2
    dp = cfg.focal_weight * dfl + cfg.dice_weight * ddl
    dlogits = dp * p * (1.0 - p)
    dscore = 2.0 * cfg.score_weight * (score - target)
    return float(loss), dlogits, float(dscore)


def segmentation_loss(out, g, cfg: LossConfig = LossConfig()) -> float:
    return segmentation_loss_and_grad(out.mask_logits, out.score, g, cfg)[0]


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class MetricReport:
    f1: float
    iou: float
    dice: float

    def as_dict(self) -> dict:
        return {"f1": self.f1, "iou": self.iou, "dice": self.dice}

    def to_json(self) -> str:
        return "{" + ", ".join(f'"{k}": {v:.6f}' for k, v in self.as_dict().items()) + "}"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(float(d["f1"]), float(d["iou"]), float(d["dice"]))


def _binary(m, name):
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise ValidationError(f"{name} must be binary (0/1)")
    return m.astype(bool)


def confusion_counts(pred, gt) -> tuple:
    pred = _binary(pred, "pred")
    gt = _binary(gt, "gt")
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def compute_metrics(pred, gt) -> MetricReport:
    tp, fp, fn = confusion_counts(pred, gt)
    if tp + fp + fn == 0:
        return MetricReport(1.0, 1.0, 1.0)
    dice = 2 * tp / (2 * tp + fp + fn)
    iou = tp / (tp + fp + fn)
    if tp == 0:
        f1 = 0.0
    else:
        precision = tp / (tp + fp)
        recall = tp / (tp + fn)
        f1 = 2 * precision * recall / (precision + recall)
    return MetricReport(f1, iou, dice)


def mean_metrics(reports) -> MetricReport:
    """Per-image average (each image counts once)."""
    reports = list(reports)
    if not reports:
        raise ValidationError("no metric reports to average")
    return MetricReport(*(float(np.mean([getattr(r, k) for r in reports])) for k in ("f1", "iou", "dice")))
