"""Training orchestration: encoder pretraining, generator phase, SAC fine-tuning, evaluation."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import Checkpoint
from .encoder import pretrain_encoder, set_trainable_policy
from .errors import ConfigError, TrainingError
from .generator import ProbabilityMap, bce_with_logits, generator_targets
from .losses import LossConfig, MetricReport, compute_metrics, mean_metrics, segmentation_loss_and_grad
from .model import ModelConfig, SACModel
from .optim import make_optimizer
from .prompt_encoder import encode_prompts
from .rng import SplitMix64, derive_seed
from .selection import PromptSet, expert_prompts, select_prompts
from .numerics import sigmoid

MODES = {"sac": "lora_only", "sam-ft": "full_ft", "frozen": "frozen"}
SELECTORS = ("centroid", "random", "topk")
EXPERTS_AT = ("train", "infer", "both")
SPLIT_IDS = {"train": 0, "val": 1, "test": 2, "predict": 3}
# sub-streams of derive_seed
_RANDOM_STREAM, _EXPERT_STREAM, _SHUFFLE_STREAM = 1, 2, 3


@dataclass
class TrainConfig:
    mode: str = "sac"
    points: int = 3
    experts: int = 0
    select: str = "centroid"
    seed: int = 0
    min_epochs: int = 30
    patience: int = 10
    max_epochs: int = 60
    gen_min_epochs: int = 30
    gen_patience: int = 10
    gen_max_epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 8
    optimizer: str = "adam"
    tau: float = 0.5
    tau_bin: float = 0.5
    connectivity: int = 4
    joint: bool = False
    experts_at: str = "both"
    pretrain_epochs: int = 5
    alpha_t: float = 0.25
    gamma: float = 2.0
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    score_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.select not in SELECTORS:
            raise ConfigError(f"select must be one of {SELECTORS}, got {self.select!r}")
        if self.experts_at not in EXPERTS_AT:
            raise ConfigError(f"experts_at must be one of {EXPERTS_AT}, got {self.experts_at!r}")
        if self.min_epochs < 1 or self.gen_min_epochs < 1:
            raise ConfigError("min_epochs must be >= 1")
        if self.patience < 0 or self.gen_patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.max_epochs < self.min_epochs or self.gen_max_epochs < self.gen_min_epochs:
            raise ConfigError("max_epochs must be >= min_epochs")
        if self.points < 0 or self.experts < 0:
            raise ConfigError("point and expert counts must be >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size must be >= 1 and lr > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not (0 < self.tau < 1 and 0 < self.tau_bin < 1):
            raise ConfigError("thresholds must lie in (0, 1)")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha_t=self.alpha_t, gamma=self.gamma, focal_weight=self.focal_weight,
                          dice_weight=self.dice_weight, score_weight=self.score_weight)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)

    def experts_for(self, stage: str) -> int:
        """Expert prompt count used at 'train' or 'infer' time."""
        return self.experts if self.experts_at in (stage, "both") else 0


class EarlyStopping:
    """Never stop before min_epochs; afterwards stop once `patience` epochs pass without improvement.

    The stopping epoch is max(min_epochs, best_epoch + patience).  Epochs count from 1.
    """

    def __init__(self, min_epochs: int, patience: int, higher_is_better: bool = True):
        self.min_epochs = min_epochs
        self.patience = patience
        self.sign = 1.0 if higher_is_better else -1.0
        self.best_epoch = 0
        self.best_value = None

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's metric; True when it is a new best (strict improvement)."""
        if self.best_value is None or self.sign * (value - self.best_value) > 0:
            self.best_value = value
            self.best_epoch = epoch
            return True
        return False

    def stop_epoch(self) -> int:
        return max(self.min_epochs, self.best_epoch + self.patience)

    def should_stop(self, epoch: int) -> bool:
        return epoch >= self.stop_epoch()


def _check_finite(loss: float, phase: str, epoch: int, step: int) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite {phase} loss at epoch {epoch}, step {step}")


def _stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _trainable_snapshot(model: SACModel) -> dict:
    return {n: p.value.copy() for n, p in model.named_params() if p.trainable}


def _restore(model: SACModel, snap: dict) -> None:
    params = dict(model.named_params())
    for n, v in snap.items():
        params[n].value[...] = v


# ------------------------------------------------------------- generator

def probability_maps(model: SACModel, samples, batch_size: int = 16) -> list:
    out = []
    for start in range(0, len(samples), batch_size):
        logits, _ = model.generator.forward(_stack_images(samples[start:start + batch_size]))
        p = sigmoid(logits)
        out.extend(ProbabilityMap(pi[0], pi[1]) for pi in p)
    return out


def _generator_loss(model, samples):
    total = 0.0
    for start in range(0, len(samples), 16):
        chunk = samples[start:start + 16]
        logits, _ = model.generator.forward(_stack_images(chunk))
        t = np.stack([generator_targets(s.pos_target, s.neg_target) for s in chunk])
        total += bce_with_logits(logits, t)[0] * len(chunk)
    return total / len(samples)


def train_generator(model: SACModel, train, val, cfg: TrainConfig, rng: SplitMix64, log=None) -> list:
    """Fit the prompt generator on BCE against the positive/negative targets.

    Early stopping on validation loss; the best-validation weights are restored.
    Returns per-epoch rows {"epoch", "train_loss", "val_loss"}.
    """
    model.generator.set_trainable(True)
    opt = make_optimizer(cfg.optimizer, model.generator.params(), cfg.lr)
    stopper = EarlyStopping(cfg.gen_min_epochs, cfg.gen_patience, higher_is_better=False)
    best = _trainable_snapshot(model)
    history = []
    for epoch in range(1, cfg.gen_max_epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for step, start in enumerate(range(0, len(train), cfg.batch_size)):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            logits, cache = model.generator.forward(_stack_images(batch))
            t = np.stack([generator_targets(s.pos_target, s.neg_target) for s in batch])
            loss, dlogits = bce_with_logits(logits, t)
            _check_finite(loss, "generator", epoch, step)
            opt.zero_grad()
            model.generator.backward(cache, dlogits)
            opt.step()
            total += loss * len(batch)
        val_loss = _generator_loss(model, val)
        _check_finite(val_loss, "generator validation", epoch, 0)
        row = {"epoch": epoch, "train_loss": total / len(train), "val_loss": val_loss}
        history.append(row)
        if log:
            log(row)
        if stopper.update(epoch, val_loss):
            best = _trainable_snapshot(model)
        if stopper.should_stop(epoch):
            break
    _restore(model, best)
    model.generator.set_trainable(False)
    return history


# --------------------------------------------------------------- prompts

def prompts_for(prob: ProbabilityMap, sample, index: int, split: str, cfg: TrainConfig, *,
                points: int | None = None, select: str | None = None, experts: int = 0) -> PromptSet:
    """Auto points from the probability map plus ground-truth-derived expert points."""
    points = cfg.points if points is None else points
    select = cfg.select if select is None else select
    sid = SPLIT_IDS[split]
    auto = PromptSet([], "auto")
    if points > 0:
        auto = select_prompts(prob, select, points, tau=cfg.tau, tau_bin=cfg.tau_bin,
                              seed=derive_seed(cfg.seed, _RANDOM_STREAM, sid, index),
                              connectivity=cfg.connectivity)
    if experts > 0:
        exp = expert_prompts(sample.gt_mask, experts, derive_seed(cfg.seed, _EXPERT_STREAM, sid, index),
                             cfg.connectivity)
        auto = auto.merged(exp)
    return auto


def prompt_tokens(model: SACModel, prompts: PromptSet) -> np.ndarray:
    return encode_prompts(prompts, model.config.image_size, model.prompt_encoder).tokens


def split_prompt_tokens(model, samples, split, cfg, stage, **kw) -> list:
    points = kw.get("points", cfg.points)
    maps = probability_maps(model, samples) if points > 0 else [None] * len(samples)
    return [prompt_tokens(model, prompts_for(m, s, i, split, cfg, experts=cfg.experts_for(stage), **kw))
            for i, (m, s) in enumerate(zip(maps, samples))]


# ------------------------------------------------------------------- SAC

def _groups(tokens: list, idx) -> dict:
    """Batch positions grouped by prompt-token count (fixed iteration order)."""
    groups = {}
    for pos, i in enumerate(idx):
        groups.setdefault(tokens[i].shape[0], []).append(pos)
    return dict(sorted(groups.items()))


def predict_batch(model: SACModel, images: np.ndarray, tokens: list):
    """Mask logits (B×H×W) and scores (B) for a batch with per-image prompt tokens."""
    grid, _ = model.encoder.forward(images)
    logits = np.empty((len(images), model.config.image_size, model.config.image_size))
    scores = np.empty(len(images))
    for _, pos in _groups(tokens, range(len(images))).items():
        lg, sc, _ = model.decoder.forward(grid[pos], np.stack([tokens[p] for p in pos]))
        logits[pos], scores[pos] = lg, sc
    return logits, scores


def dataset_dice(model, samples, tokens, batch_size: int = 16) -> float:
    reports = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        logits, _ = predict_batch(model, _stack_images(chunk), tokens[start:start + batch_size])
        reports += [compute_metrics((lg >= 0).astype(np.uint8), s.gt_mask) for lg, s in zip(logits, chunk)]
    return mean_metrics(reports).dice


def _sac_step(model, batch, tokens, loss_cfg, gen_cache=None):
    """Forward + backward for one batch; returns the mean loss (grads accumulated)."""
    b = len(batch)
    images = _stack_images(batch)
    grid, enc_cache = model.encoder.forward(images)
    dgrid = np.zeros_like(grid)
    total = 0.0
    for _, pos in _groups(tokens, range(b)).items():
        lg, sc, cache = model.decoder.forward(grid[pos], np.stack([tokens[p] for p in pos]))
        dlg = np.empty_like(lg)
        dsc = np.empty_like(sc)
        for j, p in enumerate(pos):
            loss, dl, ds = segmentation_loss_and_grad(lg[j], sc[j], batch[p].gt_mask, loss_cfg)
            total += loss
            dlg[j], dsc[j] = dl / b, ds / b
        dimg, _ = model.decoder.backward(cache, dlg, dsc)
        dgrid[pos] = dimg
    if any(p.trainable for p in model.encoder.params()):
        model.encoder.backward(enc_cache, dgrid)
    return total / b


def train_sac(model: SACModel, train, val, cfg: TrainConfig, rng: SplitMix64, log=None) -> tuple:
    """Fine-tune the trainable parameters on segmentation loss; early stop on validation Dice.

    Returns (history rows {"epoch", "train_loss", "val_dice"}, best_epoch, best_val_dice).
    """
    loss_cfg = cfg.loss_config()
    opt = make_optimizer(cfg.optimizer, model.params(), cfg.lr)
    stopper = EarlyStopping(cfg.min_epochs, cfg.patience, higher_is_better=True)
    joint = cfg.joint and cfg.points > 0

    def tokens_now(samples, split, stage):
        return split_prompt_tokens(model, samples, split, cfg, stage)

    train_tokens = tokens_now(train, "train", "train")
    val_tokens = tokens_now(val, "val", "infer")
    best = _trainable_snapshot(model)
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for step, start in enumerate(range(0, len(train), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = [train[i] for i in idx]
            opt.zero_grad()
            if joint:
                logits, gcache = model.generator.forward(_stack_images(batch))
                t = np.stack([generator_targets(s.pos_target, s.neg_target) for s in batch])
                gloss, dlog = bce_with_logits(logits, t)
                model.generator.backward(gcache, dlog)
                p = sigmoid(logits)
                toks = [prompt_tokens(model, prompts_for(ProbabilityMap(pi[0], pi[1]), train[i], i, "train", cfg,
                                                          experts=cfg.experts_for("train")))
                        for pi, i in zip(p, idx)]
            else:
                gloss = 0.0
                toks = [train_tokens[i] for i in idx]
            loss = _sac_step(model, batch, toks, loss_cfg) + gloss
            _check_finite(loss, "segmentation", epoch, step)
            opt.step()
            total += loss * len(batch)
        if joint:
            val_tokens = tokens_now(val, "val", "infer")
        val_dice = dataset_dice(model, val, val_tokens)
        _check_finite(val_dice, "validation", epoch, 0)
        row = {"epoch": epoch, "train_loss": total / len(train), "val_dice": val_dice}
        history.append(row)
        if log:
            log(row)
        if stopper.update(epoch, val_dice):
            best = _trainable_snapshot(model)
        if stopper.should_stop(epoch):
            break
    _restore(model, best)
    assert all(stopper.best_value >= r["val_dice"] for r in history)
    return history, stopper.best_epoch, stopper.best_value


# ------------------------------------------------------------- pipeline

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    sac_history: list
    generator_history: list
    pretrain_history: list
    audit: dict = field(default_factory=dict)


def prepare_model(model_cfg: ModelConfig, cfg: TrainConfig, train) -> tuple:
    """Fresh model with 'pretrained' frozen encoder base weights; returns (model, pretrain MSE history)."""
    model = SACModel(model_cfg, cfg.seed)
    hist = []
    if cfg.pretrain_epochs > 0:
        hist = pretrain_encoder(model.encoder, _stack_images(train), cfg.pretrain_epochs,
                                np.random.default_rng((cfg.seed, 1)), lr=cfg.lr, batch_size=cfg.batch_size)
    model.prompt_encoder.set_trainable(False)
    model.generator.set_trainable(False)
    return model, hist


def apply_policy(model: SACModel, cfg: TrainConfig) -> None:
    set_trainable_policy(model.encoder, MODES[cfg.mode])
    model.prompt_encoder.set_trainable(False)
    model.decoder.set_trainable(True)
    model.generator.set_trainable(cfg.joint and cfg.points > 0)


def audit_changes(before: dict, model: SACModel) -> dict:
    """Compare tensors against a snapshot: which changed, which are flagged trainable."""
    changed = sorted(n for n, p in model.named_params() if not np.array_equal(before[n], p.value))
    flagged = sorted(n for n, p in model.named_params() if p.trainable)
    return {"changed": changed, "trainable": flagged, "match": changed == flagged}


def run_training(model_cfg: ModelConfig, cfg: TrainConfig, splits: dict, log_generator=None,
                 log_sac=None) -> TrainResult:
    train, val = splits["train"], splits["val"]
    model, pre_hist = prepare_model(model_cfg, cfg, train)
    rng = SplitMix64(derive_seed(cfg.seed, _SHUFFLE_STREAM))
    gen_hist = []
    if cfg.points > 0 and not cfg.joint:
        gen_hist = train_generator(model, train, val, cfg, rng, log_generator)
    apply_policy(model, cfg)
    before = model.state()
    sac_hist, best_epoch, best_dice = train_sac(model, train, val, cfg, rng, log_sac)
    audit = audit_changes(before, model)
    config = {"model": model_cfg.as_dict(), "train": cfg.as_dict()}
    ckpt = model.to_checkpoint(config, best_epoch, best_dice, rng.state)
    return TrainResult(ckpt, sac_hist, gen_hist, pre_hist, audit)


# ------------------------------------------------------------ evaluation

@dataclass
class EvalResult:
    metrics: MetricReport
    per_image: list
    seconds_per_image: float
    select_seconds_per_image: float
    mean_prompts: float


def evaluate(model: SACModel, samples, cfg: TrainConfig, split: str = "test", *, points: int | None = None,
             select: str | None = None, experts: int | None = None) -> EvalResult:
    """Per-image pipeline (generator, selection, prompt encoding, encoder, decoder), timed.

    The timing covers the whole per-image path; the selection time covers
    only turning the probability map into prompts.
    """
    points = cfg.points if points is None else points
    select = cfg.select if select is None else select
    experts = cfg.experts_for("infer") if experts is None else experts
    reports, elapsed, sel_elapsed, n_prompts = [], 0.0, 0.0, 0
    for i, s in enumerate(samples):
        t0 = time.perf_counter()
        prob = probability_maps(model, [s])[0] if points > 0 else None
        t1 = time.perf_counter()
        prompts = prompts_for(prob, s, i, split, cfg, points=points, select=select, experts=experts)
        t2 = time.perf_counter()
        tokens = prompt_tokens(model, prompts)
        logits, _ = predict_batch(model, s.image[None], [tokens])
        t3 = time.perf_counter()
        elapsed += t3 - t0
        sel_elapsed += t2 - t1
        n_prompts += len(prompts)
        reports.append(compute_metrics((logits[0] >= 0).astype(np.uint8), s.gt_mask))
    n = len(samples)
    return EvalResult(mean_metrics(reports), reports, elapsed / n, sel_elapsed / n, n_prompts / n)
