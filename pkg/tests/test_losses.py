import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anycell.errors import ConfigError, DimensionError, ValidationError
from anycell.losses import (LossConfig, MetricReport, bce_and_grad, compute_metrics, confusion_counts,
                            dice_ce_loss, dice_ce_loss_and_grad, dice_loss, dice_loss_and_grad, focal_loss,
                            focal_loss_and_grad, mean_metrics, segmentation_loss_and_grad, soft_iou_target)

from conftest import GRAD_TOL, SEEDS, input_fd, rel_error

PLAIN = LossConfig(alpha_t=None, gamma=0.0)


def probs_and_target(rng, shape=(6, 6)):
    return rng.uniform(0.02, 0.98, size=shape), (rng.random(shape) < 0.5).astype(float)


# --------------------------------------------------------------- focal

def test_focal_reduces_to_cross_entropy():
    rng = np.random.default_rng(0)
    p, g = probs_and_target(rng)
    ce = -np.mean(g * np.log(p) + (1 - g) * np.log(1 - p))
    assert abs(focal_loss(p, g, PLAIN) - ce) < 1e-12
    assert abs(focal_loss(p, g, PLAIN) - bce_and_grad(p, g)[0]) < 1e-12


def test_focal_scalar_example():
    cfg = LossConfig(alpha_t=None, gamma=2.0)
    assert focal_loss(np.array([0.5]), np.array([1.0]), cfg) == pytest.approx(0.25 * math.log(2), abs=1e-15)
    assert abs(0.25 * math.log(2) - 0.1733) < 1e-4


def test_focal_alpha_weighting():
    cfg = LossConfig(alpha_t=0.25, gamma=2.0)
    pos = focal_loss(np.array([0.5]), np.array([1.0]), cfg)
    neg = focal_loss(np.array([0.5]), np.array([0.0]), cfg)
    assert pos == pytest.approx(0.25 * 0.25 * math.log(2))
    assert neg == pytest.approx(0.75 * 0.25 * math.log(2))


def test_focal_decreases_to_zero():
    pts = np.linspace(0.5, 0.999999, 200)
    vals = [focal_loss(np.array([q]), np.array([1.0])) for q in pts]
    assert np.all(np.diff(vals) < 0) and vals[-1] < 1e-12


def test_focal_matches_scalar_loop():
    rng = np.random.default_rng(1)
    p, g = probs_and_target(rng, (20,))
    cfg = LossConfig()
    total = 0.0
    for pi, gi in zip(p, g):
        pt = pi if gi else 1 - pi
        a = cfg.alpha_t if gi else 1 - cfg.alpha_t
        total += -a * (1 - pt) ** cfg.gamma * math.log(pt)
    assert abs(focal_loss(p, g, cfg) - total / len(p)) < 1e-10


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(gamma=-1)
    with pytest.raises(ConfigError):
        LossConfig(ce_term="half")
    with pytest.raises(DimensionError):
        focal_loss(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------- dice

def test_dice_examples():
    g = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert dice_loss(g, g) < 1e-6
    assert dice_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(1.0, abs=1e-6)
    assert dice_loss(np.zeros(4), np.zeros(4)) == 0.0


def test_dice_matches_scalar_loop():
    rng = np.random.default_rng(2)
    p, g = probs_and_target(rng, (30,))
    num = den = 0.0
    for pi, gi in zip(p, g):
        num += pi * gi
        den += pi * pi + gi * gi
    assert abs(dice_loss(p, g) - (1 - (2 * num + 1e-6) / (den + 1e-6))) < 1e-10


def test_dice_ce_examples():
    g = np.array([1.0, 0.0, 1.0, 0.0])
    p = np.full(4, 0.5)
    assert dice_ce_loss(p, g) == pytest.approx(dice_loss(p, g) + math.log(2), abs=1e-12)
    sat = np.where(g > 0, 1 - 1e-9, 1e-9)
    assert dice_ce_loss(sat, g) < 1e-5


def test_onesided_ce_ignores_background():
    g = np.array([1.0, 0.0])
    a = bce_and_grad(np.array([0.5, 0.1]), g, ce_term="onesided")[0]
    b = bce_and_grad(np.array([0.5, 0.9]), g, ce_term="onesided")[0]
    assert a == b == pytest.approx(math.log(2) / 2)


# ----------------------------------------------------------- gradients

@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", ["focal", "dice", "bce", "bce_onesided", "dice_ce"])
def test_loss_gradients(seed, name):
    rng = np.random.default_rng(seed)
    p, g = probs_and_target(rng)
    fn = {
        "focal": lambda v: focal_loss_and_grad(v, g),
        "dice": lambda v: dice_loss_and_grad(v, g),
        "bce": lambda v: bce_and_grad(v, g),
        "bce_onesided": lambda v: bce_and_grad(v, g, ce_term="onesided"),
        "dice_ce": lambda v: dice_ce_loss_and_grad(v, g),
    }[name]
    assert rel_error(fn(p)[1], input_fd(lambda v: fn(v)[0], p, 1e-6)) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_segmentation_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(8, 8))
    g = (rng.random((8, 8)) < 0.5).astype(float)
    loss, dlogits, dscore = segmentation_loss_and_grad(logits, 0.4, g)
    assert rel_error(dlogits, input_fd(lambda v: segmentation_loss_and_grad(v, 0.4, g)[0], logits)) < GRAD_TOL
    target = soft_iou_target(logits, g)
    assert dscore == pytest.approx(2 * (0.4 - target))


# -------------------------------------------------------------- metrics

def test_metric_examples():
    gt = np.zeros((4, 4), int)
    gt[0, :] = 1
    assert compute_metrics(gt, gt) == MetricReport(1.0, 1.0, 1.0)
    pred = np.zeros((4, 4), int)
    pred[0, :2] = pred[1, :2] = 1
    m = compute_metrics(pred, gt)
    assert (m.dice, m.f1) == (0.5, 0.5) and m.iou == pytest.approx(1 / 3, abs=1e-15)
    far = np.zeros((4, 4), int)
    far[3, :] = 1
    assert compute_metrics(far, gt) == MetricReport(0.0, 0.0, 0.0)
    assert compute_metrics(np.zeros((2, 2)), np.zeros((2, 2))) == MetricReport(1.0, 1.0, 1.0)


def test_f1_equals_dice_on_random_pairs():
    rng = np.random.default_rng(3)
    for _ in range(500):
        a = rng.random((16, 16)) < rng.random()
        b = rng.random((16, 16)) < rng.random()
        m = compute_metrics(a, b)
        assert abs(m.f1 - m.dice) < 1e-12
        assert m.iou <= m.dice + 1e-15


@given(st.lists(st.booleans(), min_size=1, max_size=64), st.lists(st.booleans(), min_size=1, max_size=64))
def test_counts_partition(a, b):
    n = min(len(a), len(b))
    pa, pb = np.array(a[:n]), np.array(b[:n])
    tp, fp, fn = confusion_counts(pa, pb)
    assert tp + fp == pa.sum() and tp + fn == pb.sum()


def test_metric_errors_and_json():
    with pytest.raises(ValidationError):
        compute_metrics(np.full((2, 2), 0.5), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        compute_metrics(np.zeros((2, 2)), np.zeros((3, 3)))
    r = MetricReport(0.5, 1 / 3, 0.5)
    assert r.to_json() == '{"f1": 0.500000, "iou": 0.333333, "dice": 0.500000}'
    assert MetricReport.from_json(r.to_json()).iou == pytest.approx(1 / 3, abs=1e-6)
    assert mean_metrics([MetricReport(1, 1, 1), MetricReport(0, 0, 0)]) == MetricReport(0.5, 0.5, 0.5)
    with pytest.raises(ValidationError):
        mean_metrics([])


def test_degenerate_weights_give_focal_alone():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(6, 6))
    g = (rng.random((6, 6)) < 0.5).astype(float)
    from anycell.numerics import sigmoid
    cfg = LossConfig(focal_weight=1.0, dice_weight=0.0, score_weight=0.0)
    assert segmentation_loss_and_grad(logits, 0.9, g, cfg)[0] == focal_loss(sigmoid(logits), g, cfg)


@given(st.integers(0, 10_000))
def test_dice_ce_at_least_dice(seed):
    rng = np.random.default_rng(seed)
    p, g = probs_and_target(rng, (5, 5))
    assert dice_ce_loss(p, g) >= dice_loss(p, g)
