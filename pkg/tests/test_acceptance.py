"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) and then
asserts, so a failing criterion is both reported and red.  The two seeded
pipeline runs are shared through a module fixture and take several minutes.
"""

import json
import time

import numpy as np
import pytest

from anycell import cli
from anycell.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint
from anycell.datagen import load_dataset
from anycell.decoder import MaskDecoder
from anycell.errors import FormatError
from anycell.generator import DoubleConv, bce_with_logits
from anycell.lora import AdaptedAttention, LoRAAdapter, adapted_project, adapted_project_backward, merge
from anycell.losses import (bce_and_grad, compute_metrics, dice_ce_loss_and_grad, dice_loss_and_grad,
                            focal_loss, focal_loss_and_grad, LossConfig)
from anycell.model import ModelConfig, SACModel, model_from_checkpoint
from anycell.numerics import (Param, conv2d, conv2d_backward, finite_difference_grad, matmul, matmul_backward,
                              rel_error, sigmoid, softmax_rows)
from anycell.selection import POSITIVE, connected_regions, random_select, region_centroid
from anycell.generator import ProbabilityMap
from anycell.trainer import TrainConfig, prepare_model

from conftest import ACCEPTANCE_LINES, param_fd, randomize_vectors
from test_selection import flood_fill_oracle

SEED = 7
N_IMAGES = 200
SAC_FLAGS = ["--mode", "sac", "--select", "centroid", "--points", "3", "--max-epochs", "30"]
FROZEN_FLAGS = ["--mode", "frozen", "--points", "0", "--max-epochs", "30"]
COMPARED = ("checkpoint.sack", "train_log.jsonl", "generator_log.jsonl", "pretrain_log.jsonl", "audit.json")


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def _run(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"{argv[0]} exited {code}"


def _pipeline(root, full: bool) -> dict:
    t0 = time.perf_counter()
    data = root / "data"
    _run("gen-data", "--out", data, "--n", N_IMAGES, "--seed", SEED)
    _run("train", "--data", data, "--out", root / "sac", "--seed", SEED, "--quiet", *SAC_FLAGS)
    _run("evaluate", "--ckpt", root / "sac" / "checkpoint.sack", "--data", data, "--out", root / "sac_eval")
    if full:
        _run("train", "--data", data, "--out", root / "frozen", "--seed", SEED, "--quiet", *FROZEN_FLAGS)
        _run("evaluate", "--ckpt", root / "frozen" / "checkpoint.sack", "--data", data,
             "--out", root / "frozen_eval")
        _run("ablate-selection", "--ckpt", root / "sac" / "checkpoint.sack", "--data", data,
             "--points", "3,256", "--out", root / "ablation")
    return {"root": root, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    first = _pipeline(tmp_path_factory.mktemp("run_a"), full=True)
    second = _pipeline(tmp_path_factory.mktemp("run_b"), full=False)
    return first, second


# ------------------------------------------------------------ criterion 1

def _grad_cases(rng):
    """(name, analytic gradient, numeric gradient) for every differentiable op."""
    a, b, r = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    da, db = matmul_backward(a, b, r)
    yield "matmul", da, finite_difference_grad(lambda v: np.sum(matmul(v, b) * r), a)
    yield "matmul.b", db, finite_difference_grad(lambda v: np.sum(matmul(a, v) * r), b)

    x, w, r = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(1, 3, 5, 5))
    dx, dw, _ = conv2d_backward(x, w, r, stride=1, pad=1)
    yield "conv2d", dw, finite_difference_grad(lambda v: np.sum(conv2d(x, v, stride=1, pad=1) * r), w)
    yield "conv2d.x", dx, finite_difference_grad(lambda v: np.sum(conv2d(v, w, stride=1, pad=1) * r), x)

    z, r = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    s = sigmoid(z)
    yield "sigmoid", r * s * (1 - s), finite_difference_grad(lambda v: np.sum(sigmoid(v) * r), z)
    p = softmax_rows(z)
    yield ("softmax", p * (r - np.sum(r * p, axis=1, keepdims=True)),
           finite_difference_grad(lambda v: np.sum(softmax_rows(v) * r), z))

    base = Param(rng.normal(size=(5, 5)), trainable=False)
    ad = LoRAAdapter(rng.normal(size=(2, 5)), rng.normal(size=(5, 2)))
    x, r = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    adapted_project_backward(x, base, ad, r)
    yield "lora.A", ad.A.grad, param_fd(lambda: np.sum(adapted_project(x, base, ad) * r), ad.A)

    att = AdaptedAttention.init(rng, 4, 2, 2)
    att.adapter_q.B.value[...] = rng.normal(0, 0.5, att.adapter_q.B.shape)
    x, r = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, cache = att.forward(x)
    att.backward(cache, r)
    yield "attention", att.adapter_q.A.grad, param_fd(lambda: np.sum(att.forward(x)[0] * r), att.adapter_q.A)

    blk = DoubleConv.init(rng, 2, 3)
    randomize_vectors(blk, rng)
    x, r = rng.normal(size=(1, 5, 5, 2)), rng.normal(size=(1, 5, 5, 3))
    _, cache = blk.forward(x)
    blk.backward(cache, r)
    yield "unet block", blk.a.kernel.grad, param_fd(lambda: np.sum(blk.forward(x)[0] * r), blk.a.kernel)

    dec = MaskDecoder(rng, d=16, heads=2, grid=2, image_size=16, depth=1)
    randomize_vectors(dec, rng)
    img, prm = rng.normal(size=(1, 16, 2, 2)), rng.normal(size=(1, 2, 16))
    g = (rng.random((1, 16, 16)) < 0.4).astype(float)

    def dec_loss():
        logits, score, _ = dec.forward(img, prm)
        q = sigmoid(logits)
        return 20 * focal_loss(q, g) + dice_loss_and_grad(q, g)[0] + np.sum(score ** 2)

    logits, score, cache = dec.forward(img, prm)
    q = sigmoid(logits)
    dq = 20 * focal_loss_and_grad(q, g)[1] + dice_loss_and_grad(q, g)[1]
    dec.backward(cache, dq * q * (1 - q), 2 * score)
    yield "decoder", dec.hyper.fc2.weight.grad, param_fd(dec_loss, dec.hyper.fc2.weight)

    pr, gt = rng.uniform(0.05, 0.95, size=(4, 4)), (rng.random((4, 4)) < 0.5).astype(float)
    for name, fn in (("focal", lambda v: focal_loss_and_grad(v, gt)), ("dice", lambda v: dice_loss_and_grad(v, gt)),
                     ("bce", lambda v: bce_and_grad(v, gt)), ("dice_ce", lambda v: dice_ce_loss_and_grad(v, gt))):
        yield name, fn(pr)[1], finite_difference_grad(lambda v: fn(v)[0], pr, 1e-6)
    m = rng.normal(size=(2, 4, 4))
    t = (rng.random(m.shape) < 0.5).astype(float)
    yield "generator bce", bce_with_logits(m, t)[1], finite_difference_grad(lambda v: bce_with_logits(v, t)[0], m)


def test_criterion_1_gradient_oracles():
    t0 = time.perf_counter()
    worst, worst_name, count = 0.0, "", 0
    for seed in range(10):
        for name, analytic, numeric in _grad_cases(np.random.default_rng([seed, 2 ** 63 + seed])):
            err = rel_error(analytic, numeric)
            count += 1
            if err > worst:
                worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    record(1, worst < 1e-4 and elapsed < 120,
           f"{count} gradient checks, worst rel. error {worst:.2e} ({worst_name}), {elapsed:.1f} s")


# ------------------------------------------------------------ criterion 2

def test_criterion_2_low_rank_update():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    base = Param(rng.normal(size=(64, 64)), trainable=False)
    zero = LoRAAdapter.init(rng, 64, 4)
    x = rng.normal(size=(10, 64))
    bitwise = np.array_equal(adapted_project(x, base, zero), x @ base.value.T)
    ad = LoRAAdapter(rng.normal(size=(4, 64)), rng.normal(size=(64, 4)))
    merge_err = float(np.max(np.abs(adapted_project(x, base, ad) - x @ merge(base, ad).T)))
    layer = AdaptedAttention.init(rng, 64, 4, 4)
    no_k = not any("adapter_k" in n for n, _ in layer.named_params())
    _, cache = layer.forward(rng.normal(size=(6, 64)))
    layer.backward(cache, rng.normal(size=(6, 64)))
    k_frozen = not layer.Wk.trainable and not layer.Wk.grad.any()
    counts = [sum(p.size for p in AdaptedAttention.init(rng, d, h, r).adapter_params()) == 2 * (2 * r * d)
              for d, h, r in ((64, 4, 4), (16, 2, 1), (32, 4, 8), (1, 1, 1))]
    elapsed = time.perf_counter() - t0
    ok = bitwise and merge_err < 1e-9 and no_k and k_frozen and all(counts) and elapsed < 10
    record(2, ok, f"zero-init bitwise={bitwise}, merge err {merge_err:.1e}, no K adapter={no_k}, "
                  f"K frozen={k_frozen}, counts exact={all(counts)}, {elapsed:.1f} s")


# ------------------------------------------------------------ criterion 3

def test_criterion_3_selection_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    same = inside = True
    for _ in range(100):
        P = ProbabilityMap(rng.random((16, 16)), rng.random((16, 16)))
        regions = connected_regions(P, 0.5)
        for label, chan in ((POSITIVE, P.P_pos), (1 - POSITIVE, P.P_neg)):
            got = {r.pixels for r in regions if r.label == label}
            same &= got == set(flood_fill_oracle(chan >= 0.5))
        inside &= all(region_centroid(r) in r.pixels for r in regions)
    P = ProbabilityMap(rng.random((64, 64)), rng.random((64, 64)))
    deterministic = all(random_select(P, 0.5, 128, 128, s) == random_select(P, 0.5, 128, 128, s)
                        for s in range(20))
    elapsed = time.perf_counter() - t0
    record(3, same and inside and deterministic and elapsed < 30,
           f"oracle match={same}, centroids inside={inside}, random seed-deterministic={deterministic}, "
           f"{elapsed:.1f} s")


# ------------------------------------------------------------ criterion 4

def test_criterion_4_loss_metric_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    f1_dice = max(abs(m.f1 - m.dice) for m in (compute_metrics(rng.random((32, 32)) < rng.random(),
                                                                rng.random((32, 32)) < rng.random())
                                               for _ in range(500)))
    p = rng.uniform(0.01, 0.99, size=(16, 16))
    g = (rng.random((16, 16)) < 0.5).astype(float)
    ce = -np.mean(g * np.log(p) + (1 - g) * np.log(1 - p))
    focal_ce = abs(focal_loss(p, g, LossConfig(alpha_t=None, gamma=0.0)) - ce)
    pred, gt = np.zeros((4, 4)), np.zeros((4, 4))
    pred[0, :] = 1
    gt[0, :2] = gt[1, :2] = 1
    m = compute_metrics(pred, gt)
    case = m.dice == 0.5 and abs(m.iou - 1 / 3) < 1e-15
    elapsed = time.perf_counter() - t0
    record(4, f1_dice < 1e-12 and focal_ce < 1e-12 and case and elapsed < 10,
           f"max |F1-Dice| {f1_dice:.1e} over 500 pairs, |focal-CE| {focal_ce:.1e}, "
           f"2-of-4 case dice={m.dice} iou={m.iou:.6f}, {elapsed:.1f} s")


# ------------------------------------------------------------ criterion 5

def test_criterion_5_freeze_audit(runs):
    root = runs[0]["root"]
    audit = json.loads((root / "sac" / "audit.json").read_text())
    ckpt = load_checkpoint(root / "sac" / "checkpoint.sack")
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    splits = load_dataset(root / "data")
    reference, _ = prepare_model(ModelConfig.from_dict(ckpt.config["model"]), cfg, splits["train"])
    ref = dict(reference.named_params())
    ad_ids = {id(p) for p in reference.encoder.adapter_params()}
    frozen_names = [n for n, p in reference.encoder.named_params() if id(p) not in ad_ids]
    frozen_names = ["encoder." + n for n in frozen_names]
    frozen_names += ["prompt_encoder." + n for n, _ in reference.prompt_encoder.named_params()]
    unchanged = all(np.array_equal(ckpt.tensors[n], ref[n].value) for n in frozen_names)
    flags_frozen = not any(ckpt.trainable[n] for n in frozen_names)
    ok = audit["match"] and unchanged and flags_frozen
    record(5, ok, f"changed set == trainable set: {audit['match']} ({len(audit['changed'])} tensors); "
                  f"{len(frozen_names)} encoder base + prompt encoder tensors bitwise unchanged: {unchanged}")


# ------------------------------------------------------------ criterion 6

def test_criterion_6_end_to_end_trend(runs):
    root = runs[0]["root"]
    sac = json.loads((root / "sac_eval" / "metrics.json").read_text())
    frozen = json.loads((root / "frozen_eval" / "metrics.json").read_text())
    log = [json.loads(l) for l in (root / "sac" / "train_log.jsonl").read_text().splitlines()]
    rows = {r["method"]: r for r in json.loads((root / "ablation" / "ablation.json").read_text())}
    o, r = rows["O-256-point"], rows["R-256-point"]
    a = sac["dice"] >= 0.85 and len(log) <= 30
    b = sac["dice"] - frozen["dice"] >= 0.03
    c_dice = o["dice"] >= r["dice"] - 0.005
    c_time = o["select_seconds_per_image"] >= r["select_seconds_per_image"]
    fast = runs[0]["seconds"] < 15 * 60
    record(6, a and b and c_dice and c_time and fast,
           f"(a) SAC test dice {sac['dice']:.4f} after {len(log)} epochs; "
           f"(b) frozen baseline {frozen['dice']:.4f}, margin {sac['dice'] - frozen['dice']:.4f}; "
           f"(c) O-256 dice {o['dice']:.4f} vs R-256 {r['dice']:.4f}, selection "
           f"{o['select_seconds_per_image'] * 1e3:.2f} ms vs {r['select_seconds_per_image'] * 1e3:.2f} ms/image "
           f"(whole pipeline {o['seconds_per_image'] * 1e3:.1f} vs {r['seconds_per_image'] * 1e3:.1f} ms); "
           f"pipeline {runs[0]['seconds'] / 60:.1f} min")


# ------------------------------------------------------------ criterion 7

def test_criterion_7_determinism(runs):
    a, b = runs[0]["root"], runs[1]["root"]
    files = [f"sac/{n}" for n in COMPARED] + ["sac_eval/metrics.json"]
    differ = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    data_a = sorted(p.relative_to(a) for p in (a / "data").rglob("*.pgm"))
    data_same = all((a / p).read_bytes() == (b / p).read_bytes() for p in data_a)
    record(7, not differ and data_same,
           f"{len(files)} artifacts byte-identical across two runs: {not differ} {differ or ''}; "
           f"{len(data_a)} dataset files identical: {data_same}")


# ------------------------------------------------------------ criterion 8

def test_criterion_8_checkpoint_round_trip(runs):
    t0 = time.perf_counter()
    path = runs[0]["root"] / "sac" / "checkpoint.sack"
    data = path.read_bytes()
    ckpt = decode_checkpoint(data)
    model = model_from_checkpoint(ckpt)
    reencoded = encode_checkpoint(model.to_checkpoint(ckpt.config, ckpt.epoch, ckpt.best_val_dice,
                                                      ckpt.rng_state)) == data

    rng = np.random.default_rng(8)
    cfg = ModelConfig()
    fresh = SACModel(cfg, 8)
    for p in fresh.params():
        p.value[...] = p.value + rng.normal(0, 0.01, p.shape)
    blob = encode_checkpoint(fresh.to_checkpoint({"model": cfg.as_dict(), "train": {"seed": 8}}, 0, 0.0, 0))
    loaded = model_from_checkpoint(decode_checkpoint(blob))
    img = rng.random((2, 1, 64, 64))
    tokens = rng.normal(size=(2, 3, 64))

    def forward(m):
        grid, _ = m.encoder.forward(img)
        logits, score, _ = m.decoder.forward(grid, tokens)
        return logits, score, m.generator.forward(img)[0]

    bitwise = all(np.array_equal(x, y) for x, y in zip(forward(fresh), forward(loaded)))
    rejected = 0
    positions = rng.choice(len(data), 50, replace=False)
    for pos in positions:
        bad = bytearray(data)
        bad[pos] ^= 0xFF
        try:
            decode_checkpoint(bytes(bad))
        except FormatError:
            rejected += 1
    truncated = 0
    for n in (0, 8, len(data) // 3, len(data) - 1):
        try:
            decode_checkpoint(data[:n])
        except FormatError:
            truncated += 1
    elapsed = time.perf_counter() - t0
    ok = reencoded and bitwise and rejected == len(positions) and truncated == 4 and elapsed < 10
    record(8, ok, f"forward bitwise after round trip: {bitwise}; trained checkpoint re-encodes identically: "
                  f"{reencoded}; corrupted {rejected}/{len(positions)} and truncated {truncated}/4 rejected; "
                  f"{elapsed:.1f} s")
