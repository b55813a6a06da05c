"""Command-line entry point: data generation, training, prediction, evaluation and reports.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import (BlobConfig, SyntheticSample, generate_dataset, load_dataset, load_split, prompt_targets,
                      save_dataset, split)
from .errors import ConfigError, FormatError, TrainingError, ValidationError
from .lora import count_adapter_params, count_params
from .model import ModelConfig, model_from_checkpoint
from .pnm import read_pgm, write_pgm, write_ppm
from .selection import POSITIVE, read_prompts_csv, write_prompts_csv
from .trainer import (EXPERTS_AT, MODES, SELECTORS, TrainConfig, evaluate, predict_batch, probability_maps,
                      prompt_tokens, prompts_for, run_training)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
CHECKPOINT_NAME = "checkpoint.sack"
POSITIVE_RGB = (0, 0, 255)
NEGATIVE_RGB = (255, 105, 180)
BOUNDARY_RGB = (0, 255, 0)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# ------------------------------------------------------------- utilities

def git_blob_sha1(data: bytes) -> str:
    """Content hash as `git hash-object` computes it."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: dict, outputs: list,
                   checkpoint: Path | None = None) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "checkpoint_sha1": git_blob_sha1(checkpoint.read_bytes()) if checkpoint else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=False) + "\n" for r in rows)


def read_config_file(path) -> dict:
    """`key = value` lines; '#' starts a comment; keys may use dashes or underscores."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _range_pair(text: str) -> tuple:
    vals = _int_list(text)
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {text!r}")
    return vals[0], vals[1]


def _load_checkpoint_model(path):
    ckpt = load_checkpoint(path)
    model = model_from_checkpoint(ckpt)
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    return ckpt, model, cfg


# -------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    lo, hi = args.blobs
    cfg = BlobConfig(min_blobs=lo, max_blobs=hi, noise=args.noise, size=args.size)
    data = generate_dataset(args.n, args.seed, cfg)
    parts = split(data, seed=args.seed)
    out = _out_dir(args.out)
    manifest = save_dataset(out, parts, args.seed, cfg)
    write_manifest(out, "gen-data", args, {}, ["dataset.json", "train/", "val/", "test/"])
    c = manifest["counts"]
    print(f"wrote {c['train']}/{c['val']}/{c['test']} train/val/test tiles to {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    keys = set(TrainConfig.__dataclass_fields__)
    return TrainConfig(**{k: v for k, v in vars(args).items() if k in keys})


def cmd_train(args) -> int:
    from .plotting import plot_convergence

    cfg = _train_config(args)
    data = Path(args.data)
    if not (data / "dataset.json").is_file():
        raise ConfigError(f"dataset not found at {data}")
    splits = load_dataset(data)
    out = _out_dir(args.out)
    log_path = out / "train_log.jsonl"
    gen_path = out / "generator_log.jsonl"
    log_path.write_text("")
    gen_path.write_text("")

    def appender(path):
        def log(row):
            with open(path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
            if not args.quiet:
                print(json.dumps(row), flush=True)
        return log

    result = run_training(ModelConfig(), cfg, splits, appender(gen_path), appender(log_path))
    ckpt_path = out / CHECKPOINT_NAME
    save_checkpoint(result.checkpoint, ckpt_path)
    (out / "audit.json").write_text(json.dumps(result.audit, indent=2) + "\n")
    (out / "pretrain_log.jsonl").write_text(_jsonl({"epoch": i + 1, "mse": v}
                                                   for i, v in enumerate(result.pretrain_history)))
    plot_convergence(result.sac_history, result.generator_history, out / "convergence.png")
    write_manifest(out, "train", args, {"data": data},
                   [CHECKPOINT_NAME, "train_log.jsonl", "generator_log.jsonl", "pretrain_log.jsonl",
                    "audit.json", "convergence.png"], ckpt_path)
    print(f"best epoch {result.checkpoint.epoch}, val dice {result.checkpoint.best_val_dice:.6f}; "
          f"checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    _, model, cfg = _load_checkpoint_model(args.ckpt)
    raw = read_pgm(args.image)
    size = model.config.image_size
    if raw.shape != (size, size):
        raise ValidationError(f"image must be {size}×{size}, got {raw.shape[1]}×{raw.shape[0]}")
    maxval = 65535.0 if raw.dtype == np.uint16 else 255.0
    image = (raw.astype(np.float64) / maxval)[None]
    out = _out_dir(args.out)
    outputs = ["mask.pgm", "score.json"]
    if args.prompts == "auto":
        blank = np.zeros((size, size), dtype=np.uint8)
        sample = SyntheticSample(image, blank, *prompt_targets(blank))
        prob = probability_maps(model, [sample])[0] if cfg.points > 0 else None
        prompts = prompts_for(prob, sample, 0, "predict", cfg, experts=0)
        write_prompts_csv(out / "prompts.csv", prompts)
        outputs.append("prompts.csv")
    else:
        prompts = read_prompts_csv(args.prompts)
    tokens = prompt_tokens(model, prompts)
    logits, scores = predict_batch(model, image[None], [tokens])
    write_pgm(out / "mask.pgm", ((logits[0] >= 0) * 255).astype(np.uint8))
    (out / "score.json").write_text(json.dumps({"score": round(float(scores[0]), 6),
                                                "prompts": len(prompts)}) + "\n")
    write_manifest(out, "predict", args, {"ckpt": args.ckpt, "image": args.image}, outputs, Path(args.ckpt))
    print(f"score {scores[0]:.6f}, {len(prompts)} prompts -> {out / 'mask.pgm'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _, model, cfg = _load_checkpoint_model(args.ckpt)
    samples = load_split(args.data, args.split)
    res = evaluate(model, samples, cfg, args.split)
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(res.metrics.to_json() + "\n")
    write_manifest(out, "evaluate", args, {"ckpt": args.ckpt, "data": args.data}, ["metrics.json"],
                   Path(args.ckpt))
    print(res.metrics.to_json())
    return EXIT_OK


ABLATION_FIELDS = ("method", "select", "points", "dice", "iou", "f1", "seconds_per_image",
                   "select_seconds_per_image", "mean_prompts")


def cmd_ablate_selection(args) -> int:
    from .plotting import plot_ablation

    _, model, cfg = _load_checkpoint_model(args.ckpt)
    samples = load_split(args.data, args.split)
    rows = []
    for select, tag in (("centroid", "O"), ("random", "R")):
        for k in args.points:
            res = evaluate(model, samples, cfg, args.split, points=k, select=select)
            rows.append({"method": f"{tag}-{k}-point", "select": select, "points": k,
                         "dice": round(res.metrics.dice, 6), "iou": round(res.metrics.iou, 6),
                         "f1": round(res.metrics.f1, 6),
                         "seconds_per_image": round(res.seconds_per_image, 6),
                         "select_seconds_per_image": round(res.select_seconds_per_image, 6),
                         "mean_prompts": round(res.mean_prompts, 3)})
    out = _out_dir(args.out)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / "ablation.csv").write_text(buf.getvalue())
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    plot_ablation(rows, out / "ablation.png")
    write_manifest(out, "ablate-selection", args, {"ckpt": args.ckpt, "data": args.data},
                   ["ablation.csv", "ablation.json", "ablation.png"], Path(args.ckpt))
    print(buf.getvalue(), end="")
    return EXIT_OK


def param_report(model) -> list:
    """Rows {component, trainable, frozen, total} in the style of a parameter-count table."""
    rows = []
    adapters = count_adapter_params(model.encoder.attention_layers())
    ad_ids = {id(p) for p in model.encoder.adapter_params()}
    parts = [
        ("LoRA adapters (Q, V)", model.encoder.adapter_params()),
        ("image encoder base", [p for p in model.encoder.params() if id(p) not in ad_ids]),
        ("prompt encoder", model.prompt_encoder.params()),
        ("mask decoder", model.decoder.params()),
        ("prompt generator", model.generator.params()),
    ]
    total = None
    for name, params in parts:
        c = count_params(params)
        total = c if total is None else total + c
        rows.append({"component": name, **c.as_dict()})
    rows.append({"component": "all", **total.as_dict()})
    rows.append({"component": "attention layers (adapters + bases)", **adapters})
    return rows


def cmd_count_params(args) -> int:
    _, model, _ = _load_checkpoint_model(args.ckpt)
    rows = param_report(model)
    width = max(len(r["component"]) for r in rows)
    print(f"{'component':<{width}}  {'Trainable':>10}  {'Freeze':>10}  {'Total':>10}")
    for r in rows:
        print(f"{r['component']:<{width}}  {r['trainable']:>10,}  {r['frozen']:>10,}  {r['total']:>10,}")
    if args.out:
        out = _out_dir(args.out)
        (out / "params.json").write_text(json.dumps(rows, indent=2) + "\n")
        write_manifest(out, "count-params", args, {"ckpt": args.ckpt}, ["params.json"], Path(args.ckpt))
    return EXIT_OK


def render_overlay(image: np.ndarray, mask: np.ndarray | None, prompts) -> np.ndarray:
    """Greyscale image as RGB with the mask boundary and 3×3 prompt dots painted on."""
    grey = image.astype(np.float64)
    grey = grey / (65535.0 if image.dtype == np.uint16 else 255.0)
    rgb = np.repeat(np.round(grey * 255.0).astype(np.uint8)[..., None], 3, axis=2)
    h, w = grey.shape
    if mask is not None:
        m = mask > 0
        if m.shape != (h, w):
            raise ValidationError(f"mask {m.shape} does not match image {(h, w)}")
        p = np.pad(m, 1, constant_values=False)
        interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
        rgb[m & ~interior] = BOUNDARY_RGB
    for pr in prompts:
        if not (0 <= pr.x < w and 0 <= pr.y < h):
            raise ValidationError(f"prompt {pr} lies outside the {w}×{h} image")
        colour = POSITIVE_RGB if pr.label == POSITIVE else NEGATIVE_RGB
        rgb[max(pr.y - 1, 0):pr.y + 2, max(pr.x - 1, 0):pr.x + 2] = colour
    return rgb


def cmd_overlay(args) -> int:
    image = read_pgm(args.image)
    mask = read_pgm(args.mask) if args.mask else None
    prompts = read_prompts_csv(args.prompts) if args.prompts else []
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, render_overlay(image, mask, prompts))
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anycell", description="Prompt-free nucleus segmentation with low-rank adapters.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--blobs", type=_range_pair, default=(3, 7), help="MIN,MAX blobs per tile")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    d = TrainConfig()
    t = sub.add_parser("train", help="train generator and fine-tune the segmenter")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=sorted(MODES), default=d.mode)
    t.add_argument("--points", type=int, default=d.points)
    t.add_argument("--experts", type=int, default=d.experts)
    t.add_argument("--select", choices=SELECTORS, default=d.select)
    t.add_argument("--seed", type=int, default=d.seed)
    t.add_argument("--joint", action="store_true", help="co-train the prompt generator")
    t.add_argument("--experts-at", choices=EXPERTS_AT, default=d.experts_at)
    t.add_argument("--quiet", action="store_true")
    for name in ("min_epochs", "patience", "max_epochs", "gen_min_epochs", "gen_patience", "gen_max_epochs",
                 "batch_size", "pretrain_epochs", "connectivity"):
        t.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(d, name))
    for name in ("lr", "tau", "tau_bin", "alpha_t", "gamma", "focal_weight", "dice_weight", "score_weight"):
        t.add_argument("--" + name.replace("_", "-"), type=float, default=getattr(d, name))
    t.add_argument("--optimizer", choices=("adam", "sgd"), default=d.optimizer)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="segment one PGM image")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--prompts", default="auto", help="'auto' or a prompt CSV (x,y,label)")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="metrics JSON on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate-selection", help="centroid vs random selection table with timing")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--points", type=_int_list, default=[1, 3, 256])
    a.add_argument("--split", choices=("train", "val", "test"), default="test")
    a.set_defaults(func=cmd_ablate_selection)

    c = sub.add_parser("count-params", help="trainable / frozen parameter counts")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_count_params)

    o = sub.add_parser("overlay", help="PPM with mask boundary and prompt dots")
    o.add_argument("--image", required=True)
    o.add_argument("--mask")
    o.add_argument("--prompts")
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_overlay)

    for sp in sub.choices.values():
        sp.add_argument("--config", help="file of 'key = value' lines; flags override it")
    return p


def _config_path(argv: list):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(parser: argparse.ArgumentParser, argv: list) -> argparse.Namespace:
    """Parse argv, using a --config file's values as defaults that flags override."""
    path = _config_path(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if path is None or command not in subparsers:
        return parser.parse_args(argv)
    sub = subparsers[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in read_config_file(path).items():
        if key not in actions or key in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for {command}")
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            defaults[key] = _parse_bool(value)
            continue
        if act.choices is not None and value not in act.choices:
            raise ConfigError(f"config key {key}: {value!r} not in {sorted(act.choices)}")
        defaults[key] = value  # argparse converts string defaults with the action's type
        act.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parse_args(parser, argv)
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValidationError, FormatError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
