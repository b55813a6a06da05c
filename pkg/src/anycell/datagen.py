"""Seeded synthetic 'nuclei' tiles: textured ellipses, some touching, on a noisy background."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .pnm import read_pgm, write_pgm
from .selection import label_components

MIN_COMPONENT_AREA = 4
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class BlobConfig:
    size: int = 64
    min_blobs: int = 3
    max_blobs: int = 7
    min_radius: float = 3.5
    max_radius: float = 8.0
    noise: float = 0.05
    cluster_prob: float = 0.35
    contrast: float = 0.45

    def __post_init__(self):
        if not 0 <= self.min_blobs <= self.max_blobs:
            raise ConfigError("blob count range must satisfy 0 <= min <= max")
        if not 0 < self.min_radius <= self.max_radius:
            raise ConfigError("radius range must satisfy 0 < min <= max")
        if self.noise < 0:
            raise ConfigError("noise level must be >= 0")
        if self.size < 8:
            raise ConfigError("tile size must be at least 8")


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def contains(self, x, y):
        """Pixel-centre test: ((x'/a)² + (y'/b)² <= 1) in the rotated frame."""
        dx, dy = x - self.cx, y - self.cy
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = (c * dx + s * dy) / self.a
        v = (-s * dx + c * dy) / self.b
        return u * u + v * v <= 1.0


@dataclass
class SyntheticSample:
    image: np.ndarray      # 1 × H × W in [0, 1]
    gt_mask: np.ndarray    # H × W uint8 {0, 1}
    pos_target: np.ndarray
    neg_target: np.ndarray
    blobs: list = field(default_factory=list)


def ellipse_mask(size: int, e: Ellipse) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return e.contains(xs, ys)


def erode(mask: np.ndarray, steps: int) -> np.ndarray:
    """Binary erosion by a 3×3 square, repeated; pixels outside the frame count as 0."""
    m = np.asarray(mask, dtype=bool)
    for _ in range(steps):
        p = np.pad(m, 1, constant_values=False)
        out = np.ones_like(m)
        h, w = m.shape
        for dy in range(3):
            for dx in range(3):
                out &= p[dy:dy + h, dx:dx + w]
        m = out
    return m


def prompt_targets(gt_mask: np.ndarray) -> tuple:
    """(positive, negative) generator targets: the mask itself and the background eroded by 2 px."""
    gt = np.asarray(gt_mask).astype(bool)
    return gt.astype(np.uint8), erode(~gt, 2).astype(np.uint8)


def _draw_blobs(rng: np.random.Generator, cfg: BlobConfig) -> list:
    k = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
    blobs = []
    margin = cfg.min_radius
    for _ in range(k):
        a = rng.uniform(cfg.min_radius, cfg.max_radius)
        b = rng.uniform(cfg.min_radius, min(a, cfg.max_radius))
        theta = rng.uniform(0.0, np.pi)
        if blobs and rng.random() < cfg.cluster_prob:
            # touching neighbour: centre roughly one combined radius from a previous blob
            nb = blobs[int(rng.integers(len(blobs)))]
            ang = rng.uniform(0.0, 2 * np.pi)
            dist = 0.85 * (max(nb.a, nb.b) + a)
            cx, cy = nb.cx + dist * np.cos(ang), nb.cy + dist * np.sin(ang)
        else:
            cx = rng.uniform(margin, cfg.size - 1 - margin)
            cy = rng.uniform(margin, cfg.size - 1 - margin)
        blobs.append(Ellipse(float(cx), float(cy), float(a), float(b), float(theta)))
    return blobs


def render_sample(rng: np.random.Generator, cfg: BlobConfig) -> SyntheticSample:
    n = cfg.size
    blobs = _draw_blobs(rng, cfg)
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)

    # background: dim with a slow linear gradient
    g_ang = rng.uniform(0.0, 2 * np.pi)
    ramp = (np.cos(g_ang) * xs + np.sin(g_ang) * ys) / n
    image = 0.2 + 0.08 * ramp

    owner = np.full((n, n), -1)
    for i, e in enumerate(blobs):
        owner[ellipse_mask(n, e)] = i
    mask = owner >= 0
    for comp in label_components(mask):
        if len(comp) < MIN_COMPONENT_AREA:
            cx, cy = np.array(comp).T
            mask[cy, cx] = False
    owner[~mask] = -1

    for i, e in enumerate(blobs):
        sel = owner == i
        if not sel.any():
            continue
        # intensity gradient across the blob plus a darker rim
        peak = 0.2 + cfg.contrast * rng.uniform(0.8, 1.2)
        ang = rng.uniform(0.0, 2 * np.pi)
        r = np.hypot(xs - e.cx, ys - e.cy) / max(e.a, e.b)
        shade = 0.12 * (np.cos(ang) * (xs - e.cx) + np.sin(ang) * (ys - e.cy)) / max(e.a, e.b)
        image[sel] = (peak + shade - 0.1 * r ** 2)[sel]

    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    gt = mask.astype(np.uint8)
    pos, neg = prompt_targets(gt)
    return SyntheticSample(image[None], gt, pos, neg, blobs)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, index))


def generate_sample(seed: int, index: int, cfg: BlobConfig = BlobConfig()) -> SyntheticSample:
    return render_sample(sample_rng(seed, index), cfg)


def generate_dataset(n: int, seed: int, cfg: BlobConfig = BlobConfig()) -> list:
    if n < 1:
        raise ValidationError(f"dataset size must be >= 1, got {n}")
    return [generate_sample(seed, i, cfg) for i in range(n)]


def split_sizes(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValidationError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    sizes = (n_train, n_val, n - n_train - n_val)
    if min(sizes) < 1:
        raise ValidationError(f"dataset of {n} samples is too small for non-empty splits {sizes}")
    return sizes


def split(dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple:
    """Seeded shuffle, then contiguous train / val / test slices."""
    n_train, n_val, _ = split_sizes(len(dataset), fractions)
    order = np.random.default_rng(seed).permutation(len(dataset))
    items = [dataset[i] for i in order]
    return items[:n_train], items[n_train:n_train + n_val], items[n_train + n_val:]


# ------------------------------------------------------------------ on disk

def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(root, splits, seed: int, cfg: BlobConfig) -> dict:
    root = Path(root)
    counts = {}
    for name, items in zip(SPLIT_NAMES, splits):
        (root / name / "images").mkdir(parents=True, exist_ok=True)
        (root / name / "masks").mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(items):
            write_pgm(root / name / "images" / f"{i:05d}.pgm", _to_u8(s.image[0]))
            write_pgm(root / name / "masks" / f"{i:05d}.pgm", s.gt_mask.astype(np.uint8) * 255)
        counts[name] = len(items)
    manifest = {"seed": seed, "config": asdict(cfg), "counts": counts}
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(root, name: str) -> list:
    """Samples of one split as stored (images quantized to 8 bit)."""
    folder = Path(root) / name
    if not (folder / "images").is_dir():
        raise ValidationError(f"missing split directory {folder}")
    out = []
    for img_path in sorted((folder / "images").glob("*.pgm")):
        image = read_pgm(img_path).astype(np.float64) / 255.0
        gt = (read_pgm(folder / "masks" / img_path.name) > 127).astype(np.uint8)
        pos, neg = prompt_targets(gt)
        out.append(SyntheticSample(image[None], gt, pos, neg))
    return out


def load_dataset(root) -> dict:
    root = Path(root)
    if not (root / "dataset.json").is_file():
        raise ValidationError(f"{root} has no dataset.json")
    return {name: load_split(root, name) for name in SPLIT_NAMES}
