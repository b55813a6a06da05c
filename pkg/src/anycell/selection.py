"""Turning probability maps into point prompts.

Two strategies: one prompt per connected super-threshold region placed at
its centroid, or uniform random sampling of super-threshold pixels.  A
deterministic top-k variant serves as a baseline.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ValidationError
from .generator import ProbabilityMap
from .rng import SplitMix64

POSITIVE = 1
NEGATIVE = 0
LABELS = (POSITIVE, NEGATIVE)
SOURCES = ("auto", "expert")


@dataclass(frozen=True)
class Prompt:
    x: int
    y: int
    label: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"negative prompt coordinate in {self}")
        if self.label not in LABELS:
            raise ValidationError(f"prompt label must be 1 or 0, got {self.label!r}")


@dataclass
class PromptSet:
    prompts: list = field(default_factory=list)
    source: str = "auto"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"unknown prompt source {self.source!r}")
        seen = set()
        for p in self.prompts:
            if p in seen:
                raise ValidationError(f"duplicate prompt {p}")
            seen.add(p)

    def __len__(self):
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)

    def positives(self) -> list:
        return [p for p in self.prompts if p.label == POSITIVE]

    def negatives(self) -> list:
        return [p for p in self.prompts if p.label == NEGATIVE]

    def merged(self, other: "PromptSet") -> "PromptSet":
        """Concatenation that drops prompts already present; keeps this set's source."""
        seen = set(self.prompts)
        extra = [p for p in other.prompts if p not in seen]
        return PromptSet(self.prompts + extra, self.source)


@dataclass(frozen=True)
class Region:
    pixels: frozenset  # of (x, y)
    label: int

    def __post_init__(self):
        if not self.pixels:
            raise ValidationError("region must be non-empty")

    @property
    def area(self) -> int:
        return len(self.pixels)

    def anchor(self) -> tuple:
        """Topmost, then leftmost pixel as (y, x)."""
        return min((y, x) for x, y in self.pixels)


# ------------------------------------------------------------------ regions

_NEIGHBOURS = {
    4: ((0, 1), (1, 0), (0, -1), (-1, 0)),
    8: ((0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)),
}


def label_components(mask: np.ndarray, connectivity: int = 4) -> list:
    """Components of a boolean H×W mask as lists of (x, y), in raster order of first pixel."""
    if connectivity not in _NEIGHBOURS:
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    steps = _NEIGHBOURS[connectivity]
    comps = []
    for y0, x0 in zip(*np.nonzero(mask)):
        if seen[y0, x0]:
            continue
        seen[y0, x0] = True
        comp = []
        queue = deque([(int(y0), int(x0))])
        while queue:
            y, x = queue.popleft()
            comp.append((x, y))
            for dy, dx in steps:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
        comps.append(comp)
    return comps


def connected_regions(P: ProbabilityMap, tau_bin: float = 0.5, connectivity: int = 4) -> list:
    """Super-threshold components of each channel, positives first, each
    channel ordered by topmost-then-leftmost pixel."""
    if not 0.0 < tau_bin < 1.0:
        raise DomainError(f"tau_bin must lie in (0, 1), got {tau_bin}")
    regions = []
    for label, chan in ((POSITIVE, P.P_pos), (NEGATIVE, P.P_neg)):
        for comp in label_components(np.asarray(chan) >= tau_bin, connectivity):
            regions.append(Region(frozenset(comp), label))
    # raster discovery order already equals anchor order; sort anyway to make it explicit
    order = {POSITIVE: 0, NEGATIVE: 1}
    regions.sort(key=lambda r: (order[r.label], r.anchor()))
    return regions


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def region_centroid(region: Region) -> tuple:
    """Mean pixel position, rounded half-up and snapped into the region if needed."""
    n = region.area
    cx = sum(x for x, _ in region.pixels) / n
    cy = sum(y for _, y in region.pixels) / n
    pt = (_round_half_up(cx), _round_half_up(cy))
    if pt in region.pixels:
        return pt
    return min(region.pixels, key=lambda p: ((p[0] - cx) ** 2 + (p[1] - cy) ** 2, p[1], p[0]))


def centroid_select(regions, max_pos: int | None = None, max_neg: int | None = None) -> PromptSet:
    """One prompt per region.  Optional caps keep only the largest regions of a
    channel (ties by region order); the surviving prompts keep region order."""
    keep = list(regions)
    for label, cap in ((POSITIVE, max_pos), (NEGATIVE, max_neg)):
        if cap is None:
            continue
        idx = [i for i, r in enumerate(keep) if r.label == label]
        ranked = sorted(idx, key=lambda i: (-keep[i].area, i))
        drop = set(ranked[cap:])
        keep = [r for i, r in enumerate(keep) if i not in drop]
    prompts = []
    for r in keep:
        x, y = region_centroid(r)
        prompts.append(Prompt(x, y, r.label))
    return PromptSet(prompts, "auto")


def random_select(P: ProbabilityMap, tau: float, k_pos: int, k_neg: int, seed: int) -> PromptSet:
    """Uniform sampling without replacement from each channel's super-threshold pixels.

    Each channel draws from its own SplitMix64 stream started at ``seed``, so
    swapping the channels (and the two counts) swaps the prompts exactly.
    """
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    if k_pos < 0 or k_neg < 0:
        raise DomainError("prompt counts must be non-negative")
    prompts = []
    for label, chan, k in ((POSITIVE, P.P_pos, k_pos), (NEGATIVE, P.P_neg, k_neg)):
        chan = np.asarray(chan)
        pool = np.flatnonzero(chan >= tau)
        if k == 0 or pool.size == 0:
            continue
        w = chan.shape[1]
        for i in SplitMix64(seed).sample_indices(pool.size, k):
            y, x = divmod(int(pool[i]), w)
            prompts.append(Prompt(x, y, label))
    return PromptSet(prompts, "auto")


def top_k_select(P: ProbabilityMap, k_pos: int, k_neg: int) -> PromptSet:
    """k most probable pixels per channel, ties by (y, x)."""
    if k_pos < 0 or k_neg < 0:
        raise DomainError("prompt counts must be non-negative")
    prompts = []
    for label, chan, k in ((POSITIVE, P.P_pos, k_pos), (NEGATIVE, P.P_neg, k_neg)):
        chan = np.asarray(chan)
        w = chan.shape[1]
        order = np.argsort(-chan.ravel(), kind="stable")[:k]
        for flat in order:
            y, x = divmod(int(flat), w)
            prompts.append(Prompt(x, y, label))
    return PromptSet(prompts, "auto")


def split_count(k: int) -> tuple:
    """Split k auto points into (positive, negative): ceil / floor halves."""
    return (k + 1) // 2, k // 2


def select_prompts(P: ProbabilityMap, method: str, k: int, *, tau: float = 0.5, tau_bin: float = 0.5,
                   seed: int = 0, connectivity: int = 4) -> PromptSet:
    """k auto points by the named method ("centroid", "random" or "topk")."""
    k_pos, k_neg = split_count(k)
    if k == 0:
        return PromptSet([], "auto")
    if method == "centroid":
        return centroid_select(connected_regions(P, tau_bin, connectivity), k_pos, k_neg)
    if method == "random":
        return random_select(P, tau, k_pos, k_neg, seed)
    if method == "topk":
        return top_k_select(P, k_pos, k_neg)
    raise ValidationError(f"unknown selection method {method!r}")


def expert_prompts(gt_mask: np.ndarray, m: int, seed: int, connectivity: int = 4) -> PromptSet:
    """Up to m positive 'expert' clicks at centroids of ground-truth components,
    components chosen uniformly without replacement."""
    if m <= 0:
        return PromptSet([], "expert")
    comps = label_components(np.asarray(gt_mask) > 0, connectivity)
    picks = SplitMix64(seed).sample_indices(len(comps), m)
    prompts = []
    for i in picks:
        x, y = region_centroid(Region(frozenset(comps[i]), POSITIVE))
        prompts.append(Prompt(x, y, POSITIVE))
    return PromptSet(prompts, "expert")


# --------------------------------------------------------------------- CSV

def prompts_to_csv(prompts: PromptSet) -> str:
    lines = ["x,y,label"] + [f"{p.x},{p.y},{p.label}" for p in prompts]
    return "\n".join(lines) + "\n"


def write_prompts_csv(path, prompts: PromptSet) -> None:
    Path(path).write_bytes(prompts_to_csv(prompts).encode("utf-8"))


def parse_prompts_csv(text: str, source: str = "expert") -> PromptSet:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None or [h.strip() for h in header] != ["x", "y", "label"]:
        raise ValidationError("line 1: expected header 'x,y,label'")
    prompts, seen = [], set()
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ValidationError(f"line {lineno}: expected 3 fields, got {len(row)}")
        try:
            x, y, label = (int(c.strip()) for c in row)
        except ValueError:
            raise ValidationError(f"line {lineno}: fields must be integers") from None
        if label not in LABELS:
            raise ValidationError(f"line {lineno}: label must be 1 or 0")
        if x < 0 or y < 0:
            raise ValidationError(f"line {lineno}: negative coordinate")
        p = Prompt(x, y, label)
        if p in seen:
            raise ValidationError(f"line {lineno}: duplicate prompt")
        seen.add(p)
        prompts.append(p)
    return PromptSet(prompts, source)


def read_prompts_csv(path, source: str = "expert") -> PromptSet:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path}: not UTF-8 ({exc})") from None
    return parse_prompts_csv(text, source)
