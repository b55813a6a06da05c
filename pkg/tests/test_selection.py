import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anycell.errors import DomainError, ValidationError
from anycell.generator import ProbabilityMap
from anycell.selection import (NEGATIVE, POSITIVE, Prompt, PromptSet, Region, centroid_select,
                               connected_regions, expert_prompts, label_components, parse_prompts_csv,
                               prompts_to_csv, random_select, region_centroid, select_prompts,
                               split_count, top_k_select)


def flood_fill_oracle(mask):
    """Recursive-free DFS labelling with an explicit stack, independent of the BFS under test."""
    h, w = mask.shape
    labels = -np.ones((h, w), dtype=int)
    comps = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or labels[y, x] >= 0:
                continue
            stack, comp = [(y, x)], set()
            labels[y, x] = len(comps)
            while stack:
                cy, cx = stack.pop()
                comp.add((cx, cy))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and labels[ny, nx] < 0:
                        labels[ny, nx] = len(comps)
                        stack.append((ny, nx))
            comps.append(frozenset(comp))
    return comps


def pmap(pos, neg=None):
    pos = np.asarray(pos, dtype=float)
    return ProbabilityMap(pos, np.zeros_like(pos) if neg is None else np.asarray(neg, dtype=float))


def test_regions_match_oracle_on_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(100):
        P = ProbabilityMap(rng.random((12, 12)), rng.random((12, 12)))
        regions = connected_regions(P, 0.5)
        got_pos = {r.pixels for r in regions if r.label == POSITIVE}
        got_neg = {r.pixels for r in regions if r.label == NEGATIVE}
        assert got_pos == set(flood_fill_oracle(P.P_pos >= 0.5))
        assert got_neg == set(flood_fill_oracle(P.P_neg >= 0.5))
        labels = [r.label for r in regions]
        assert labels == sorted(labels, reverse=True)


def test_region_examples():
    assert connected_regions(pmap(np.zeros((4, 4)))) == []
    m = np.zeros((3, 3))
    m[0, 0] = m[1, 1] = 0.9
    assert len(connected_regions(pmap(m))) == 2
    assert len(label_components(m > 0.5, connectivity=8)) == 1


def test_threshold_domain():
    with pytest.raises(DomainError):
        connected_regions(pmap(np.zeros((2, 2))), tau_bin=1.0)
    with pytest.raises(ValidationError):
        label_components(np.zeros((2, 2), bool), connectivity=6)


def test_centroid_examples():
    assert region_centroid(Region(frozenset({(0, 0), (0, 1), (0, 2)}), POSITIVE)) == (0, 1)
    assert region_centroid(Region(frozenset({(5, 7)}), POSITIVE)) == (5, 7)
    ell = Region(frozenset({(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)}), POSITIVE)
    assert region_centroid(ell) == (1, 0)


def test_centroids_inside_regions():
    rng = np.random.default_rng(1)
    for _ in range(100):
        for r in connected_regions(pmap(rng.random((10, 10))), 0.5):
            assert region_centroid(r) in r.pixels


def test_centroid_caps_keep_largest():
    m = np.zeros((8, 8))
    m[0, 0] = 1.0
    m[3:6, 3:6] = 1.0
    m[7, 5:8] = 1.0
    ps = centroid_select(connected_regions(pmap(m)), max_pos=2)
    assert [(p.x, p.y) for p in ps] == [(4, 4), (6, 7)]


def test_random_select_deterministic_and_inside_pool():
    rng = np.random.default_rng(2)
    P = ProbabilityMap(rng.random((16, 16)), rng.random((16, 16)))
    a = random_select(P, 0.5, 5, 4, seed=11)
    assert a == random_select(P, 0.5, 5, 4, seed=11)
    assert a != random_select(P, 0.5, 5, 4, seed=12)
    for p in a:
        chan = P.P_pos if p.label == POSITIVE else P.P_neg
        assert chan[p.y, p.x] >= 0.5
    assert len(a.positives()) == 5 and len(a.negatives()) == 4


def test_random_select_exhaustion_and_empty():
    m = np.zeros((4, 4))
    m[1, 2] = m[3, 0] = 0.9
    ps = random_select(pmap(m), 0.5, 10, 0, seed=0)
    assert {(p.x, p.y) for p in ps} == {(2, 1), (0, 3)}
    assert len(random_select(pmap(m), 0.5, 0, 0, seed=0)) == 0
    with pytest.raises(DomainError):
        random_select(pmap(m), 0.5, -1, 0, seed=0)


def test_random_select_covers_pool():
    m = np.zeros((3, 3))
    m[0, :] = 0.9
    hits = {0: 0, 1: 0, 2: 0}
    for s in range(1000):
        (p,) = random_select(pmap(m), 0.5, 1, 0, seed=s).prompts
        hits[p.x] += 1
    assert all(280 < v < 390 for v in hits.values())


@given(st.integers(0, 2 ** 63), st.integers(0, 5), st.integers(0, 5))
def test_random_select_channel_symmetry(seed, kp, kn):
    rng = np.random.default_rng(seed % 1000)
    P = ProbabilityMap(rng.random((6, 6)), rng.random((6, 6)))
    a = random_select(P, 0.5, kp, kn, seed)
    b = random_select(P.swapped(), 0.5, kn, kp, seed)
    flip = {(p.x, p.y, 1 - p.label) for p in b}
    assert {(p.x, p.y, p.label) for p in a} == flip


def test_top_k_examples():
    ps = top_k_select(pmap(np.full((3, 3), 0.7)), 4, 0)
    assert [(p.x, p.y) for p in ps] == [(0, 0), (1, 0), (2, 0), (0, 1)]
    m = np.zeros((6, 6))
    m[3, 4] = 1.0
    (p,) = top_k_select(pmap(m), 1, 0).prompts
    assert (p.x, p.y) == (4, 3)
    assert len(top_k_select(pmap(np.zeros((2, 2))), 10, 0)) == 4


def test_split_and_dispatch():
    assert [split_count(k) for k in (0, 1, 3, 256)] == [(0, 0), (1, 0), (2, 1), (128, 128)]
    P = pmap(np.zeros((4, 4)))
    assert len(select_prompts(P, "centroid", 0)) == 0
    with pytest.raises(ValidationError):
        select_prompts(P, "bogus", 2)


def test_expert_prompts():
    gt = np.zeros((10, 10), int)
    gt[1:3, 1:3] = 1
    gt[6:9, 6:9] = 1
    ps = expert_prompts(gt, 5, seed=3)
    assert {(p.x, p.y) for p in ps} == {(2, 2), (7, 7)}
    assert all(p.label == POSITIVE for p in ps) and ps.source == "expert"
    assert len(expert_prompts(gt, 0, 3)) == 0
    assert expert_prompts(gt, 1, 3) == expert_prompts(gt, 1, 3)


def test_prompt_validation():
    with pytest.raises(ValidationError):
        Prompt(-1, 0, 1)
    with pytest.raises(ValidationError):
        Prompt(0, 0, 2)
    with pytest.raises(ValidationError):
        PromptSet([Prompt(1, 1, 1), Prompt(1, 1, 1)])
    a = PromptSet([Prompt(1, 1, 1)])
    assert len(a.merged(PromptSet([Prompt(1, 1, 1), Prompt(2, 2, 0)]))) == 2


@given(st.lists(st.tuples(st.integers(0, 63), st.integers(0, 63), st.sampled_from([0, 1])), unique=True))
def test_csv_round_trip(rows):
    ps = PromptSet([Prompt(*r) for r in rows], "expert")
    assert parse_prompts_csv(prompts_to_csv(ps)) == ps


@pytest.mark.parametrize("text,line", [
    ("a,b,c\n", "line 1"),
    ("x,y,label\n1,2,1\n1,2\n", "line 3"),
    ("x,y,label\n1,2,1\n1,q,1\n", "line 3"),
    ("x,y,label\n1,2,5\n", "line 2"),
    ("x,y,label\n-1,2,1\n", "line 2"),
    ("x,y,label\n1,2,1\n1,2,1\n", "line 3"),
])
def test_csv_errors_name_line(text, line):
    with pytest.raises(ValidationError, match=line):
        parse_prompts_csv(text)
