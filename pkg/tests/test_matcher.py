import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fixedprint.errors import InvalidInputError
from fixedprint.matcher import MinutiaMatchConfig, minutiae_score, rigid_transform
from fixedprint.minutiae import MinutiaeSet, orientation_diff, random_separated_set


def central_set(rng, n=30, frame=448):
    # inside a disc around the center so rotations keep every point in frame
    pts = []
    while len(pts) < n:
        x, y = rng.uniform(80, frame - 80, 2)
        if math.hypot(x - frame / 2, y - frame / 2) < 140 and \
                all(math.hypot(x - a, y - b) > 20 for a, b, _ in pts):
            pts.append((x, y, rng.uniform(0, 2 * math.pi)))
    return MinutiaeSet(np.array(pts), frame, frame)


def oracle_pairs(p, g, rot, tx, ty, dtol, atol):
    """Greedy one-to-one pairing under a known transform, in plain Python."""
    cx, cy = p.width / 2, p.height / 2
    c, s = math.cos(rot), math.sin(rot)
    cands = []
    for i, (x, y, t) in enumerate(p.array):
        px = cx + c * (x - cx) - s * (y - cy) + tx
        py = cy + s * (x - cx) + c * (y - cy) + ty
        for j, (gx, gy, gt) in enumerate(g.array):
            d = math.hypot(px - gx, py - gy)
            a = orientation_diff(t + rot, gt)
            if d <= dtol and a <= atol:
                cands.append((d, a, i, j))
    used_i, used_j, n = set(), set(), 0
    for d, a, i, j in sorted(cands):
        if i not in used_i and j not in used_j:
            used_i.add(i)
            used_j.add(j)
            n += 1
    return n


def test_self_match(rng):
    s = central_set(rng)
    assert minutiae_score(s, s) == 1.0


def test_empty_scores_zero(rng):
    s = central_set(rng)
    empty = MinutiaeSet([], 448, 448)
    assert minutiae_score(s, empty) == 0.0
    assert minutiae_score(empty, s) == 0.0


def test_disjoint_orientations_score_zero(rng):
    arr = central_set(rng, 10).array.copy()
    arr[:, 2] = 0.0
    p = MinutiaeSet(arr, 448, 448)
    arr[:, 2] = math.pi  # every pair needs a 180 degree rotation: outside the grid
    assert minutiae_score(p, MinutiaeSet(arr, 448, 448)) == 0.0


@pytest.mark.parametrize("deg", [-30, -10, 10, 30])
def test_rotation_invariance(rng, deg):
    p = central_set(rng)
    g = rigid_transform(p, math.radians(deg), 12.0, -7.0)
    assert len(g) == len(p)
    cfg = MinutiaMatchConfig()
    assert oracle_pairs(p, g, math.radians(deg), 12.0, -7.0, cfg.distance_tolerance,
                        cfg.angle_tolerance) == len(p)
    assert minutiae_score(p, g, cfg) >= 0.9


def test_partial_overlap_matches_oracle(rng):
    p = central_set(rng, 40)
    keep = p.array[:25]
    extra = random_separated_set(rng, 15, 10.0, 448, 448).array
    g = MinutiaeSet(np.vstack([keep, extra]), 448, 448)
    score = minutiae_score(p, g)
    lower = 2 * oracle_pairs(p, g, 0.0, 0.0, 0.0, 15.0, math.pi / 9) / (len(p) + len(g))
    assert score >= lower - 1e-12
    assert score == pytest.approx(2 * 25 / 80, abs=0.05)


def test_unrelated_sets_score_low(rng):
    scores = [minutiae_score(central_set(rng), central_set(rng)) for _ in range(20)]
    assert max(scores) < 0.35


@given(st.integers(0, 2**32 - 1))
def test_score_range_and_determinism(seed):
    r = np.random.default_rng(seed)
    p = random_separated_set(r, int(r.integers(1, 25)), 5.0, 448, 448)
    g = random_separated_set(r, int(r.integers(1, 25)), 5.0, 448, 448)
    s = minutiae_score(p, g)
    assert 0.0 <= s <= 1.0
    assert s == minutiae_score(p, g)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        MinutiaMatchConfig(distance_tolerance=0)
    with pytest.raises(InvalidInputError):
        MinutiaMatchConfig(rotation_steps=0)


def test_rigid_transform_drops_outside():
    s = MinutiaeSet([(5, 5, 0), (200, 200, 1)], 448, 448)
    out = rigid_transform(s, 0.0, -10, 0)
    assert len(out) == 1
    assert len(rigid_transform(s, 0.0, -10, 0, keep_inside=True)) == 1
