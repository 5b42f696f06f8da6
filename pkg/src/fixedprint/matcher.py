"""Pairwise minutiae matcher used for re-ranking and score fusion.

Alignment hypotheses come from Hough voting: every (probe, gallery) minutia
pair proposes a rotation (orientation difference) and the translation that
rotation implies, and votes into a binned grid. The most voted bins are
refined to the mean of their member pairs and each is scored by greedy
one-to-one pairing. The score is ``2 * matched / (len(p) + len(g))``
maximized over hypotheses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidInputError
from .minutiae import MinutiaeSet


@dataclass(frozen=True)
class MinutiaMatchConfig:
    distance_tolerance: float = 15.0
    angle_tolerance: float = math.pi / 9
    rotation_steps: int = 24
    max_rotation: float = math.pi / 3
    translation_bin: float = 16.0
    hypotheses: int = 10

    def __post_init__(self):
        if self.distance_tolerance <= 0 or self.angle_tolerance <= 0:
            raise InvalidInputError("tolerances must be positive")
        if self.rotation_steps < 1 or self.hypotheses < 1:
            raise InvalidInputError("rotation_steps and hypotheses must be >= 1")
        if self.translation_bin <= 0 or self.max_rotation < 0:
            raise InvalidInputError("translation_bin must be positive")


DEFAULT_MATCH_CONFIG = MinutiaMatchConfig()

_TBIN_OFFSET = 1 << 15
_TBIN_SPAN = 1 << 16


@numba.njit(cache=True, nogil=True)
def _signed_angle(a):
    a = a % (2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    return a


@numba.njit(cache=True, nogil=True)
def _pair_under(p, g, cx, cy, rot, tx, ty, dtol, atol, used_p, used_g):
    """Greedy one-to-one pairing of ``p`` (moved by the hypothesis) with ``g``."""
    n1, n2 = p.shape[0], g.shape[0]
    c, s = math.cos(rot), math.sin(rot)
    cand_i = np.empty(n1 * n2, np.int64)
    cand_j = np.empty(n1 * n2, np.int64)
    cand_d = np.empty(n1 * n2)
    cand_a = np.empty(n1 * n2)
    m = 0
    dtol2 = dtol * dtol
    for i in range(n1):
        dx0, dy0 = p[i, 0] - cx, p[i, 1] - cy
        px = cx + c * dx0 - s * dy0 + tx
        py = cy + s * dx0 + c * dy0 + ty
        pt = p[i, 2] + rot
        for j in range(n2):
            ex, ey = px - g[j, 0], py - g[j, 1]
            d2 = ex * ex + ey * ey
            if d2 > dtol2:
                continue
            ad = abs(_signed_angle(pt - g[j, 2]))
            if ad > atol:
                continue
            cand_i[m] = i
            cand_j[m] = j
            cand_d[m] = math.sqrt(d2)
            cand_a[m] = ad
            m += 1
    if m == 0:
        return 0
    # (distance, angle difference, probe index, gallery index): candidates are
    # generated in (i, j) order and both sorts are stable
    o1 = np.argsort(cand_a[:m], kind="mergesort")
    o2 = np.argsort(cand_d[:m][o1], kind="mergesort")
    order = o1[o2]
    used_p[:] = False
    used_g[:] = False
    matched = 0
    for t in range(m):
        k = order[t]
        i, j = cand_i[k], cand_j[k]
        if not used_p[i] and not used_g[j]:
            used_p[i] = True
            used_g[j] = True
            matched += 1
    return matched


@numba.njit(cache=True, nogil=True)
def _match_count(p, g, cx, cy, dtol, atol, rot_step, max_rot, tbin, n_hyp):
    n1, n2 = p.shape[0], g.shape[0]
    keys = np.empty(n1 * n2, np.int64)
    rots = np.empty(n1 * n2)
    txs = np.empty(n1 * n2)
    tys = np.empty(n1 * n2)
    m = 0
    limit = max_rot + atol
    for i in range(n1):
        dx0, dy0 = p[i, 0] - cx, p[i, 1] - cy
        for j in range(n2):
            rot = _signed_angle(g[j, 2] - p[i, 2])
            if abs(rot) > limit:
                continue
            c, s = math.cos(rot), math.sin(rot)
            tx = g[j, 0] - (cx + c * dx0 - s * dy0)
            ty = g[j, 1] - (cy + s * dx0 + c * dy0)
            rb = int(math.floor(rot / rot_step + 0.5))
            bx = int(math.floor(tx / tbin + 0.5)) + _TBIN_OFFSET
            by = int(math.floor(ty / tbin + 0.5)) + _TBIN_OFFSET
            keys[m] = ((rb + _TBIN_OFFSET) * _TBIN_SPAN + bx) * _TBIN_SPAN + by
            rots[m] = rot
            txs[m] = tx
            tys[m] = ty
            m += 1
    if m == 0:
        return 0
    order = np.argsort(keys[:m], kind="mergesort")
    # run-length encode the sorted keys into vote bins
    starts = np.empty(m + 1, np.int64)
    nb = 0
    for t in range(m):
        if t == 0 or keys[order[t]] != keys[order[t - 1]]:
            starts[nb] = t
            nb += 1
    starts[nb] = m
    counts = np.empty(nb, np.int64)
    for b in range(nb):
        counts[b] = starts[b + 1] - starts[b]
    # most votes first, lower key (earlier run) on ties
    bins = np.argsort(-counts, kind="mergesort")
    used_p = np.zeros(n1, np.bool_)
    used_g = np.zeros(n2, np.bool_)
    best = 0
    for h in range(min(n_hyp, nb)):
        b = bins[h]
        sr = 0.0
        cr = 0.0
        sx = 0.0
        sy = 0.0
        for t in range(starts[b], starts[b + 1]):
            k = order[t]
            sr += math.sin(rots[k])
            cr += math.cos(rots[k])
            sx += txs[k]
            sy += tys[k]
        cnt = counts[b]
        rot = math.atan2(sr, cr)
        got = _pair_under(p, g, cx, cy, rot, sx / cnt, sy / cnt, dtol, atol, used_p, used_g)
        if got > best:
            best = got
    return best


def minutiae_score(p: MinutiaeSet, g: MinutiaeSet,
                   cfg: MinutiaMatchConfig = DEFAULT_MATCH_CONFIG) -> float:
    """Similarity in ``[0, 1]`` between two minutiae sets (0 if either is empty)."""
    n1, n2 = len(p), len(g)
    if n1 == 0 or n2 == 0:
        return 0.0
    rot_step = 2.0 * cfg.max_rotation / cfg.rotation_steps if cfg.max_rotation > 0 else 1.0
    matched = _match_count(p.array, g.array, p.width / 2.0, p.height / 2.0,
                           cfg.distance_tolerance, cfg.angle_tolerance, rot_step,
                           cfg.max_rotation, cfg.translation_bin, cfg.hypotheses)
    return min(1.0, 2.0 * matched / (n1 + n2))


def rigid_transform(s: MinutiaeSet, rotation: float, tx: float = 0.0, ty: float = 0.0,
                    keep_inside: bool = True) -> MinutiaeSet:
    """Rotate ``s`` about its frame center and translate it.

    Minutiae leaving the frame are dropped when ``keep_inside`` is set.
    """
    arr = s.array
    cx, cy = s.width / 2.0, s.height / 2.0
    c, sn = math.cos(rotation), math.sin(rotation)
    dx, dy = arr[:, 0] - cx, arr[:, 1] - cy
    out = np.column_stack([cx + c * dx - sn * dy + tx, cy + sn * dx + c * dy + ty,
                           arr[:, 2] + rotation])
    if keep_inside:
        inside = ((out[:, 0] >= 0) & (out[:, 0] < s.width)
                  & (out[:, 1] >= 0) & (out[:, 1] < s.height))
        out = out[inside]
    return MinutiaeSet(out, s.width, s.height)
