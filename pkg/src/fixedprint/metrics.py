"""Identification and verification metrics: CMC / Rank-k and TAR at FAR."""

from __future__ import annotations

import math

import numpy as np


def cmc(mate_ranks, max_rank: int) -> np.ndarray:
    """Rank-k accuracy for k = 1..max_rank.

    ``mate_ranks`` holds the 1-based position of each probe's mate in its
    candidate list, or 0 when the mate was not returned.
    """
    ranks = np.asarray(mate_ranks, dtype=np.int64)
    if ranks.size == 0:
        return np.zeros(max_rank)
    found = ranks[(ranks >= 1) & (ranks <= max_rank)]
    hist = np.bincount(found, minlength=max_rank + 1)[1:max_rank + 1]
    return np.cumsum(hist) / ranks.size


def tar_at_far(genuine, imposter, far: float) -> float:
    """True accept rate at the strictest threshold whose FAR is <= ``far``.

    A comparison is accepted when its score is strictly greater than the
    threshold. The threshold is the imposter score just below the
    ``floor(far * n_imposter)`` highest ones.
    """
    gen = np.asarray(genuine, dtype=np.float64)
    imp = np.sort(np.asarray(imposter, dtype=np.float64))[::-1]
    if gen.size == 0:
        return float("nan")
    allowed = math.floor(far * imp.size + 1e-9)
    if allowed >= imp.size:
        return 1.0
    threshold = imp[allowed]
    return float(np.mean(gen > threshold))


def tar_far_table(genuine, imposter, fars) -> dict:
    return {float(f): tar_at_far(genuine, imposter, f) for f in fars}


def latency_summary(seconds) -> dict:
    s = np.asarray(seconds, dtype=np.float64) * 1e3
    if s.size == 0:
        return {"mean_ms": 0.0, "p99_ms": 0.0, "max_ms": 0.0}
    return {"mean_ms": float(s.mean()), "p99_ms": float(np.percentile(s, 99)),
            "max_ms": float(s.max())}
