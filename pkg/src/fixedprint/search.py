"""Exhaustive top-k search by cosine similarity.

Scores are computed block by block against a resident float32 matrix of
decompressed gallery templates and fed into a bounded heap of size ``k``.
Sharding splits the block list into contiguous ranges scanned in parallel;
block boundaries do not depend on the shard count, so every shard layout
produces bit-identical scores and therefore identical candidate lists.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._kernels import heap_push_block
from .errors import InvalidInputError
from .template import DIM, MatchScore, Template

BLOCK_ROWS = 4096


@dataclass(frozen=True)
class Candidate:
    ordinal: int
    key: Optional[tuple]
    score: MatchScore


@dataclass
class CandidateList:
    """Candidates best first; equal scores are ordered by ascending ordinal."""

    items: list[Candidate] = field(default_factory=list)
    k: int = 0

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def ordinals(self) -> list[int]:
        return [c.ordinal for c in self.items]

    @property
    def keys(self) -> list:
        return [c.key for c in self.items]

    @property
    def scores(self) -> list[float]:
        return [c.score.value for c in self.items]


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def as_vector(probe) -> np.ndarray:
    v = probe.features if isinstance(probe, Template) else np.asarray(probe, dtype=np.float32)
    v = np.ascontiguousarray(v, dtype=np.float32).reshape(-1)
    if v.shape != (DIM,):
        raise InvalidInputError(f"probe must have {DIM} features")
    return v


def select_topk(values: np.ndarray, ordinals: np.ndarray, k: int):
    """Order ``(value, ordinal)`` pairs best first and keep ``k``."""
    order = np.lexsort((ordinals, -values))[:k]
    return values[order], ordinals[order]


def split_ranges(n_items: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous, near-equal ``[start, stop)`` ranges covering ``n_items``."""
    parts = max(1, min(parts, n_items)) if n_items else 1
    bounds = np.linspace(0, n_items, parts + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def run_shards(scan, n_blocks: int, shards: int):
    """Run ``scan(first_block, stop_block)`` per shard, in threads if > 1."""
    ranges = split_ranges(n_blocks, shards)
    if len(ranges) == 1:
        return [scan(*ranges[0])]
    with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
        return list(pool.map(lambda r: scan(*r), ranges))


class ExactSearcher:
    """Exhaustive cosine search over a resident template matrix."""

    def __init__(self, matrix: np.ndarray, keys: Optional[Sequence] = None,
                 block_rows: int = BLOCK_ROWS):
        m = np.ascontiguousarray(matrix, dtype=np.float32)
        if m.ndim != 2 or (m.size and m.shape[1] != DIM):
            raise InvalidInputError(f"gallery matrix must be (N, {DIM})")
        if keys is not None and len(keys) != m.shape[0]:
            raise InvalidInputError("keys and matrix rows differ in length")
        self.matrix = m
        self.keys = keys
        self.block_rows = block_rows

    @classmethod
    def from_gallery(cls, gallery, block_rows: int = BLOCK_ROWS) -> "ExactSearcher":
        return cls(gallery.matrix(), gallery.keys, block_rows)

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def n_blocks(self) -> int:
        return -(-len(self) // self.block_rows)

    def _block_scores(self, q: np.ndarray, b: int, out: np.ndarray) -> np.ndarray:
        lo = b * self.block_rows
        hi = min(lo + self.block_rows, len(self))
        return np.dot(self.matrix[lo:hi], q, out=out[: hi - lo])

    def scores(self, probe) -> np.ndarray:
        """All N cosine scores, computed with the same blocking as ``search``."""
        q = as_vector(probe)
        out = np.empty(len(self), np.float32)
        buf = np.empty(self.block_rows, np.float32)
        for b in range(self.n_blocks):
            s = self._block_scores(q, b, buf)
            out[b * self.block_rows: b * self.block_rows + s.shape[0]] = s
        return out

    def _scan(self, q, k, first, stop):
        heap_v = np.empty(k, np.float64)
        heap_o = np.empty(k, np.int64)
        buf = np.empty(self.block_rows, np.float32)
        size = 0
        for b in range(first, stop):
            s = self._block_scores(q, b, buf)
            size = heap_push_block(s, b * self.block_rows, heap_v, heap_o, size, k)
        return heap_v[:size], heap_o[:size]

    def search(self, probe, k: int, shards: int = 1) -> CandidateList:
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        q = as_vector(probe)
        if len(self) == 0:
            return CandidateList([], k)
        parts = run_shards(lambda a, b: self._scan(q, k, a, b), self.n_blocks, shards)
        vals, ords = select_topk(np.concatenate([p[0] for p in parts]),
                                 np.concatenate([p[1] for p in parts]), k)
        return self._candidates(vals, ords, k)

    def _candidates(self, vals, ords, k) -> CandidateList:
        items = []
        for v, o in zip(vals.tolist(), ords.tolist()):
            key = self.keys[o] if self.keys is not None else None
            items.append(Candidate(o, key, MatchScore(min(1.0, max(-1.0, v)), "cosine")))
        return CandidateList(items, k)


def search_topk(probe, gallery, k: int, shards: int = 1) -> CandidateList:
    """Top-k gallery records by cosine similarity to ``probe``."""
    return ExactSearcher.from_gallery(gallery).search(probe, k, shards)
