"""Two-stage search: template retrieval, then minutiae re-ranking by score fusion.

Stage 1 retrieves the top ``k`` gallery records by template similarity
(exact cosine or PQ). Stage 2 scores each of those candidates with the
minutiae matcher and re-sorts them by ``minutiae score + template score``.
Records outside the stage-1 list never re-enter.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .matcher import DEFAULT_MATCH_CONFIG, MinutiaMatchConfig, minutiae_score
from .minutiae import MinutiaeSet
from .pq import PQIndex, similarity_from_distance
from .search import Candidate, CandidateList, ExactSearcher
from .template import MatchScore, Template, cosine_score

NORMALIZATIONS = ("none", "minmax")
BACKENDS = ("exact", "pq")


@dataclass(frozen=True)
class FusionConfig:
    k: int = 500
    normalization: str = "none"
    backend: str = "exact"
    normalize_template: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")
        if self.normalization not in NORMALIZATIONS:
            raise InvalidInputError(f"normalization must be one of {NORMALIZATIONS}")
        if self.backend not in BACKENDS:
            raise InvalidInputError(f"backend must be one of {BACKENDS}")


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    return np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)


def template_similarities(stage1: CandidateList) -> np.ndarray:
    """Stage-1 scores as similarities (PQ distances mapped to cosine scale)."""
    return np.array([similarity_from_distance(c.score.value) if c.score.tag == "pq-distance"
                     else c.score.value for c in stage1], dtype=np.float64)


def minutiae_scores(probe_m: MinutiaeSet, gallery, ordinals, matcher_cfg=DEFAULT_MATCH_CONFIG,
                    threads: int = 1) -> np.ndarray:
    sets = [gallery[o].minutiae for o in ordinals]
    if any(s is None for s in sets):
        raise ConfigurationError("re-ranking needs minutiae for every gallery record")
    score = lambda g: minutiae_score(probe_m, g, matcher_cfg)  # noqa: E731
    if threads > 1 and len(sets) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(score, sets)), dtype=np.float64)
    return np.array([score(g) for g in sets], dtype=np.float64)


def rerank(stage1: CandidateList, probe_m: MinutiaeSet, gallery, cfg: FusionConfig = FusionConfig(),
           matcher_cfg: MinutiaMatchConfig = DEFAULT_MATCH_CONFIG, threads: int = 1,
           m_scores: Optional[np.ndarray] = None) -> CandidateList:
    """Re-sort a stage-1 candidate list by fused score.

    Equal fused scores keep their stage-1 order.
    """
    if len(stage1) == 0:
        return CandidateList([], stage1.k)
    s = template_similarities(stage1)
    m = minutiae_scores(probe_m, gallery, stage1.ordinals, matcher_cfg, threads) \
        if m_scores is None else np.asarray(m_scores, dtype=np.float64)
    if cfg.normalization == "minmax":
        m = _minmax(m)
    if cfg.normalize_template:
        s = _minmax(s)
    fused = m + s
    order = np.lexsort((np.arange(len(fused)), -fused))
    items = [Candidate(stage1[i].ordinal, stage1[i].key, MatchScore(float(fused[i]), "fused"))
             for i in order]
    return CandidateList(items, stage1.k)


def stage_one(probe_t, gallery, cfg: FusionConfig, searcher: Optional[ExactSearcher] = None,
              pq_index: Optional[PQIndex] = None, shards: int = 1) -> CandidateList:
    if cfg.backend == "pq":
        if pq_index is None:
            raise ConfigurationError("backend 'pq' needs a PQ index")
        return pq_index.search(probe_t, cfg.k, shards)
    searcher = searcher or ExactSearcher.from_gallery(gallery)
    return searcher.search(probe_t, cfg.k, shards)


def two_stage_search(probe_t, probe_m: MinutiaeSet, gallery, cfg: FusionConfig = FusionConfig(),
                     searcher: Optional[ExactSearcher] = None, pq_index: Optional[PQIndex] = None,
                     matcher_cfg: MinutiaMatchConfig = DEFAULT_MATCH_CONFIG,
                     threads: int = 1) -> CandidateList:
    if not gallery.has_minutiae:
        raise ConfigurationError("re-ranking needs minutiae for every gallery record")
    stage1 = stage_one(probe_t, gallery, cfg, searcher, pq_index, threads)
    return rerank(stage1, probe_m, gallery, cfg, matcher_cfg, threads)


def fused_verify(probe_t: Template, gallery_t: Template, probe_m: MinutiaeSet,
                 gallery_m: MinutiaeSet,
                 matcher_cfg: MinutiaMatchConfig = DEFAULT_MATCH_CONFIG) -> MatchScore:
    """Sum-rule fusion of the cosine and minutiae scores for 1:1 comparison."""
    value = cosine_score(probe_t, gallery_t).value + minutiae_score(probe_m, gallery_m, matcher_cfg)
    return MatchScore(value, "fused")
