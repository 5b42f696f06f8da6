"""Synthetic identities and the evaluation harness.

Every identity has a random unit anchor template and a base minutiae set.
An impression perturbs both: Gaussian noise on the template (renormalized),
and for minutiae a random rigid placement, position/orientation jitter,
dropped minutiae and spurious ones. Poor-quality impressions get much
heavier template noise or lose many more minutiae; the two are drawn
independently, so the template and minutiae matchers fail on different
probes.

The gallery holds impression 0 of every identity; probes are later
impressions of a seeded subset of identities, so every probe has exactly
one mate.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .gallery import Gallery, GalleryRecord
from .matcher import DEFAULT_MATCH_CONFIG, MinutiaMatchConfig, minutiae_score
from .metrics import cmc, latency_summary, tar_far_table
from .minutiae import IMAGE_SIZE, TWO_PI, MinutiaeSet
from .pq import PQIndex
from .rerank import FusionConfig, rerank
from .search import ExactSearcher
from .template import DIM, CompressedTemplate, Template, compress_rows, unit_rows

REPORT_VERSION = 1
DEFAULT_FARS = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True)
class SynthConfig:
    identities: int = 10_000
    impressions_per_identity: int = 2
    noise_sigma: float = 0.04
    poor_noise_sigma: float = 0.3
    poor_template_rate: float = 0.03
    minutiae_count_range: tuple = (30, 60)
    seed: int = 0
    probe_identities: int = 1000
    frame: int = IMAGE_SIZE
    position_jitter: float = 3.0
    angle_jitter: float = 0.1
    drop_rate: float = 0.15
    poor_minutiae_rate: float = 0.15
    poor_drop_rate: float = 0.6
    max_rotation_deg: float = 20.0
    max_translation: float = 20.0

    def __post_init__(self):
        if self.identities < 1 or self.impressions_per_identity < 1:
            raise InvalidInputError("identity and impression counts must be positive")
        if self.noise_sigma < 0 or self.poor_noise_sigma < 0:
            raise InvalidInputError("noise levels must be >= 0")
        lo, hi = self.minutiae_count_range
        if not 0 < lo <= hi:
            raise InvalidInputError("minutiae_count_range must satisfy 0 < min <= max")
        if self.probe_identities < 0:
            raise InvalidInputError("probe_identities must be >= 0")
        if self.probe_identities and self.impressions_per_identity < 2:
            raise InvalidInputError("probes need at least two impressions per identity")


@dataclass(frozen=True, eq=False)
class Probe:
    template: Template
    minutiae: MinutiaeSet
    mate_key: tuple


@dataclass(eq=False)
class SynthData:
    gallery: Gallery
    raw_gallery: np.ndarray  # uncompressed unit templates, one row per record
    probes: list[Probe]
    anchors: np.ndarray

    @property
    def probe_matrix(self) -> np.ndarray:
        return np.stack([p.template.features for p in self.probes])


def subject_id(i: int) -> str:
    return f"S{i:07d}"


def _impression_templates(anchors: np.ndarray, cfg: SynthConfig, rng) -> np.ndarray:
    poor = rng.random(anchors.shape[0]) < cfg.poor_template_rate
    sigma = np.where(poor, cfg.poor_noise_sigma, cfg.noise_sigma)[:, None]
    return unit_rows(anchors + rng.standard_normal(anchors.shape) * sigma)


def _base_minutiae(n_ids: int, cfg: SynthConfig, rng) -> list[np.ndarray]:
    lo, hi = cfg.minutiae_count_range
    counts = rng.integers(lo, hi + 1, size=n_ids)
    margin = 0.1 * cfg.frame
    total = int(counts.sum())
    pts = np.column_stack([rng.uniform(margin, cfg.frame - margin, total),
                           rng.uniform(margin, cfg.frame - margin, total),
                           rng.uniform(0.0, TWO_PI, total)])
    return np.split(pts, np.cumsum(counts)[:-1])


def perturb_minutiae(base: np.ndarray, cfg: SynthConfig, rng) -> MinutiaeSet:
    """One impression of a base minutiae set (positions in a ``frame`` square)."""
    poor = rng.random() < cfg.poor_minutiae_rate
    drop = cfg.poor_drop_rate if poor else cfg.drop_rate
    jitter = cfg.position_jitter * (2.0 if poor else 1.0)
    keep = base[rng.random(base.shape[0]) >= drop]
    n_spur = rng.poisson(drop * base.shape[0])
    f = cfg.frame
    spur = np.column_stack([rng.uniform(0, f, n_spur), rng.uniform(0, f, n_spur),
                            rng.uniform(0, TWO_PI, n_spur)])
    pts = keep.copy()
    pts[:, :2] += rng.normal(0.0, jitter, size=(pts.shape[0], 2))
    pts[:, 2] += rng.normal(0.0, cfg.angle_jitter, size=pts.shape[0])
    rot = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    tx, ty = rng.uniform(-cfg.max_translation, cfg.max_translation, size=2)
    c, s = math.cos(rot), math.sin(rot)
    dx, dy = pts[:, 0] - f / 2, pts[:, 1] - f / 2
    pts = np.column_stack([f / 2 + c * dx - s * dy + tx, f / 2 + s * dx + c * dy + ty,
                           pts[:, 2] + rot])
    pts = np.concatenate([pts, spur])
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < f) & (pts[:, 1] >= 0) & (pts[:, 1] < f)
    return MinutiaeSet(pts[inside], f, f)


def generate(cfg: SynthConfig, with_minutiae: bool = True) -> SynthData:
    """Build a gallery and mated probes; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.identities
    anchors = unit_rows(rng.standard_normal((n, DIM)))
    raw = _impression_templates(anchors, cfg, rng)
    codes, lo, hi = compress_rows(raw)
    probe_ids = rng.choice(n, size=min(cfg.probe_identities, n), replace=False)
    probe_raw = [_impression_templates(anchors[probe_ids], cfg, rng)
                 for _ in range(cfg.impressions_per_identity - 1)]

    mrng = np.random.default_rng([cfg.seed, 1])
    base = _base_minutiae(n, cfg, mrng) if with_minutiae else None
    gallery = Gallery()
    for i in range(n):
        m = perturb_minutiae(base[i], cfg, mrng) if with_minutiae else None
        gallery.enroll(GalleryRecord(subject_id(i), 0, CompressedTemplate(codes[i], lo[i], hi[i]), m))

    probes = []
    for imp in probe_raw:
        for row, ident in zip(imp, probe_ids):
            m = perturb_minutiae(base[ident], cfg, mrng) if with_minutiae else \
                MinutiaeSet(np.zeros((0, 3)), cfg.frame, cfg.frame)
            probes.append(Probe(Template(row), m, (subject_id(int(ident)), 0)))
    return SynthData(gallery, raw, probes, anchors)


# -- evaluation -------------------------------------------------------------


class Backend:
    """Uniform search/score surface for the exact, pq and rerank backends.

    ``search`` returns a candidate list and ``similarity`` scores a probe
    against given ordinals on the backend's own scale (higher is better).
    """

    def __init__(self, name: str, gallery: Gallery, *, pq_index: Optional[PQIndex] = None,
                 fusion: Optional[FusionConfig] = None, matrix: Optional[np.ndarray] = None,
                 matcher_cfg: MinutiaMatchConfig = DEFAULT_MATCH_CONFIG, shards: int = 1):
        if name not in ("exact", "pq", "rerank"):
            raise InvalidInputError(f"unknown backend {name!r}")
        if name == "pq" and pq_index is None:
            raise InvalidInputError("pq backend needs an index")
        self.name = name
        self.gallery = gallery
        self.pq_index = pq_index
        self.fusion = fusion or FusionConfig(backend="pq" if name == "pq" else "exact")
        self.matcher_cfg = matcher_cfg
        self.shards = shards
        mat = gallery.matrix() if matrix is None else matrix
        self.exact = ExactSearcher(mat, gallery.keys)

    def _stage_one(self, probe, k):
        if self.name == "pq" or (self.name == "rerank" and self.fusion.backend == "pq"):
            return self.pq_index.search(probe.template, k, self.shards)
        return self.exact.search(probe.template, k, self.shards)

    def search(self, probe: Probe, k: int):
        if self.name == "rerank":
            stage1 = self._stage_one(probe, self.fusion.k)
            return rerank(stage1, probe.minutiae, self.gallery, self.fusion, self.matcher_cfg)
        return self._stage_one(probe, k)

    def similarity(self, probe: Probe, ordinals) -> np.ndarray:
        ordinals = np.asarray(ordinals, dtype=np.int64)
        if self.name == "pq":
            return -self.pq_index.distances(probe.template)[ordinals]
        q = probe.template.features
        s = self.exact.matrix[ordinals] @ q
        if self.name == "exact":
            return s.astype(np.float64)
        m = np.array([minutiae_score(probe.minutiae, self.gallery[o].minutiae, self.matcher_cfg)
                      for o in ordinals.tolist()])
        return s + m


@dataclass
class EvalReport:
    backend: str
    cmc: list
    tar_at_far: dict
    latency: dict
    n_probes: int
    excluded: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return self.cmc[0] if self.cmc else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = REPORT_VERSION
        d["tar_at_far"] = {repr(k): v for k, v in self.tar_at_far.items()}
        return d


def evaluate(gallery: Gallery, probes, backend: Backend, max_rank: int = 100,
             fars=DEFAULT_FARS, imposters_per_probe: int = 100, seed: int = 0,
             keep_ranks: bool = False) -> EvalReport:
    """Rank-k accuracy, TAR@FAR and per-query latency for one backend.

    Probes whose mate is not enrolled are excluded and counted. Imposter
    scores come from ``imposters_per_probe`` seeded non-mate records per
    probe.
    """
    rng = np.random.default_rng(seed)
    n = len(gallery)
    max_rank = max(1, min(max_rank, n))
    ranks, latencies, genuine, imposter, top1 = [], [], [], [], []
    excluded = 0
    for probe in probes:
        if probe.mate_key not in gallery:
            excluded += 1
            continue
        mate = gallery.ordinal(probe.mate_key)
        t0 = time.perf_counter()
        result = backend.search(probe, max_rank)
        latencies.append(time.perf_counter() - t0)
        ords = result.ordinals
        ranks.append(ords.index(mate) + 1 if mate in ords else 0)
        top1.append(ords[0] if ords else -1)
        if imposters_per_probe and n > 1:
            others = rng.choice(n - 1, size=min(imposters_per_probe, n - 1), replace=False)
            others = others + (others >= mate)
            scores = backend.similarity(probe, np.concatenate([[mate], others]))
            genuine.append(scores[0])
            imposter.extend(scores[1:].tolist())
    report = EvalReport(
        backend=backend.name,
        cmc=cmc(ranks, max_rank).tolist(),
        tar_at_far=tar_far_table(genuine, imposter, fars) if genuine else {},
        latency=latency_summary(latencies),
        n_probes=len(ranks),
        excluded=excluded,
    )
    if keep_ranks:
        report.extra["mate_ranks"] = ranks
        report.extra["top1"] = top1
    return report
