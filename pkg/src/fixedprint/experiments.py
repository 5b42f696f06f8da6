"""Reproducible desk-scale experiments driven by JSON manifests.

A manifest names an experiment ``kind``, a seed, a config, and the expected
metrics with their tolerances::

    {"version": 1, "name": "...", "kind": "pq", "seed": 1,
     "analog": "...", "config": {...},
     "expected": {"recall_at_1": {"op": ">=", "value": 0.95}, ...}}

Tolerances live only in manifests. The packaged set is under
``fixedprint/manifests`` with one file per acceptance criterion.

Heavy shared inputs (the synthetic benchmark, its PQ index, the large
random gallery) are cached for the life of the process so a suite of
manifests builds each of them once.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError
from .gallery import Gallery, GalleryRecord
from .matcher import minutiae_score
from .metrics import tar_at_far
from .minutiae import DEFAULT_SIGMA, MinutiaeSet, decode_map, encode_map, orientation_diff, \
    random_separated_set
from .pq import _HEAD as _PQ_HEAD, PQIndex
from .rerank import FusionConfig, minutiae_scores, rerank
from .search import ExactSearcher, select_topk
from .synth import SynthConfig, generate
from .template import DIM, CompressedTemplate, compress_rows, decompress_rows, integer_score, \
    unit_rows

MANIFEST_VERSION = 1
OPS = {
    "<=": lambda x, v: x <= v,
    ">=": lambda x, v: x >= v,
    "<": lambda x, v: x < v,
    ">": lambda x, v: x > v,
    "==": lambda x, v: x == v,
    "between": lambda x, v: v[0] <= x <= v[1],
}

_cache: dict = {}


def clear_cache() -> None:
    _cache.clear()


def _cached(key, build):
    if key not in _cache:
        _cache[key] = build()
    return _cache[key]


# -- manifests ----------------------------------------------------------------


@dataclass
class Manifest:
    name: str
    kind: str
    seed: int
    config: dict
    expected: dict
    analog: str = ""
    path: str = ""

    @classmethod
    def from_dict(cls, d: dict, path: str = "") -> "Manifest":
        if d.get("version") != MANIFEST_VERSION:
            raise FormatError(f"manifest version {d.get('version')!r}, expected {MANIFEST_VERSION}")
        try:
            m = cls(d["name"], d["kind"], int(d.get("seed", 0)), dict(d.get("config", {})),
                    dict(d["expected"]), d.get("analog", ""), path)
        except KeyError as exc:
            raise FormatError(f"manifest missing field {exc}") from exc
        if m.kind not in KINDS:
            raise FormatError(f"unknown experiment kind {m.kind!r}")
        for metric, rule in m.expected.items():
            if rule.get("op") not in OPS:
                raise FormatError(f"{metric}: unknown op {rule.get('op')!r}")
        return m

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", exc.pos) from exc
        return cls.from_dict(data, str(path))


def packaged_manifests() -> list[Path]:
    root = resources.files("fixedprint") / "manifests"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))


@dataclass
class Check:
    metric: str
    op: str
    expected: object
    observed: object
    passed: bool


@dataclass
class ExperimentResult:
    name: str
    passed: bool
    checks: list[Check]
    metrics: dict
    runtime_s: float
    notes: dict = field(default_factory=dict)

    def table(self) -> str:
        rows = [f"{'metric':<30} {'op':<8} {'expected':>16} {'observed':>16}  ok"]
        for c in self.checks:
            rows.append(f"{c.metric:<30} {c.op:<8} {_fmt(c.expected):>16} "
                        f"{_fmt(c.observed):>16}  {'yes' if c.passed else 'NO'}")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "name": self.name,
            "passed": self.passed,
            "runtime_s": self.runtime_s,
            "metrics": self.metrics,
            "checks": [c.__dict__ for c in self.checks],
            "notes": self.notes,
        }


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def run_experiment(manifest) -> ExperimentResult:
    """Run one manifest and compare its metrics with the expected values.

    A metric missing from the run fails its check.
    """
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest) if isinstance(manifest, (str, os.PathLike)) \
            else Manifest.from_dict(manifest)
    t0 = time.perf_counter()
    metrics, notes = KINDS[manifest.kind](manifest.config, manifest.seed)
    runtime = time.perf_counter() - t0
    metrics["runtime_s"] = runtime
    checks = []
    for metric, rule in manifest.expected.items():
        observed = metrics.get(metric)
        ok = observed is not None and bool(OPS[rule["op"]](observed, rule["value"]))
        checks.append(Check(metric, rule["op"], rule["value"], observed, ok))
    return ExperimentResult(manifest.name, all(c.passed for c in checks), checks,
                            metrics, runtime, notes)


# -- shared inputs ------------------------------------------------------------


def _synth(cfg: dict, seed: int):
    sc = SynthConfig(identities=int(cfg.get("identities", 100_000)),
                     probe_identities=int(cfg.get("probes", 1000)), seed=seed)
    return _cached(("synth", sc), lambda: generate(sc))


def _synth_pq(cfg: dict, seed: int):
    data = _synth(cfg, seed)
    m, z = int(cfg.get("m", 64)), int(cfg.get("z", 256))
    key = ("synth-pq", len(data.gallery), seed, m, z)
    return _cached(key, lambda: PQIndex.build(data.gallery.matrix(), m, z, seed=seed,
                                              keys=data.gallery.keys))


def _large_matrix(n: int, seed: int) -> np.ndarray:
    """``n`` random unit templates passed through compression, as a gallery holds them."""
    def build():
        rng = np.random.default_rng([seed, n])
        out = np.empty((n, DIM), np.float32)
        step = 65536
        for a in range(0, n, step):
            b = min(n, a + step)
            out[a:b] = decompress_rows(*compress_rows(unit_rows(rng.standard_normal((b - a, DIM)))))
        return out
    return _cached(("large", n, seed), build)


def _random_pairs(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    return (unit_rows(rng.standard_normal((n, DIM))), unit_rows(rng.standard_normal((n, DIM))))


def _mate_ranks(searcher_fn, probes, gallery, k):
    ranks = []
    for p in probes:
        ords = searcher_fn(p.template, k).ordinals
        mate = gallery.ordinal(p.mate_key)
        ranks.append(ords.index(mate) + 1 if mate in ords else 0)
    return np.array(ranks)


# -- experiment kinds ---------------------------------------------------------


def exp_compression(cfg, seed):
    rng = np.random.default_rng(seed)
    a, b = _random_pairs(int(cfg.get("pairs", 10_000)), rng)
    ca = decompress_rows(*compress_rows(a))
    cb = decompress_rows(*compress_rows(b))
    orig = np.einsum("ij,ij->i", a.astype(np.float64), b.astype(np.float64))
    comp = np.einsum("ij,ij->i", ca.astype(np.float64), cb.astype(np.float64))
    delta = float(np.max(np.abs(orig - comp)))

    data = _synth(cfg, seed)
    raw = ExactSearcher(data.raw_gallery, data.gallery.keys)
    comp_s = ExactSearcher.from_gallery(data.gallery)
    r_raw = _mate_ranks(raw.search, data.probes, data.gallery, 1)
    r_comp = _mate_ranks(comp_s.search, data.probes, data.gallery, 1)
    rank1_raw, rank1_comp = float(np.mean(r_raw == 1)), float(np.mean(r_comp == 1))
    return {
        "max_abs_cosine_delta": delta,
        "rank1_raw": rank1_raw,
        "rank1_compressed": rank1_comp,
        "rank1_delta_pp": abs(rank1_raw - rank1_comp) * 100.0,
    }, {}


def exp_integer(cfg, seed):
    rng = np.random.default_rng(seed)
    a, b = _random_pairs(int(cfg.get("pairs", 1000)), rng)
    ca, cb = compress_rows(a), compress_rows(b)
    da, db = decompress_rows(*ca), decompress_rows(*cb)
    worst = 0.0
    for i in range(a.shape[0]):
        p = CompressedTemplate(ca[0][i], ca[1][i], ca[2][i])
        g = CompressedTemplate(cb[0][i], cb[1][i], cb[2][i])
        ref = float(np.dot(da[i].astype(np.float64), db[i].astype(np.float64)))
        worst = max(worst, abs(integer_score(p, g).value - ref))
    return {"max_abs_diff": worst}, {}


def exp_exact_oracle(cfg, seed):
    rng = np.random.default_rng(seed)
    n = int(cfg.get("gallery", 10_000))
    ks = cfg.get("k", [1, 10, 100])
    shards = cfg.get("shards", [1, 4, 8])
    trials = int(cfg.get("trials", 100))
    mismatches = 0
    for t in range(trials):
        mat = unit_rows(rng.standard_normal((n, DIM)))
        if t % 4 == 0:
            # duplicate rows force exact score ties
            mat[rng.integers(0, n, 50)] = mat[rng.integers(0, n, 1)]
        es = ExactSearcher(mat)
        q = unit_rows(rng.standard_normal((1, DIM)))[0]
        scores = es.scores(q)
        for k in ks:
            _, want = select_topk(scores.astype(np.float64), np.arange(n), k)
            for s in shards:
                if es.search(q, k, s).ordinals != want.tolist():
                    mismatches += 1
    return {"mismatches": mismatches, "comparisons": trials * len(ks) * len(shards)}, {}


def _latencies(fn, queries) -> np.ndarray:
    out = []
    for q in queries:
        t0 = time.perf_counter()
        fn(q)
        out.append(time.perf_counter() - t0)
    return np.array(out) * 1e3


def _paired_latencies(fa, fb, queries):
    """Time two searches back to back per query so machine drift hits both."""
    a, b = [], []
    for q in queries:
        for fn, out in ((fa, a), (fb, b)):
            t0 = time.perf_counter()
            fn(q)
            out.append(time.perf_counter() - t0)
    return np.array(a) * 1e3, np.array(b) * 1e3


def exp_throughput(cfg, seed):
    n = int(cfg.get("gallery", 1_000_000))
    nq = int(cfg.get("queries", 100))
    threads = int(cfg.get("threads", 8))
    k = int(cfg.get("k", 100))
    es = ExactSearcher(_large_matrix(n, seed))
    queries = unit_rows(np.random.default_rng([seed, 2]).standard_normal((nq, DIM)))
    es.search(queries[0], k)  # warm up kernels and caches
    single = _latencies(lambda q: es.search(q, k, 1), queries)
    multi = _latencies(lambda q: es.search(q, k, threads), queries)
    return {
        "p99_ms_single": float(np.percentile(single, 99)),
        "mean_ms_single": float(single.mean()),
        "p99_ms_threads": float(np.percentile(multi, 99)),
        "mean_ms_threads": float(multi.mean()),
        "speedup_threads": float(np.median(single) / np.median(multi)),
    }, {"cpu_count": os.cpu_count(), "threads": threads}


def exp_pq(cfg, seed):
    data = _synth(cfg, seed)
    t0 = time.perf_counter()
    idx = _synth_pq(cfg, seed)
    build_s = time.perf_counter() - t0
    g = data.gallery

    # distance identity against explicit reconstructions
    rng = np.random.default_rng([seed, 3])
    rows = rng.choice(len(g), size=min(len(g), int(cfg.get("identity_rows", 2000))), replace=False)
    recon = idx.codebooks[np.arange(idx.m)[None, :], idx.codes[rows].astype(np.int64)]
    recon = recon.reshape(rows.size, -1).astype(np.float64)
    worst = 0.0
    for p in data.probes[: int(cfg.get("identity_probes", 20))]:
        q = p.template.features.astype(np.float64)
        naive = ((recon - q) ** 2).sum(axis=1)
        worst = max(worst, float(np.max(np.abs(idx.distances(p.template)[rows] - naive))))

    exact = ExactSearcher.from_gallery(g)
    top_e, top_p, rank_e, rank_p = [], [], [], []
    for p in data.probes:
        e, q = exact.search(p.template, 1), idx.search(p.template, 1)
        mate = g.ordinal(p.mate_key)
        top_e.append(e.ordinals[0])
        top_p.append(q.ordinals[0])
        rank_e.append(e.ordinals[0] == mate)
        rank_p.append(q.ordinals[0] == mate)
    r1e, r1p = float(np.mean(rank_e)), float(np.mean(rank_p))

    # latency at the large scale: same codebooks, large random gallery
    n_large = int(cfg.get("latency_gallery", 1_000_000))
    big = _large_matrix(n_large, seed)
    big_idx = _cached(("large-pq", n_large, seed, id(idx)),
                      lambda: PQIndex(idx.codebooks, idx.quantize_rows(big)))
    big_exact = ExactSearcher(big)
    nq = int(cfg.get("latency_queries", 50))
    queries = unit_rows(np.random.default_rng([seed, 4]).standard_normal((nq, DIM)))
    big_exact.search(queries[0], 1)
    big_idx.search(queries[0], 1)
    lat_e, lat_p = _paired_latencies(lambda q: big_exact.search(q, 100),
                                     lambda q: big_idx.search(q, 100), queries)
    return {
        "max_distance_identity_error": worst,
        "recall_at_1": float(np.mean(np.array(top_e) == np.array(top_p))),
        "rank1_exact": r1e,
        "rank1_pq": r1p,
        "rank1_drop_pp": (r1e - r1p) * 100.0,
        "code_bytes": idx.code_bytes,
        "latency_ratio": float(np.median(lat_p) / np.median(lat_e)),
        "median_ms_exact": float(np.median(lat_e)),
        "median_ms_pq": float(np.median(lat_p)),
        "build_s": build_s,
    }, {}


def exp_mmap(cfg, seed):
    rng = np.random.default_rng(seed)
    n_sets = int(cfg.get("sets", 500))
    lo, hi = cfg.get("minutiae_range", [10, 30])
    sigma = float(cfg.get("sigma", DEFAULT_SIGMA))
    sep = float(cfg.get("separation_sigmas", 4.0)) * sigma
    pos_tol = float(cfg.get("position_tolerance", 1.0))
    ang_tol = float(cfg.get("angle_tolerance", math.pi / 12))
    total = recovered = spurious = 0
    superposition = permutation = True
    for _ in range(n_sets):
        s = random_separated_set(rng, int(rng.integers(lo, hi + 1)), sep, border=8.0)
        enc = encode_map(s, sigma_s=sigma)
        dec = decode_map(enc).array
        truth = s.array
        total += truth.shape[0]
        used = np.zeros(dec.shape[0], bool)
        for x, y, th in truth:
            d = np.hypot(dec[:, 0] - x, dec[:, 1] - y)
            ok = (d <= pos_tol) & (orientation_diff(dec[:, 2], th) <= ang_tol) & ~used
            if ok.any():
                used[np.flatnonzero(ok)[np.argmin(d[ok])]] = True
                recovered += 1
        spurious += int((~used).sum())

        half = truth.shape[0] // 2
        a = encode_map(MinutiaeSet(truth[:half], s.width, s.height), sigma_s=sigma)
        b = encode_map(MinutiaeSet(truth[half:], s.width, s.height), sigma_s=sigma)
        superposition &= bool(np.array_equal(a.values + b.values, enc.values))
        perm = truth[rng.permutation(truth.shape[0])]
        permutation &= bool(np.array_equal(
            encode_map(MinutiaeSet(perm, s.width, s.height), sigma_s=sigma).values, enc.values))
    return {
        "recovered_fraction": recovered / total,
        "spurious": spurious,
        "superposition_exact": superposition,
        "permutation_exact": permutation,
    }, {"minutiae": total}


def exp_rerank(cfg, seed):
    data = _synth(cfg, seed)
    g = data.gallery
    fusion = FusionConfig(k=int(cfg.get("k", 500)), normalization=cfg.get("normalization", "none"))
    exact = ExactSearcher.from_gallery(g)
    r_stage, r_fused, demoted = [], [], 0
    for p in data.probes:
        mate = g.ordinal(p.mate_key)
        stage1 = exact.search(p.template, fusion.k)
        m = minutiae_scores(p.minutiae, g, stage1.ordinals)
        fused = rerank(stage1, p.minutiae, g, fusion, m_scores=m).ordinals
        s_ords = stage1.ordinals
        r_stage.append(s_ords.index(mate) + 1 if mate in s_ords else 0)
        r_fused.append(fused.index(mate) + 1 if mate in fused else 0)
        if r_stage[-1] == 1 and m[0] >= m.max() and r_fused[-1] != 1:
            demoted += 1
    r1s = float(np.mean(np.array(r_stage) == 1))
    r1f = float(np.mean(np.array(r_fused) == 1))
    return {
        "rank1_exact": r1s,
        "rank1_rerank": r1f,
        "rank1_gain_pp": (r1f - r1s) * 100.0,
        "demoted_with_max_minutiae": demoted,
        "mate_in_candidates": float(np.mean(np.array(r_stage) > 0)),
    }, {}


def exp_fusion(cfg, seed):
    data = _synth(cfg, seed)
    g = data.gallery
    mat = g.matrix()
    rng = np.random.default_rng([seed, 5])
    per_probe = int(cfg.get("imposters_per_probe", 100))
    far = float(cfg.get("far", 1e-3))
    gt, gm, it, im = [], [], [], []
    for p in data.probes:
        mate = g.ordinal(p.mate_key)
        q = p.template.features
        gt.append(float(mat[mate] @ q))
        gm.append(minutiae_score(p.minutiae, g[mate].minutiae))
        others = rng.choice(len(g) - 1, size=per_probe, replace=False)
        others = others + (others >= mate)
        it.extend((mat[others] @ q).astype(np.float64).tolist())
        im.extend(minutiae_score(p.minutiae, g[o].minutiae) for o in others.tolist())
    gt, gm, it, im = map(np.asarray, (gt, gm, it, im))
    tar_t = tar_at_far(gt, it, far)
    tar_m = tar_at_far(gm, im, far)
    tar_f = tar_at_far(gt + gm, it + im, far)
    return {
        "tar_template": tar_t,
        "tar_minutiae": tar_m,
        "tar_fused": tar_f,
        "fused_minus_best": tar_f - max(tar_t, tar_m),
        "imposter_pairs": int(it.size),
    }, {"far": far}


def exp_formats(cfg, seed):
    rng = np.random.default_rng(seed)
    n = int(cfg.get("records", 2000))
    mat = unit_rows(rng.standard_normal((n, DIM)))
    codes, lo, hi = compress_rows(mat)
    g = Gallery()
    for i in range(n):
        m = None
        if i % 2 == 0:
            pts = np.column_stack([rng.uniform(0, 448, 20), rng.uniform(0, 448, 20),
                                   rng.uniform(0, 2 * math.pi, 20)])
            m = MinutiaeSet(pts, 448, 448)
        g.enroll(GalleryRecord(f"id-{i}", i % 10, CompressedTemplate(codes[i], lo[i], hi[i]), m))
    blob = g.to_bytes()
    g2 = Gallery.from_bytes(blob)
    idx = PQIndex.build(g.matrix(), int(cfg.get("m", 64)), int(cfg.get("z", 256)), seed=seed,
                        max_iter=int(cfg.get("pq_iterations", 10)))
    pblob = idx.to_bytes()
    idx2 = PQIndex.from_bytes(pblob)
    header = _PQ_HEAD.size + idx.codebooks.size * 4 + 8
    return {
        "gallery_roundtrip": g2 == g and g2.to_bytes() == blob,
        "pq_roundtrip": idx2.to_bytes() == pblob and np.array_equal(idx2.codes, idx.codes),
        "compressed_size": len(CompressedTemplate(codes[0], lo[0], hi[0]).to_bytes()),
        "pq_code_bytes": idx.code_bytes,
        "pq_file_code_bytes_per_record": (len(pblob) - header) // len(idx),
    }, {}


KINDS = {
    "compression": exp_compression,
    "integer": exp_integer,
    "exact_oracle": exp_exact_oracle,
    "throughput": exp_throughput,
    "pq": exp_pq,
    "mmap": exp_mmap,
    "rerank": exp_rerank,
    "fusion": exp_fusion,
    "formats": exp_formats,
}


def run_suite(paths=None, stream=None) -> list[ExperimentResult]:
    results = []
    for p in paths or packaged_manifests():
        r = run_experiment(p)
        if stream is not None:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  ({r.runtime_s:.1f} s)", file=stream)
        results.append(r)
    return results


