"""Product quantization: codebook training, encoding, and ADC top-k search.

Each template is cut into ``m`` equal sub-vectors; sub-vector ``i`` is
replaced by the index of its nearest centroid in codebook ``i`` (``z``
centroids, trained offline by k-means). A probe is scored against a code row
by summing ``m`` entries of a per-probe ``m x z`` table of squared
sub-vector distances, which equals the squared distance between the probe
and the code's reconstruction.

Index file layout (little-endian)::

    "DPPQ" | u16 version | u32 d | u32 m | u32 z
    | m*z*(d/m) float32 centroids (codebook, centroid, coordinate)
    | u64 N | N code rows of ceil(m*log2(z)/8) bytes (bit-packed indices)
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numba
import numpy as np

from ._kernels import STRIDE, adc_all, adc_push
from .errors import FormatError, InvalidInputError, VersionError
from .search import BLOCK_ROWS, Candidate, CandidateList, as_vector, run_shards, select_topk
from .template import MatchScore

MAGIC = b"DPPQ"
VERSION = 1
_HEAD = struct.Struct("<4sHIII")
_COUNT = struct.Struct("<Q")

DEFAULT_M = 64
DEFAULT_Z = 256
# Training uses at most this many samples per centroid (deterministic subsample).
MAX_POINTS_PER_CENTROID = 256


@dataclass(frozen=True, eq=False)
class Codebook:
    sub_index: int
    centroids: np.ndarray


@numba.njit(cache=True, nogil=True)
def _nearest(x, centroids, labels, dists):
    """Exact nearest centroid per row of ``x``; ties go to the lowest index."""
    n, s = x.shape
    z = centroids.shape[0]
    for r in range(n):
        best = np.inf
        arg = 0
        for j in range(z):
            acc = 0.0
            for t in range(s):
                diff = np.float64(x[r, t]) - np.float64(centroids[j, t])
                acc += diff * diff
            if acc < best:
                best = acc
                arg = j
        labels[r] = arg
        dists[r] = best


def nearest_centroids(x: np.ndarray, centroids: np.ndarray):
    n = x.shape[0]
    labels = np.empty(n, np.int64)
    dists = np.empty(n, np.float64)
    _nearest(np.ascontiguousarray(x), np.ascontiguousarray(centroids), labels, dists)
    return labels, dists


def _kmeans_pp(x: np.ndarray, z: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((z, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, z):
        cdf = np.cumsum(d2)
        if cdf[-1] <= 0:
            idx = rng.integers(n)
        else:
            idx = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), n - 1)
        centers[c] = x[idx]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def kmeans(x: np.ndarray, z: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4):
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iter`` rounds or once the relative drop in mean squared
    distortion falls below ``tol``. An empty cluster is reseeded with the
    point of the largest cluster that lies farthest from its centroid.
    Returns ``(centroids, distortion)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < z:
        raise InvalidInputError(f"k-means needs at least {z} samples, got {n}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, z, rng)
    labels, dists = nearest_centroids(x, centers)
    distortion = dists.mean()
    for _ in range(max_iter):
        counts = np.bincount(labels, minlength=z)
        sums = np.empty_like(centers)
        for t in range(x.shape[1]):
            sums[:, t] = np.bincount(labels, weights=x[:, t], minlength=z)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
        for empty in np.flatnonzero(~filled):
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(((x[members] - centers[big]) ** 2).sum(axis=1))]
            centers[empty] = x[far]
            labels[far] = empty
            counts[big] -= 1
            counts[empty] = 1
        labels, dists = nearest_centroids(x, centers)
        new = dists.mean()
        done = distortion <= 0 or (distortion - new) / distortion < tol
        distortion = new
        if done:
            break
    return centers, float(distortion)


def train(samples, m: int = DEFAULT_M, z: int = DEFAULT_Z, seed: int = 0,
          max_iter: int = 100, tol: float = 1e-4) -> list[Codebook]:
    """Train one k-means codebook per sub-space.

    At most ``256 * z`` samples are used (a seeded subsample), matching the
    usual PQ training budget.
    """
    x = _as_matrix(samples)
    d = x.shape[1]
    if m < 1 or d % m:
        raise InvalidInputError(f"m={m} must divide d={d}")
    if not 1 <= z <= 256:
        raise InvalidInputError("z must be in [1, 256] so indices fit one byte")
    if x.shape[0] < z:
        raise InvalidInputError(f"need at least z={z} samples, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    cap = MAX_POINTS_PER_CENTROID * z
    if x.shape[0] > cap:
        x = x[np.sort(rng.choice(x.shape[0], cap, replace=False))]
    sub = d // m
    seeds = rng.integers(0, 2**32, size=m)
    books = []
    for i in range(m):
        centers, _ = kmeans(x[:, i * sub:(i + 1) * sub], z, int(seeds[i]), max_iter, tol)
        books.append(Codebook(i, centers.astype(np.float32)))
    return books


def _as_matrix(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        x = samples
    else:
        x = np.stack([getattr(s, "features", s) for s in samples])
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise InvalidInputError("samples must form a 2-D matrix")
    return x


def code_bytes(m: int, z: int) -> int:
    return math.ceil(m * _bits(z) / 8)


def _bits(z: int) -> int:
    return max(1, math.ceil(math.log2(z))) if z > 1 else 1


def pack_codes(codes: np.ndarray, z: int) -> bytes:
    bits = _bits(z)
    if bits == 8:
        return np.ascontiguousarray(codes, dtype=np.uint8).tobytes()
    unpacked = np.unpackbits(codes.astype(np.uint8)[:, :, None], axis=2)[:, :, 8 - bits:]
    flat = unpacked.reshape(codes.shape[0], codes.shape[1] * bits)
    return np.packbits(flat, axis=1).tobytes()


def unpack_codes(data: bytes, n: int, m: int, z: int) -> np.ndarray:
    bits = _bits(z)
    row = code_bytes(m, z)
    raw = np.frombuffer(data, dtype=np.uint8, count=n * row).reshape(n, row)
    if bits == 8:
        return raw.copy()
    flat = np.unpackbits(raw, axis=1)[:, : m * bits].reshape(n, m, bits)
    padded = np.concatenate([np.zeros((n, m, 8 - bits), np.uint8), flat], axis=2)
    return np.packbits(padded, axis=2).reshape(n, m)


class PQIndex:
    """Trained codebooks plus the code rows of an enrolled gallery."""

    def __init__(self, codebooks, codes=None, keys=None):
        if isinstance(codebooks, np.ndarray):
            cb = codebooks
        else:
            cb = np.stack([c.centroids for c in sorted(codebooks, key=lambda c: c.sub_index)])
        cb = np.ascontiguousarray(cb, dtype=np.float32)
        if cb.ndim != 3 or not np.all(np.isfinite(cb)):
            raise InvalidInputError("codebooks must be a finite (m, z, d/m) array")
        self.codebooks = cb
        self.m, self.z, self.sub = cb.shape
        self.d = self.m * self.sub
        if self.z > 256:
            raise InvalidInputError("z must be <= 256")
        if codes is None:
            codes = np.zeros((0, self.m), np.uint8)
        codes = np.ascontiguousarray(codes, dtype=np.uint8)
        if codes.ndim != 2 or codes.shape[1] != self.m:
            raise InvalidInputError(f"code rows must have {self.m} entries")
        if codes.size and int(codes.max()) >= self.z:
            raise InvalidInputError("code index out of codebook range")
        self.codes = codes
        self.keys = keys

    @classmethod
    def build(cls, matrix, m: int = DEFAULT_M, z: int = DEFAULT_Z, seed: int = 0,
              keys=None, train_samples=None, **kw) -> "PQIndex":
        """Train on ``train_samples`` (default: the gallery itself) and encode ``matrix``."""
        x = _as_matrix(matrix)
        books = train(x if train_samples is None else train_samples, m, z, seed, **kw)
        idx = cls(books, keys=keys)
        idx.codes = idx.quantize_rows(x)
        return idx

    def __len__(self):
        return self.codes.shape[0]

    def codebook(self, i: int) -> Codebook:
        return Codebook(i, self.codebooks[i])

    @property
    def code_bytes(self) -> int:
        return code_bytes(self.m, self.z)

    def _split(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], self.m, self.sub)

    def quantize_rows(self, matrix) -> np.ndarray:
        x = self._split(_as_matrix(matrix))
        out = np.empty((x.shape[0], self.m), np.uint8)
        for i in range(self.m):
            labels, _ = nearest_centroids(np.ascontiguousarray(x[:, i, :]), self.codebooks[i])
            out[:, i] = labels
        return out

    def quantize(self, t) -> np.ndarray:
        """Nearest-centroid index per sub-space (``m`` bytes)."""
        return self.quantize_rows(as_vector(t)[None, :])[0]

    def reconstruct(self, code) -> np.ndarray:
        code = np.asarray(code, dtype=np.int64)
        return self.codebooks[np.arange(self.m), code].reshape(-1)

    def build_table(self, probe) -> np.ndarray:
        """``(m, z)`` table of squared distances from probe sub-vectors to centroids."""
        q = as_vector(probe).astype(np.float64).reshape(self.m, 1, self.sub)
        diff = q - self.codebooks.astype(np.float64)
        return (diff * diff).sum(axis=2)

    def _scan_table(self, probe) -> np.ndarray:
        table = np.zeros((self.m, STRIDE), np.float64)
        table[:, :self.z] = self.build_table(probe)
        return table.ravel()

    def distances(self, probe) -> np.ndarray:
        """Asymmetric distance from ``probe`` to every code row."""
        table = self._scan_table(probe)
        return adc_all(self.codes, table, np.empty(len(self), np.float64))

    def search(self, probe, k: int, shards: int = 1) -> CandidateList:
        """Top-k rows by ascending asymmetric distance; ties by ordinal."""
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        table = self._scan_table(probe)
        n = len(self)
        if n == 0:
            return CandidateList([], k)
        n_blocks = -(-n // BLOCK_ROWS)

        def scan(first, stop):
            heap_v = np.empty(k, np.float64)
            heap_o = np.empty(k, np.int64)
            size = adc_push(self.codes, table, first * BLOCK_ROWS, min(stop * BLOCK_ROWS, n),
                            heap_v, heap_o, 0, k)
            return heap_v[:size], heap_o[:size]

        parts = run_shards(scan, n_blocks, shards)
        vals, ords = select_topk(np.concatenate([p[0] for p in parts]),
                                 np.concatenate([p[1] for p in parts]), k)
        items = [Candidate(o, self.keys[o] if self.keys is not None else None,
                           MatchScore(-v, "pq-distance"))
                 for v, o in zip(vals.tolist(), ords.tolist())]
        return CandidateList(items, k)

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        return b"".join([
            _HEAD.pack(MAGIC, VERSION, self.d, self.m, self.z),
            self.codebooks.astype("<f4").tobytes(),
            _COUNT.pack(len(self)),
            pack_codes(self.codes, self.z),
        ])

    @classmethod
    def from_bytes(cls, data: bytes, keys=None) -> "PQIndex":
        if len(data) < _HEAD.size:
            raise FormatError("truncated PQ index header", len(data))
        magic, version, d, m, z = _HEAD.unpack_from(data)
        if magic != MAGIC:
            raise FormatError("not a PQ index file (bad magic)", 0)
        if version != VERSION:
            raise VersionError(f"PQ index version {version}, this build reads {VERSION}", 4)
        if m == 0 or d % m or not 1 <= z <= 256:
            raise FormatError(f"invalid shape d={d} m={m} z={z}", 10)
        pos = _HEAD.size
        nfloat = m * z * (d // m)
        if len(data) < pos + nfloat * 4 + _COUNT.size:
            raise FormatError("truncated codebooks", len(data))
        books = np.frombuffer(data, dtype="<f4", count=nfloat, offset=pos).reshape(m, z, d // m)
        pos += nfloat * 4
        (n,) = _COUNT.unpack_from(data, pos)
        pos += _COUNT.size
        expected = pos + n * code_bytes(m, z)
        if len(data) != expected:
            raise FormatError(f"expected {expected} bytes for {n} code rows", min(len(data), expected))
        codes = unpack_codes(data[pos:], n, m, z)
        try:
            return cls(books.astype(np.float32), codes, keys)
        except InvalidInputError as exc:
            raise FormatError(str(exc), pos) from exc

    def save(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, keys=None) -> "PQIndex":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), keys)


def quantize(idx: PQIndex, t) -> np.ndarray:
    return idx.quantize(t)


def build_table(idx: PQIndex, probe) -> np.ndarray:
    return idx.build_table(probe)


def pq_search_topk(idx: PQIndex, probe, k: int, shards: int = 1) -> CandidateList:
    return idx.search(probe, k, shards)


def similarity_from_distance(dist: float) -> float:
    """Cosine-equivalent score of a squared distance between unit vectors."""
    return 1.0 - dist / 2.0
