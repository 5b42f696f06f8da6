"""Fixed-length templates, 8-bit compression, and similarity scoring.

A template is a unit-length 192-d float vector. Compression maps it to one
byte per feature using per-template min-max normalization and keeps the
minimum and maximum as two little-endian float32 scalars, giving a 200-byte
record.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError

DIM = 192
LEVELS = 255
COMPRESSED_SIZE = DIM + 8
_SCALARS = struct.Struct("<ff")

SCORE_TAGS = ("cosine", "pq-distance", "fused")


@dataclass(frozen=True)
class MatchScore:
    value: float
    tag: str = "cosine"

    def __post_init__(self):
        if self.tag not in SCORE_TAGS:
            raise InvalidInputError(f"unknown score tag {self.tag!r}")
        if self.tag == "cosine" and not -1.0 <= self.value <= 1.0:
            raise InvalidInputError(f"cosine score {self.value} outside [-1, 1]")

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True, eq=False)
class Template:
    """Unit-length fixed-length representation (float32, length ``DIM``)."""

    features: np.ndarray

    def __post_init__(self):
        v = np.array(self.features, dtype=np.float32).reshape(-1)
        if v.shape != (DIM,):
            raise InvalidInputError(f"template must have {DIM} features, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("template contains non-finite values")
        norm = float(np.linalg.norm(v.astype(np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise InvalidInputError(f"template norm is {norm:.9f}, expected 1")
        v.flags.writeable = False
        object.__setattr__(self, "features", v)

    @classmethod
    def from_vector(cls, vector) -> "Template":
        """Normalize an arbitrary non-zero finite vector to a template."""
        v = np.asarray(vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("template contains non-finite values")
        norm = np.linalg.norm(v)
        if norm == 0:
            raise InvalidInputError("cannot normalize the zero vector")
        return cls(unit_rows(v[None, :])[0])

    def __eq__(self, other):
        if not isinstance(other, Template):
            return NotImplemented
        return np.array_equal(self.features, other.features)

    def __hash__(self):
        return hash(self.features.tobytes())


def unit_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-normalize ``matrix`` in float64 and return float32 rows."""
    m = np.asarray(matrix, dtype=np.float64)
    return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)


@dataclass(frozen=True, eq=False)
class CompressedTemplate:
    """192 one-byte codes plus the float32 minimum and maximum."""

    codes: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.shape != (DIM,):
            raise InvalidInputError(f"expected {DIM} codes, got shape {codes.shape}")
        if codes.dtype != np.uint8:
            if np.any(codes < 0) or np.any(codes > LEVELS):
                raise InvalidInputError("codes must lie in [0, 255]")
            codes = codes.astype(np.uint8)
        codes = codes.copy()
        codes.flags.writeable = False
        lo, hi = float(np.float32(self.lo)), float(np.float32(self.hi))
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise InvalidInputError(f"invalid scalars lo={self.lo} hi={self.hi}")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def to_bytes(self) -> bytes:
        return self.codes.tobytes() + _SCALARS.pack(self.lo, self.hi)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> "CompressedTemplate":
        if len(data) != COMPRESSED_SIZE:
            raise FormatError(
                f"compressed template needs {COMPRESSED_SIZE} bytes, got {len(data)}",
                offset + min(len(data), COMPRESSED_SIZE),
            )
        codes = np.frombuffer(data[:DIM], dtype=np.uint8)
        lo, hi = _SCALARS.unpack(data[DIM:])
        try:
            return cls(codes, lo, hi)
        except InvalidInputError as exc:
            raise FormatError(str(exc), offset + DIM) from exc

    def __eq__(self, other):
        if not isinstance(other, CompressedTemplate):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())


def compress_rows(matrix: np.ndarray):
    """Vectorized compression of an ``(n, DIM)`` float32 matrix.

    Returns ``(codes, lo, hi)`` with ``codes`` uint8 ``(n, DIM)`` and the
    per-row float32 minimum and maximum.
    """
    m = np.asarray(matrix, dtype=np.float32)
    if m.ndim != 2 or m.shape[1] != DIM:
        raise InvalidInputError(f"expected an (n, {DIM}) matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("template contains non-finite values")
    lo = m.min(axis=1)
    hi = m.max(axis=1)
    # float32 differences and their products with 255 are exact in float64,
    # so floor() sees the correctly rounded quotient.
    m64 = m.astype(np.float64)
    span = (hi.astype(np.float64) - lo.astype(np.float64))[:, None]
    flat = span[:, 0] == 0
    safe = np.where(span == 0, 1.0, span)
    codes = np.floor(LEVELS * (m64 - lo[:, None].astype(np.float64)) / safe)
    codes[flat] = 0
    return codes.astype(np.uint8), lo, hi


def decompress_rows(codes: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Reverse min-max normalization and renormalize each row (float32 out)."""
    codes = np.asarray(codes)
    lo = np.asarray(lo, dtype=np.float64)[:, None]
    hi = np.asarray(hi, dtype=np.float64)[:, None]
    raw = lo + codes.astype(np.float64) * ((hi - lo) / LEVELS)
    flat = (hi == lo)[:, 0]
    if np.any(flat):
        # constant vector: keep its sign, zero maps to the positive diagonal
        sign = np.where(lo[flat, 0] < 0, -1.0, 1.0)
        raw[flat] = sign[:, None]
    return unit_rows(raw)


def compress(t: Template) -> CompressedTemplate:
    if not isinstance(t, Template):
        t = Template(t)
    codes, lo, hi = compress_rows(t.features[None, :])
    return CompressedTemplate(codes[0], float(lo[0]), float(hi[0]))


def decompress(c: CompressedTemplate) -> Template:
    out = decompress_rows(c.codes[None, :], np.array([c.lo]), np.array([c.hi]))
    return Template(out[0])


def cosine_score(p: Template, g: Template) -> MatchScore:
    """Dot product of two unit templates (192 multiplies, 191 adds)."""
    value = float(np.dot(p.features.astype(np.float64), g.features.astype(np.float64)))
    return MatchScore(min(1.0, max(-1.0, value)), "cosine")


def _affine(c: CompressedTemplate):
    # decompressed (pre-normalization) feature i equals offset + step * codes[i]
    if c.hi == c.lo:
        return (-1.0 if c.lo < 0 else 1.0), 0.0
    return c.lo, (c.hi - c.lo) / LEVELS


def integer_score(p: CompressedTemplate, g: CompressedTemplate) -> MatchScore:
    """Cosine of the decompressed templates computed from the raw codes.

    Every per-feature operation is an integer multiply or add on the codes
    (sum, sum of squares, cross sum); the float scalars enter only through a
    constant number of operations, so the per-feature work is what an
    encrypted-domain matcher would have to evaluate.
    """
    cp = p.codes.astype(np.int64)
    cg = g.codes.astype(np.int64)
    sum_p, sum_g = int(cp.sum()), int(cg.sum())
    sq_p, sq_g = int(cp @ cp), int(cg @ cg)
    cross = int(cp @ cg)

    a_p, s_p = _affine(p)
    a_g, s_g = _affine(g)
    dot = DIM * a_p * a_g + a_p * s_g * sum_g + a_g * s_p * sum_p + s_p * s_g * cross
    norm_p = DIM * a_p * a_p + 2 * a_p * s_p * sum_p + s_p * s_p * sq_p
    norm_g = DIM * a_g * a_g + 2 * a_g * s_g * sum_g + s_g * s_g * sq_g
    if norm_p <= 0 or norm_g <= 0:
        return MatchScore(0.0, "cosine")
    value = dot / math.sqrt(norm_p * norm_g)
    return MatchScore(min(1.0, max(-1.0, value)), "cosine")
