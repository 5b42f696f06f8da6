"""Enrollment store: identity keys, compressed templates, optional minutiae.

File layout (little-endian)::

    "DPGL" | u16 version | u64 N
    N x record:
        u32 body_len | u16 id_len | id (utf-8) | u8 finger | u8 flags
        | 200-byte compressed template
        | [if flags & 1] f64 width | f64 height | u32 n | n x (f64 x, f64 y, f64 theta)

``body_len`` counts the bytes after itself, so a reader can skip records
without decoding them.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ConflictError, FormatError, InvalidInputError, VersionError
from .minutiae import MinutiaeSet
from .template import COMPRESSED_SIZE, DIM, CompressedTemplate, decompress_rows

MAGIC = b"DPGL"
VERSION = 1
_HEAD = struct.Struct("<4sHQ")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_REC_TAIL = struct.Struct("<BB")
_MIN_HEAD = struct.Struct("<ddI")
HAS_MINUTIAE = 1

Key = tuple[str, int]


@dataclass(frozen=True)
class GalleryRecord:
    subject_id: str
    finger_index: int
    template: CompressedTemplate
    minutiae: Optional[MinutiaeSet] = None

    def __post_init__(self):
        if not isinstance(self.subject_id, str) or not self.subject_id:
            raise InvalidInputError("subject_id must be a non-empty string")
        if len(self.subject_id.encode("utf-8")) > 0xFFFF:
            raise InvalidInputError("subject_id too long")
        if not 0 <= int(self.finger_index) <= 9:
            raise InvalidInputError(f"finger_index must be 0-9, got {self.finger_index}")
        object.__setattr__(self, "finger_index", int(self.finger_index))

    @property
    def key(self) -> Key:
        return (self.subject_id, self.finger_index)


class Gallery:
    """Ordered collection of records; the ordinal is the enrollment position."""

    def __init__(self, records=()):
        self._records: list[GalleryRecord] = []
        self._index: dict[Key, int] = {}
        self._matrix: Optional[np.ndarray] = None
        for r in records:
            self.enroll(r)

    def enroll(self, record: GalleryRecord) -> "Gallery":
        if record.key in self._index:
            raise ConflictError(f"{record.key} already enrolled")
        self._index[record.key] = len(self._records)
        self._records.append(record)
        self._matrix = None
        return self

    def __len__(self):
        return len(self._records)

    def __iter__(self) -> Iterator[GalleryRecord]:
        return iter(self._records)

    def __getitem__(self, ordinal: int) -> GalleryRecord:
        return self._records[ordinal]

    def __eq__(self, other):
        if not isinstance(other, Gallery):
            return NotImplemented
        return self._records == other._records

    def ordinal(self, key: Key) -> int:
        return self._index[key]

    def get(self, key: Key) -> GalleryRecord:
        return self._records[self._index[key]]

    def __contains__(self, key) -> bool:
        return key in self._index

    @property
    def keys(self) -> list[Key]:
        return [r.key for r in self._records]

    @property
    def has_minutiae(self) -> bool:
        return all(r.minutiae is not None for r in self._records)

    def matrix(self) -> np.ndarray:
        """Decompressed ``(N, 192)`` float32 templates, built once and cached."""
        if self._matrix is None:
            if not self._records:
                self._matrix = np.zeros((0, DIM), np.float32)
            else:
                codes = np.stack([r.template.codes for r in self._records])
                lo = np.array([r.template.lo for r in self._records])
                hi = np.array([r.template.hi for r in self._records])
                self._matrix = decompress_rows(codes, lo, hi)
            self._matrix.flags.writeable = False
        return self._matrix

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_HEAD.pack(MAGIC, VERSION, len(self._records))]
        for r in self._records:
            ident = r.subject_id.encode("utf-8")
            body = [_U16.pack(len(ident)), ident,
                    _REC_TAIL.pack(r.finger_index, HAS_MINUTIAE if r.minutiae is not None else 0),
                    r.template.to_bytes()]
            if r.minutiae is not None:
                m = r.minutiae
                body.append(_MIN_HEAD.pack(float(m.width), float(m.height), len(m)))
                body.append(m.array.astype("<f8").tobytes())
            blob = b"".join(body)
            parts.append(_U32.pack(len(blob)))
            parts.append(blob)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Gallery":
        view = memoryview(data)
        if len(data) < _HEAD.size:
            raise FormatError("truncated gallery header", len(data))
        magic, version, n = _HEAD.unpack_from(view, 0)
        if magic != MAGIC:
            raise FormatError("not a gallery file (bad magic)", 0)
        if version != VERSION:
            raise VersionError(f"gallery version {version}, this build reads {VERSION}", 4)
        pos = _HEAD.size
        records = []
        for _ in range(n):
            rec, pos = _read_record(view, pos)
            records.append(rec)
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes after last record", pos)
        g = cls()
        for r in records:
            try:
                g.enroll(r)
            except ConflictError as exc:
                raise FormatError(f"duplicate key {r.key}", pos) from exc
        return g

    def save(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Gallery":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _need(view, pos, size, what):
    if pos + size > len(view):
        raise FormatError(f"truncated {what}", len(view))


def _read_record(view, pos):
    _need(view, pos, 4, "record length")
    (body_len,) = _U32.unpack_from(view, pos)
    start = pos + 4
    end = start + body_len
    _need(view, start, body_len, "record body")
    p = start
    try:
        _need(view, p, 2, "id length")
        (id_len,) = _U16.unpack_from(view, p)
        p += 2
        _need(view, p, id_len + 2 + COMPRESSED_SIZE, "record header")
        ident = bytes(view[p:p + id_len]).decode("utf-8")
        p += id_len
        finger, flags = _REC_TAIL.unpack_from(view, p)
        p += 2
        template = CompressedTemplate.from_bytes(bytes(view[p:p + COMPRESSED_SIZE]), p)
        p += COMPRESSED_SIZE
        minutiae = None
        if flags & HAS_MINUTIAE:
            _need(view, p, _MIN_HEAD.size, "minutiae header")
            w, h, count = _MIN_HEAD.unpack_from(view, p)
            p += _MIN_HEAD.size
            _need(view, p, count * 24, "minutiae block")
            arr = np.frombuffer(view, dtype="<f8", count=count * 3, offset=p).reshape(count, 3)
            p += count * 24
            minutiae = MinutiaeSet(arr.astype(np.float64), _whole(w), _whole(h))
        if p != end:
            raise FormatError("record length does not match its contents", p)
        return GalleryRecord(ident, finger, template, minutiae), end
    except (UnicodeDecodeError, InvalidInputError) as exc:
        raise FormatError(f"invalid record: {exc}", p) from exc


def _whole(v: float):
    return int(v) if float(v).is_integer() else v


def enroll(g: Gallery, r: GalleryRecord) -> Gallery:
    return g.enroll(r)


def save(g: Gallery, path) -> None:
    g.save(path)


def load(path) -> Gallery:
    return Gallery.load(path)
