"""Minutiae sets and the 6-channel minutiae-map heatmap codec.

A minutia at ``(x, y)`` with orientation ``theta`` contributes to map cell
``(i, j, k)`` the product of a spatial Gaussian in the distance to ``(i, j)``
and an orientation term in the angular distance between ``theta`` and the
channel center ``2*k*pi/6``. Arrays are indexed ``values[y, x, k]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidInputError, VersionError

TWO_PI = 2.0 * math.pi
CHANNELS = 6
CHANNEL_CENTERS = np.arange(CHANNELS) * TWO_PI / CHANNELS

MAP_SIZE = 128
IMAGE_SIZE = 448
DEFAULT_SIGMA = 1.5
DEFAULT_PEAK_THRESHOLD = 0.25
DEFAULT_NMS_RADIUS = 3.0
TRUNCATE_SIGMAS = 4.0

# Contributions are snapped to multiples of 2**-40 before accumulation. Sums of
# such values are exact in float64 (while below 2**13), so the map does not
# depend on the order minutiae are added in.
_FIXED_POINT_BITS = 40

_MAP_MAGIC = b"DPMM"
_MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sHIIIfB")


class Minutia(NamedTuple):
    x: float
    y: float
    theta: float


def wrap_angle(theta):
    """Map angles into ``[0, 2*pi)``."""
    t = np.mod(theta, TWO_PI)
    # mod of a tiny negative number rounds up to exactly 2*pi
    return np.where(t >= TWO_PI, 0.0, t)


def orientation_diff(a, b):
    """Angular distance in ``[0, pi]``; works elementwise on arrays."""
    d = np.fmod(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64), TWO_PI)
    ad = np.abs(d)
    out = np.where(ad <= math.pi, ad, TWO_PI - ad)
    return float(out) if out.ndim == 0 else out


class MinutiaeSet:
    """Ordered minutiae of one impression inside a ``width x height`` frame."""

    __slots__ = ("_array", "width", "height")

    def __init__(self, minutiae, width: float, height: float):
        if not (width > 0 and height > 0):
            raise InvalidInputError(f"frame must be positive, got {width}x{height}")
        arr = np.array(list(minutiae) if not isinstance(minutiae, np.ndarray) else minutiae,
                       dtype=np.float64)
        if arr.size == 0:
            arr = np.zeros((0, 3))
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise InvalidInputError(f"minutiae must be (n, 3) triples, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("minutiae contain non-finite values")
        x, y = arr[:, 0], arr[:, 1]
        if np.any(x < 0) or np.any(x >= width) or np.any(y < 0) or np.any(y >= height):
            raise InvalidInputError(f"minutia outside the {width}x{height} frame")
        arr[:, 2] = wrap_angle(arr[:, 2])
        arr.flags.writeable = False
        self._array = arr
        self.width = width
        self.height = height

    @property
    def array(self) -> np.ndarray:
        """Read-only ``(n, 3)`` float64 array of ``x, y, theta`` rows."""
        return self._array

    @property
    def minutiae(self) -> tuple[Minutia, ...]:
        return tuple(Minutia(*map(float, row)) for row in self._array)

    def __len__(self):
        return self._array.shape[0]

    def __iter__(self):
        return iter(self.minutiae)

    def __eq__(self, other):
        if not isinstance(other, MinutiaeSet):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and np.array_equal(self._array, other._array))

    def __repr__(self):
        return f"MinutiaeSet(n={len(self)}, frame={self.width}x{self.height})"

    def to_text(self) -> str:
        lines = [f"{_num(self.width)} {_num(self.height)} {len(self)}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self._array]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MinutiaeSet":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FormatError("empty minutiae file", 0)
        head = lines[0].split()
        try:
            w, h, n = float(head[0]), float(head[1]), int(head[2])
        except (IndexError, ValueError):
            raise FormatError("header must be 'w h n'", 1) from None
        if len(head) != 3 or len(lines) - 1 != n:
            raise FormatError(f"header announces {n} minutiae, found {len(lines) - 1}", 1)
        rows = []
        for lineno, ln in enumerate(lines[1:], start=2):
            parts = ln.split()
            try:
                if len(parts) != 3:
                    raise ValueError
                rows.append([float(p) for p in parts])
            except ValueError:
                raise FormatError(f"bad minutia line {ln!r}", lineno) from None
        try:
            return cls(np.array(rows).reshape(-1, 3), _int_if_whole(w), _int_if_whole(h))
        except InvalidInputError as exc:
            raise FormatError(str(exc), 1) from exc


def _num(v) -> str:
    v = _int_if_whole(v)
    return str(v) if isinstance(v, int) else repr(float(v))


def _int_if_whole(v):
    return int(v) if float(v).is_integer() else float(v)


def scale_set(s: MinutiaeSet, src: tuple, dst: tuple) -> MinutiaeSet:
    """Rescale coordinates linearly from frame ``src`` to frame ``dst``."""
    (sw, sh), (dw, dh) = src, dst
    if min(sw, sh, dw, dh) <= 0:
        raise InvalidInputError("frame dimensions must be positive")
    if (sw, sh) != (s.width, s.height):
        raise InvalidInputError(f"set frame is {s.width}x{s.height}, not {sw}x{sh}")
    arr = s.array.copy()
    arr[:, 0] = np.minimum(arr[:, 0] * (dw / sw), np.nextafter(dw, 0))
    arr[:, 1] = np.minimum(arr[:, 1] * (dh / sh), np.nextafter(dh, 0))
    return MinutiaeSet(arr, dw, dh)


@dataclass(frozen=True, eq=False)
class MinutiaeMap:
    values: np.ndarray
    sigma_s: float = DEFAULT_SIGMA
    squared_orientation: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != CHANNELS:
            raise InvalidInputError(f"map must be (h, w, {CHANNELS}), got {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InvalidInputError("map values must be finite and non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, MinutiaeMap):
            return NotImplemented
        return (self.sigma_s == other.sigma_s
                and self.squared_orientation == other.squared_orientation
                and np.array_equal(self.values, other.values))

    def to_bytes(self) -> bytes:
        """Header plus row-major little-endian float32 values (lossy to float32)."""
        head = _MAP_HEADER.pack(_MAP_MAGIC, _MAP_VERSION, self.height, self.width,
                                CHANNELS, self.sigma_s, int(self.squared_orientation))
        return head + self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MinutiaeMap":
        if len(data) < _MAP_HEADER.size:
            raise FormatError("truncated minutiae-map header", len(data))
        magic, version, h, w, c, sigma, flags = _MAP_HEADER.unpack_from(data)
        if magic != _MAP_MAGIC:
            raise FormatError("not a minutiae-map file", 0)
        if version != _MAP_VERSION:
            raise VersionError(f"unsupported minutiae-map version {version}", 4)
        expected = _MAP_HEADER.size + h * w * c * 4
        if c != CHANNELS or len(data) != expected:
            raise FormatError(f"expected {expected} bytes for a {h}x{w}x{c} map",
                              min(len(data), expected))
        vals = np.frombuffer(data, dtype="<f4", offset=_MAP_HEADER.size).reshape(h, w, c)
        return cls(vals.astype(np.float64), float(sigma), bool(flags))


def _snap(x: np.ndarray) -> np.ndarray:
    return np.ldexp(np.rint(np.ldexp(x, _FIXED_POINT_BITS)), -_FIXED_POINT_BITS)


def orientation_weights(theta: float, sigma_s: float, squared: bool = False) -> np.ndarray:
    """Orientation contribution of ``theta`` to each of the 6 channels."""
    d = orientation_diff(theta, CHANNEL_CENTERS)
    if squared:
        d = d * d
    return np.exp(-d / (2.0 * sigma_s * sigma_s))


def encode_map(s: MinutiaeSet, map_w: int = MAP_SIZE, map_h: int = MAP_SIZE,
               sigma_s: float = DEFAULT_SIGMA, squared_orientation: bool = False) -> MinutiaeMap:
    """Render a minutiae set as an ``(map_h, map_w, 6)`` heatmap.

    Coordinates are rescaled from the set's frame to the map grid. Spatial
    terms beyond ``4 * sigma_s`` are dropped (each is below ``exp(-8)``).
    """
    if map_w <= 0 or map_h <= 0 or sigma_s <= 0:
        raise InvalidInputError("map size and sigma_s must be positive")
    values = np.zeros((map_h, map_w, CHANNELS))
    sx, sy = map_w / s.width, map_h / s.height
    radius = TRUNCATE_SIGMAS * sigma_s
    denom = 2.0 * sigma_s * sigma_s
    for x, y, theta in s.array:
        mx, my = x * sx, y * sy
        x0, x1 = max(0, math.ceil(mx - radius)), min(map_w - 1, math.floor(mx + radius))
        y0, y1 = max(0, math.ceil(my - radius)), min(map_h - 1, math.floor(my + radius))
        if x0 > x1 or y0 > y1:
            continue
        gx = (np.arange(x0, x1 + 1) - mx) ** 2
        gy = (np.arange(y0, y1 + 1) - my) ** 2
        d2 = gy[:, None] + gx[None, :]
        spatial = np.where(d2 <= radius * radius, np.exp(-d2 / denom), 0.0)
        orient = orientation_weights(theta, sigma_s, squared_orientation)
        values[y0:y1 + 1, x0:x1 + 1, :] += _snap(spatial[:, :, None] * orient[None, None, :])
    return MinutiaeMap(values, sigma_s, squared_orientation)


def decode_map(m: MinutiaeMap, peak_threshold: float = DEFAULT_PEAK_THRESHOLD,
               nms_radius: float = DEFAULT_NMS_RADIUS) -> MinutiaeSet:
    """Recover a minutiae set (in map coordinates) from a heatmap.

    Peaks are 8-neighborhood local maxima of the channel-summed map above
    ``peak_threshold``, visited strongest first; a peak closer than
    ``nms_radius`` to an already accepted one is suppressed. Orientation is
    the circular mean of the channel centers weighted by the channel values
    at the peak.
    """
    total = m.values.sum(axis=2)
    local_max = ndimage.maximum_filter(total, size=3, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((total >= local_max) & (total > peak_threshold))
    order = np.lexsort((xs, ys, -total[ys, xs]))
    kept: list[tuple[int, int]] = []
    r2 = nms_radius * nms_radius
    for idx in order:
        y, x = int(ys[idx]), int(xs[idx])
        if all((x - kx) ** 2 + (y - ky) ** 2 >= r2 for kx, ky in kept):
            kept.append((x, y))
    out = []
    for x, y in kept:
        w = m.values[y, x]
        theta = math.atan2(float(w @ np.sin(CHANNEL_CENTERS)), float(w @ np.cos(CHANNEL_CENTERS)))
        out.append((float(x), float(y), theta))
    return MinutiaeSet(np.array(out).reshape(-1, 3), m.width, m.height)


def random_separated_set(rng: np.random.Generator, n: int, min_dist: float,
                         width: float = MAP_SIZE, height: float = MAP_SIZE,
                         border: float = 8.0, max_tries: int = 10000) -> MinutiaeSet:
    """Rejection-sample ``n`` minutiae with pairwise distance above ``min_dist``."""
    pts: list[tuple[float, float, float]] = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > max_tries:
            raise InvalidInputError(f"could not place {n} minutiae {min_dist} apart")
        x = rng.uniform(border, width - border)
        y = rng.uniform(border, height - border)
        if all((x - px) ** 2 + (y - py) ** 2 > min_dist ** 2 for px, py, _ in pts):
            pts.append((x, y, rng.uniform(0, TWO_PI)))
    return MinutiaeSet(np.array(pts).reshape(-1, 3), width, height)

