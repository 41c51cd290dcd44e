"""Dense 4-D float32 tensors, bilinear point sampling, and a binary file codec."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

MAGIC = b"PTNS"
FORMAT_VERSION = 1
_HEADER_BYTES = 44  # magic(4) + version(4) + ndim(4) + 4 dims(8 each)
_MAX_ELEMENTS = 2**63


class FormatError(Exception):
    """A serialized payload violates its format contract."""


class BorderPolicy(Enum):
    ZERO = "zero"
    CLAMP = "clamp"


@dataclass(frozen=True)
class Tensor:
    """Immutable (batch, channel, row, col) array of finite float32 values.

    Row index grows downward, column index grows rightward. All arithmetic
    that consumes a Tensor accumulates in float64 and casts the result back
    to float32 on construction.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C")
        if arr.ndim != 4:
            raise ValueError(f"tensor must be 4-D (n, c, h, w), got {arr.ndim}-D shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"tensor dimensions must all be >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (no NaN or Inf)")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float32))

    @classmethod
    def full(cls, shape, value) -> "Tensor":
        return cls(np.full(shape, value, dtype=np.float32))


def _fetch(plane: np.ndarray, row: int, col: int, border: BorderPolicy) -> float:
    h, w = plane.shape
    if 0 <= row < h and 0 <= col < w:
        return float(plane[row, col])
    if border is BorderPolicy.CLAMP:
        return float(plane[min(max(row, 0), h - 1), min(max(col, 0), w - 1)])
    return 0.0


def sample_plane(plane: np.ndarray, y: float, x: float, border: BorderPolicy = BorderPolicy.ZERO) -> float:
    """Bilinear sample of a 2-D plane at fractional (y, x), float64 accumulation.

    At integer coordinates the interpolation cell is the one whose lower-left
    corner sits on the coordinate (floor-based), so derivatives taken across
    an integer line use the right-sided limit.
    """
    y0 = math.floor(y)
    x0 = math.floor(x)
    dy = y - y0
    dx = x - x0
    total = 0.0
    for row, wy in ((y0, 1.0 - dy), (y0 + 1, dy)):
        for col, wx in ((x0, 1.0 - dx), (x0 + 1, dx)):
            if wy == 0.0 or wx == 0.0:
                continue
            total += wy * wx * _fetch(plane, row, col, border)
    return total


def bilinear_sample(t: Tensor, n: int, c: int, y: float, x: float,
                    border: BorderPolicy = BorderPolicy.ZERO) -> float:
    """Bilinear sample of one (batch, channel) plane of a Tensor."""
    if not (0 <= n < t.shape[0] and 0 <= c < t.shape[1]):
        raise IndexError(f"plane index (n={n}, c={c}) out of range for shape {t.shape}")
    if not (math.isfinite(y) and math.isfinite(x)):
        raise ValueError(f"sample coordinates must be finite, got ({y}, {x})")
    if not isinstance(border, BorderPolicy):
        raise ValueError(f"unknown border policy: {border!r}")
    return sample_plane(t.data[n, c], y, x, border)


def conv2d_reference(x: Tensor, weights, dilation: int = 1) -> Tensor:
    """Plain dense cross-correlation, zero padding, output spatial size == input.

    One odd (kh, kw) kernel applied to every channel independently. This is
    the oracle the deformable operators must reduce to at zero offsets, so it
    stays a direct shift-and-accumulate with no fast path.
    """
    w2 = np.asarray(weights, dtype=np.float64)
    if w2.ndim != 2:
        raise ValueError(f"kernel must be 2-D, got shape {w2.shape}")
    kh, kw = w2.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dimensions must be odd, got ({kh}, {kw})")
    if not np.all(np.isfinite(w2)):
        raise ValueError("kernel weights must be finite")
    if not isinstance(dilation, int) or dilation < 1:
        raise ValueError(f"dilation must be an integer >= 1, got {dilation}")

    n, c, h, w = x.shape
    pad_y = (kh // 2) * dilation
    pad_x = (kw // 2) * dilation
    padded = np.pad(x.data.astype(np.float64),
                    ((0, 0), (0, 0), (pad_y, pad_y), (pad_x, pad_x)))
    out = np.zeros((n, c, h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            ys = i * dilation
            xs = j * dilation
            out += w2[i, j] * padded[:, :, ys:ys + h, xs:xs + w]
    return Tensor(out.astype(np.float32))


def save_tensor(t: Tensor, path) -> None:
    """Write a Tensor in the binary tensor format (little-endian throughout)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, 4))
        f.write(struct.pack("<4Q", *t.shape))
        f.write(t.data.astype("<f4", copy=False).tobytes())


def load_tensor(path) -> Tensor:
    """Read a Tensor written by save_tensor.

    Raises FormatError with the byte offset of the first violation: bad magic
    or version, wrong rank, zero or overflowing dimensions, truncated or
    oversized payload.
    """
    with open(path, "rb") as f:
        buf = f.read()

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic at byte 0: expected {MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < _HEADER_BYTES:
        raise FormatError(f"truncated header: {len(buf)} bytes, need {_HEADER_BYTES}")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4, expected {FORMAT_VERSION}")
    if ndim != 4:
        raise FormatError(f"wrong rank {ndim} at byte 8, expected 4")
    dims = struct.unpack_from("<4Q", buf, 12)
    if min(dims) == 0:
        raise FormatError(f"zero dimension in header at byte 12: {dims}")
    count = 1
    for d in dims:
        count *= d
    if count >= _MAX_ELEMENTS:
        raise FormatError(f"dimension product {count} at byte 12 overflows the element budget")
    expected = count * 4
    actual = len(buf) - _HEADER_BYTES
    if actual < expected:
        raise FormatError(f"truncated payload at byte {_HEADER_BYTES}: "
                          f"have {actual} bytes, need {expected}")
    if actual > expected:
        raise FormatError(f"trailing data after byte {_HEADER_BYTES + expected}: "
                          f"{actual - expected} extra bytes")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=_HEADER_BYTES)
    return Tensor(data.reshape(dims).copy())
