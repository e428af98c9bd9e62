"""2-bit asymmetric group quantization and 2-bit code packing.

Keys use the ``PER_CHANNEL`` layout: each channel (column) is cut into
groups of ``group_size`` consecutive tokens. Values use ``PER_TOKEN``: each
token (row) is cut into groups of ``group_size`` consecutive channels.

Codes are stored in grouped-axis-major order (channel-major for keys,
token-major for values) and packed 16 per little-end-first uint32 word.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, DataError, ShapeError, as_matrix, as_vector

BITS = 2
LEVELS = (1 << BITS) - 1  # highest code, 3
CODES_PER_WORD = 32 // BITS
DEFAULT_GROUP_SIZE = 16

_SHIFTS = np.arange(CODES_PER_WORD, dtype=np.uint32) * BITS


class Axis(str, enum.Enum):
    PER_CHANNEL = "per_channel"
    PER_TOKEN = "per_token"


@dataclass(frozen=True)
class GroupQuantParams:
    scale: float
    zero_point: float
    group_size: int = DEFAULT_GROUP_SIZE


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _quantize_rows(groups: np.ndarray):
    """Quantize each row of ``groups`` (n_groups x width) independently.

    Returns ``(codes uint8, scales float32, zeros float32)``. Codes are
    computed against the float32 params that get stored, so that
    dequantization reproduces the rounding decision exactly.
    """
    g = groups.astype(np.float64)
    lo = g.min(axis=1)
    hi = g.max(axis=1)
    zeros = lo.astype(DTYPE)
    scales = ((hi - lo) / LEVELS).astype(DTYPE)
    s = scales.astype(np.float64)[:, None]
    z = zeros.astype(np.float64)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(s > 0, (g - z) / np.where(s > 0, s, 1.0), 0.0)
    codes = np.clip(_round_half_away(raw), 0, LEVELS).astype(np.uint8)
    return codes, scales, zeros


def _dequantize_rows(codes: np.ndarray, scales: np.ndarray, zeros: np.ndarray) -> np.ndarray:
    out = codes.astype(np.float64) * scales.astype(np.float64)[:, None]
    out += zeros.astype(np.float64)[:, None]
    return out.astype(DTYPE)


def quantize_group(values, group_size: int = DEFAULT_GROUP_SIZE):
    """Quantize one group; returns ``(codes, GroupQuantParams)``."""
    values = as_vector(values, "values")
    if values.size == 0:
        raise ShapeError("empty group")
    if not np.all(np.isfinite(values)):
        raise DataError("group contains non-finite values")
    codes, scales, zeros = _quantize_rows(values[None, :])
    return codes[0], GroupQuantParams(float(scales[0]), float(zeros[0]), group_size)


def dequantize_group(codes, params: GroupQuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > LEVELS):
        raise DataError(f"codes must lie in 0..{LEVELS}")
    return _dequantize_rows(
        codes.reshape(1, -1),
        np.array([params.scale], dtype=DTYPE),
        np.array([params.zero_point], dtype=DTYPE),
    )[0]


def pack_codes(codes) -> np.ndarray:
    """Pack 2-bit codes into uint32 words, code ``i`` at bits ``2*(i % 16)``."""
    codes = np.asarray(codes).ravel()
    if codes.size and (codes.min() < 0 or codes.max() > LEVELS):
        raise DataError(f"codes must lie in 0..{LEVELS}")
    n_words = -(-codes.size // CODES_PER_WORD)
    padded = np.zeros(n_words * CODES_PER_WORD, dtype=np.uint32)
    padded[: codes.size] = codes
    fields = padded.reshape(n_words, CODES_PER_WORD) << _SHIFTS
    return np.bitwise_or.reduce(fields, axis=1).astype(np.uint32)


def unpack_codes(words, count: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint32).ravel()
    if count > words.size * CODES_PER_WORD or count < 0:
        raise ShapeError(f"{count} codes requested from {words.size} words")
    fields = (words[:, None] >> _SHIFTS) & np.uint32(LEVELS)
    return fields.ravel()[:count].astype(np.uint8)


@dataclass
class QuantizedTensor:
    packed_words: np.ndarray
    scales: np.ndarray  # float32, shape (outer, n_groups)
    zeros: np.ndarray  # float32, shape (outer, n_groups)
    logical_rows: int
    logical_cols: int
    axis: Axis
    group_size: int = DEFAULT_GROUP_SIZE

    @property
    def grouped_len(self) -> int:
        return self.logical_rows if self.axis is Axis.PER_CHANNEL else self.logical_cols

    @property
    def outer_len(self) -> int:
        return self.logical_cols if self.axis is Axis.PER_CHANNEL else self.logical_rows

    @property
    def groups_per_line(self) -> int:
        return math.ceil(self.grouped_len / self.group_size)

    @property
    def n_groups(self) -> int:
        return self.scales.size

    def params(self) -> list[GroupQuantParams]:
        return [
            GroupQuantParams(float(s), float(z), self.group_size)
            for s, z in zip(self.scales.ravel(), self.zeros.ravel())
        ]

    def codes(self) -> np.ndarray:
        """Unpacked codes as an ``(outer, grouped)`` array."""
        flat = unpack_codes(self.packed_words, self.outer_len * self.grouped_len)
        return flat.reshape(self.outer_len, self.grouped_len)


def _lines(m: np.ndarray, axis: Axis) -> np.ndarray:
    # one row per channel (keys) or per token (values), grouped axis last
    return m.T if axis is Axis.PER_CHANNEL else m


def quantize_matrix(m, axis: Axis, group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedTensor:
    """Quantize ``m`` group by group; a trailing short group gets its own params."""
    m = as_matrix(m)
    axis = Axis(axis)
    if m.size == 0:
        raise ShapeError("cannot quantize an empty matrix")
    if not np.all(np.isfinite(m)):
        raise DataError("matrix contains non-finite values")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    lines = _lines(m, axis)
    outer, length = lines.shape
    per_line = math.ceil(length / group_size)
    pad = per_line * group_size - length
    # edge padding leaves each group's min and max untouched
    padded = np.pad(lines, ((0, 0), (0, pad)), mode="edge") if pad else lines
    codes, scales, zeros = _quantize_rows(padded.reshape(outer * per_line, group_size))
    codes = codes.reshape(outer, per_line * group_size)[:, :length]
    return QuantizedTensor(
        packed_words=pack_codes(codes),
        scales=scales.reshape(outer, per_line),
        zeros=zeros.reshape(outer, per_line),
        logical_rows=m.shape[0],
        logical_cols=m.shape[1],
        axis=axis,
        group_size=group_size,
    )


def dequantize_matrix(t: QuantizedTensor) -> np.ndarray:
    outer, length, per_line = t.outer_len, t.grouped_len, t.groups_per_line
    if t.scales.shape != (outer, per_line) or t.zeros.shape != (outer, per_line):
        raise DataError(
            f"expected {outer}x{per_line} group params, got {t.scales.shape} / {t.zeros.shape}"
        )
    codes = t.codes()
    pad = per_line * t.group_size - length
    if pad:
        codes = np.pad(codes, ((0, 0), (0, pad)))
    lines = _dequantize_rows(
        codes.reshape(outer * per_line, t.group_size), t.scales.ravel(), t.zeros.ravel()
    ).reshape(outer, per_line * t.group_size)[:, :length]
    return np.ascontiguousarray(lines.T if t.axis is Axis.PER_CHANNEL else lines)
