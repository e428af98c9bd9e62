"""Two-pass tiled attention that also returns per-column cumulative scores.

Pass 1 is the usual online-softmax forward over key tiles and leaves behind
the per-row log-sum-exp. Pass 2 walks column blocks, recomputes each score
tile, normalizes it with the stored log-sum-exp and accumulates column sums
from the top row block to the bottom one. Neither pass materializes the
full ``l_query x l_key`` attention matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, ShapeError, as_matrix, as_vector, matmul, softmax_row


@dataclass(frozen=True)
class TileConfig:
    block_m: int = 64
    block_n: int = 64

    def __post_init__(self):
        if self.block_m < 1 or self.block_n < 1:
            raise ValueError(f"tile sizes must be >= 1, got {self.block_m}x{self.block_n}")


@dataclass
class AttentionResult:
    output: np.ndarray
    lse: np.ndarray
    a_cumul: np.ndarray


@dataclass
class MemoryMeter:
    """Counts auxiliary float elements held live by the kernel."""

    live: int = 0
    peak: int = 0
    _held: dict = field(default_factory=dict)

    def alloc(self, name: str, shape) -> np.ndarray:
        buf = np.zeros(shape, dtype=DTYPE)
        self.release(name)
        self._held[name] = buf.size
        self.live += buf.size
        self.peak = max(self.peak, self.live)
        return buf

    def release(self, name: str) -> None:
        self.live -= self._held.pop(name, 0)


def _check_qkv(q, k, v, causal):
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[0] == 0 or k.shape[0] == 0:
        raise ShapeError("attention over a zero-length sequence")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if v.shape[0] != k.shape[0]:
        raise ShapeError(f"{v.shape[0]} value rows for {k.shape[0]} keys")
    if causal and q.shape[0] > k.shape[0]:
        raise ShapeError("causal attention needs l_query <= l_key")
    return q, k, v


def _tile_mask(r0, r1, c0, c1, offset):
    rows = np.arange(r0, r1)[:, None]
    cols = np.arange(c0, c1)[None, :]
    return cols <= rows + offset


def selective_flash_attn(
    q,
    k,
    v,
    scale: float | None = None,
    causal: bool = True,
    tiles: TileConfig = TileConfig(),
    meter: MemoryMeter | None = None,
) -> AttentionResult:
    """Attention output, per-row LSE and per-column cumulative attention.

    With ``causal`` set, query ``i`` sees keys ``0 .. l_key - l_query + i``.
    """
    q, k, v = _check_qkv(q, k, v, causal)
    lq, lk = q.shape[0], k.shape[0]
    dv = v.shape[1]
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    scale = DTYPE(scale)
    offset = lk - lq
    bm, bn = tiles.block_m, tiles.block_n
    meter = meter if meter is not None else MemoryMeter()

    output = np.empty((lq, dv), dtype=DTYPE)
    lse = meter.alloc("lse", lq)
    a_cumul = meter.alloc("a_cumul", lk)

    # pass 1: online softmax over key tiles, one row block at a time
    row_max = meter.alloc("row_max", bm)
    row_sum = meter.alloc("row_sum", bm)
    acc = meter.alloc("acc", (bm, dv))
    meter.alloc("tile", (bm, bn))
    for r0 in range(0, lq, bm):
        r1 = min(r0 + bm, lq)
        n = r1 - r0
        m_i = row_max[:n]
        s_i = row_sum[:n]
        o_i = acc[:n]
        m_i.fill(-np.inf)
        s_i.fill(0)
        o_i.fill(0)
        q_blk = q[r0:r1]
        for c0 in range(0, lk, bn):
            if causal and c0 > r1 - 1 + offset:
                break
            c1 = min(c0 + bn, lk)
            scores = matmul(q_blk, k[c0:c1].T) * scale
            if causal and c1 - 1 > r0 + offset:
                scores = np.where(_tile_mask(r0, r1, c0, c1, offset), scores, -np.inf)
            m_new = np.maximum(m_i, scores.max(axis=1))
            p = np.exp(scores - m_new[:, None])
            correction = np.exp(m_i - m_new)
            s_i *= correction
            s_i += p.sum(axis=1)
            o_i *= correction[:, None]
            o_i += matmul(p, v[c0:c1])
            m_i[:] = m_new
        output[r0:r1] = o_i / s_i[:, None]
        lse[r0:r1] = m_i + np.log(s_i)
    for name in ("row_max", "row_sum", "acc", "tile"):
        meter.release(name)

    # pass 2: column blocks, rows accumulated top to bottom
    col_acc = meter.alloc("col_acc", bn)
    meter.alloc("tile", (bm, bn))
    for c0 in range(0, lk, bn):
        c1 = min(c0 + bn, lk)
        col = col_acc[: c1 - c0]
        col.fill(0)
        for r0 in range(0, lq, bm):
            r1 = min(r0 + bm, lq)
            if causal and r1 - 1 + offset < c0:
                continue
            scores = matmul(q[r0:r1], k[c0:c1].T) * scale
            probs = np.exp(scores - lse[r0:r1, None])
            if causal and c1 - 1 > r0 + offset:
                # masked entries are skipped, never added as exp(-inf)
                probs = np.where(_tile_mask(r0, r1, c0, c1, offset), probs, 0)
            col += probs.sum(axis=0)
        a_cumul[c0:c1] = col
    meter.release("col_acc")
    meter.release("tile")

    return AttentionResult(output=output, lse=lse, a_cumul=a_cumul)


def naive_attention(q, k, v, scale: float | None = None, causal: bool = True):
    """Reference attention that materializes the full matrix in float64.

    Returns ``(output, attn)``. Used as a test oracle only.
    """
    q, k, v = _check_qkv(q, k, v, causal)
    q64, k64, v64 = (x.astype(np.float64) for x in (q, k, v))
    lq, lk = q.shape[0], k.shape[0]
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    scores = scale * (q64 @ k64.T)
    if causal:
        allowed = np.arange(lk)[None, :] <= np.arange(lq)[:, None] + (lk - lq)
        scores = np.where(allowed, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=1, keepdims=True)
    return attn @ v64, attn


def decode_attention(q_row, keys, values, scale: float | None = None):
    """Single-query attention over a key/value set; returns ``(out_row, attn_row)``."""
    q_row = as_vector(q_row, "q_row")
    keys = as_matrix(keys, "keys")
    values = as_matrix(values, "values")
    if keys.shape[0] == 0:
        raise ShapeError("decode attention over an empty key set")
    if keys.shape[1] != q_row.size:
        raise ShapeError(f"key dim {keys.shape[1]} != query dim {q_row.size}")
    if values.shape[0] != keys.shape[0]:
        raise ShapeError(f"{values.shape[0]} value rows for {keys.shape[0]} keys")
    if scale is None:
        scale = 1.0 / math.sqrt(q_row.size)
    scores = matmul(keys, q_row[:, None])[:, 0] * DTYPE(scale)
    attn = softmax_row(scores)
    return matmul(attn[None, :], values)[0], attn
