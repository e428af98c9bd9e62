"""Binary snapshot format for a single :class:`KVCacheLayer`.

All integers are little-endian uint32, all reals little-endian float32::

    header   magic b"MKV1", d_key, d_value, n_r, group_size, tokens_quantized,
             flushes, n_blocks, tokens_residual, quantizer (0 = int2, 1 = identity)
    blocks   n_blocks key blocks then n_blocks value blocks, each:
               rows, cols, axis (0 = per_channel, 1 = per_token), group_size,
               n_words, n_groups, words[n_words], scales[n_groups], zeros[n_groups]
             identity blocks: rows, cols, then rows*cols float32 values
    residual r_key rows (tokens_residual x d_key), then r_value rows
"""

from __future__ import annotations

import struct

import numpy as np

from .cache_engine import GroupQuantizer, IdentityQuantizer, KVCacheLayer
from .numerics import DataError
from .quantizer import Axis, QuantizedTensor

MAGIC = b"MKV1"
_HEADER = struct.Struct("<4s9I")
_BLOCK = struct.Struct("<6I")
_RAW = struct.Struct("<2I")
_AXES = [Axis.PER_CHANNEL, Axis.PER_TOKEN]


def _write_block(out: list, block) -> None:
    if isinstance(block, QuantizedTensor):
        out.append(
            _BLOCK.pack(
                block.logical_rows,
                block.logical_cols,
                _AXES.index(block.axis),
                block.group_size,
                block.packed_words.size,
                block.n_groups,
            )
        )
        out.append(block.packed_words.astype("<u4").tobytes())
        out.append(block.scales.astype("<f4").tobytes())
        out.append(block.zeros.astype("<f4").tobytes())
    else:
        out.append(_RAW.pack(*block.shape))
        out.append(np.asarray(block).astype("<f4").tobytes())


def dumps(cache: KVCacheLayer) -> bytes:
    identity = isinstance(cache.quantizer, IdentityQuantizer)
    out = [
        _HEADER.pack(
            MAGIC,
            cache.d_key,
            cache.d_value,
            cache.n_r,
            cache.quantizer.group_size,
            cache.tokens_quantized,
            cache.flushes,
            len(cache.key_blocks),
            cache.tokens_residual,
            int(identity),
        )
    ]
    for block in cache.key_blocks + cache.value_blocks:
        _write_block(out, block)
    out.append(cache.r_key.astype("<f4").tobytes())
    out.append(cache.r_value.astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def unpack(self, st: struct.Struct):
        if self.pos + st.size > len(self.data):
            raise DataError("snapshot truncated")
        vals = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        nbytes = np.dtype(dtype).itemsize * count
        if self.pos + nbytes > len(self.data):
            raise DataError("snapshot truncated")
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos)
        self.pos += nbytes
        return arr.astype(dtype[1:]).copy()


def _read_block(r: _Reader, identity: bool):
    if identity:
        rows, cols = r.unpack(_RAW)
        return r.array("<f4", rows * cols).reshape(rows, cols)
    rows, cols, axis, group_size, n_words, n_groups = r.unpack(_BLOCK)
    if axis > 1 or group_size < 1:
        raise DataError("corrupt block header")
    words = r.array("<u4", n_words)
    scales = r.array("<f4", n_groups)
    zeros = r.array("<f4", n_groups)
    axis = _AXES[axis]
    outer = cols if axis is Axis.PER_CHANNEL else rows
    if outer == 0 or n_groups % outer:
        raise DataError("group count does not match block shape")
    return QuantizedTensor(
        packed_words=words,
        scales=scales.reshape(outer, -1),
        zeros=zeros.reshape(outer, -1),
        logical_rows=rows,
        logical_cols=cols,
        axis=axis,
        group_size=group_size,
    )


def loads(data: bytes) -> KVCacheLayer:
    r = _Reader(data)
    magic, d_key, d_value, n_r, group_size, tokens_q, flushes, n_blocks, tokens_r, identity = r.unpack(_HEADER)
    if magic != MAGIC:
        raise DataError("not a MiniKV cache snapshot")
    quantizer = IdentityQuantizer() if identity else GroupQuantizer(group_size)
    cache = KVCacheLayer(d_key=d_key, d_value=d_value, n_r=n_r, quantizer=quantizer)
    cache.key_blocks = [_read_block(r, bool(identity)) for _ in range(n_blocks)]
    cache.value_blocks = [_read_block(r, bool(identity)) for _ in range(n_blocks)]
    cache.tokens_quantized = tokens_q
    cache.flushes = flushes
    cache.r_key = r.array("<f4", tokens_r * d_key).reshape(tokens_r, d_key)
    cache.r_value = r.array("<f4", tokens_r * d_value).reshape(tokens_r, d_value)
    if r.pos != len(r.data):
        raise DataError("trailing bytes after snapshot")
    if sum(b.shape[0] if isinstance(b, np.ndarray) else b.logical_rows for b in cache.key_blocks) != tokens_q:
        raise DataError("block rows disagree with tokens_quantized")
    return cache
