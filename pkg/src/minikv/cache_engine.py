"""Per-layer compressed KV cache: prefill selection + quantization, then decode
with full-precision residual buffers flushed to 2-bit storage every ``n_r`` tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .accounting import ConfigError, measured_bytes
from .attention import TileConfig, decode_attention, selective_flash_attn
from .numerics import DTYPE, ShapeError, as_matrix, as_vector, matmul, softmax_row
from .quantizer import DEFAULT_GROUP_SIZE, Axis, QuantizedTensor, dequantize_matrix, quantize_matrix
from .selection import CacheBudget, LayerAllocation, SelectionResult, select_by_counts

DEFAULT_RESIDUAL = 128


class StateError(RuntimeError):
    """Raised when an operation is invalid for the cache's current state."""


class GroupQuantizer:
    """2-bit group quantizer; keys per-channel, values per-token."""

    name = "int2-group"

    def __init__(self, group_size: int = DEFAULT_GROUP_SIZE):
        self.group_size = group_size

    def quantize(self, m: np.ndarray, axis: Axis) -> QuantizedTensor:
        return quantize_matrix(m, axis, self.group_size)

    def dequantize(self, block: QuantizedTensor) -> np.ndarray:
        return dequantize_matrix(block)

    def error_bound(self, block: QuantizedTensor) -> np.ndarray:
        """Per-element worst-case rounding error (half the group scale), logical shape."""
        half = np.repeat(block.scales / 2, block.group_size, axis=1)[:, : block.grouped_len]
        return half.T if block.axis is Axis.PER_CHANNEL else half


class IdentityQuantizer:
    """Stores blocks unchanged; disables compression for equivalence tests."""

    name = "identity"
    group_size = 1

    def quantize(self, m: np.ndarray, axis: Axis) -> np.ndarray:
        return np.array(m, dtype=DTYPE, copy=True)

    def dequantize(self, block: np.ndarray) -> np.ndarray:
        return block

    def error_bound(self, block: np.ndarray) -> np.ndarray:
        return np.zeros_like(block)


@dataclass
class KVCacheLayer:
    """Quantized key/value blocks followed by full-precision residual rows.

    Keys and values are kept as lists of blocks: the prefill block and one
    block per flush. Appending a flushed block adds whole groups to every
    channel (keys) or whole rows (values), so no existing group is re-encoded.
    """

    d_key: int
    d_value: int
    n_r: int = DEFAULT_RESIDUAL
    quantizer: object = field(default_factory=GroupQuantizer)
    key_blocks: list = field(default_factory=list)
    value_blocks: list = field(default_factory=list)
    tokens_quantized: int = 0
    flushes: int = 0
    r_key: np.ndarray = None
    r_value: np.ndarray = None

    def __post_init__(self):
        if self.n_r < 1:
            raise ConfigError("residual length n_r must be positive")
        if self.n_r % self.quantizer.group_size:
            raise ConfigError(
                f"n_r={self.n_r} must be a multiple of group_size={self.quantizer.group_size}"
            )
        if self.r_key is None:
            self.r_key = np.zeros((0, self.d_key), dtype=DTYPE)
        if self.r_value is None:
            self.r_value = np.zeros((0, self.d_value), dtype=DTYPE)
        self._deq = None

    @property
    def tokens_residual(self) -> int:
        return self.r_key.shape[0]

    @property
    def total_tokens(self) -> int:
        return self.tokens_quantized + self.tokens_residual

    def store(self, k: np.ndarray, v: np.ndarray) -> None:
        """Quantize a block of tokens and append it to the quantized part."""
        self.key_blocks.append(self.quantizer.quantize(k, Axis.PER_CHANNEL))
        self.value_blocks.append(self.quantizer.quantize(v, Axis.PER_TOKEN))
        self.tokens_quantized += k.shape[0]
        self._deq = None

    def append(self, t_k, t_v) -> None:
        t_k = as_vector(t_k, "t_k")
        t_v = as_vector(t_v, "t_v")
        if t_k.size != self.d_key or t_v.size != self.d_value:
            raise ShapeError(
                f"token dims ({t_k.size}, {t_v.size}) != cache dims ({self.d_key}, {self.d_value})"
            )
        self.r_key = np.vstack([self.r_key, t_k[None, :]])
        self.r_value = np.vstack([self.r_value, t_v[None, :]])
        if self.tokens_residual == self.n_r:
            self.store(self.r_key, self.r_value)
            self.flushes += 1
            self.r_key = self.r_key[:0].copy()
            self.r_value = self.r_value[:0].copy()

    def dequantized(self):
        """``(keys, values, key_err, value_err)`` over the quantized part."""
        if self._deq is None:
            q = self.quantizer
            if self.key_blocks:
                keys = np.vstack([q.dequantize(b) for b in self.key_blocks])
                values = np.vstack([q.dequantize(b) for b in self.value_blocks])
                k_err = np.vstack([q.error_bound(b) for b in self.key_blocks])
                v_err = np.vstack([q.error_bound(b) for b in self.value_blocks])
            else:
                keys = k_err = np.zeros((0, self.d_key), dtype=DTYPE)
                values = v_err = np.zeros((0, self.d_value), dtype=DTYPE)
            self._deq = (keys, values, k_err, v_err)
        return self._deq

    def attend(self, t_q, scale: float | None = None):
        """One softmax over ``[dequantized keys | residual keys]``.

        Returns ``(t_o, attn, bound)`` where ``bound`` is the first-order
        worst-case output error caused by quantization.
        """
        t_q = as_vector(t_q, "t_q")
        if self.total_tokens == 0:
            raise StateError("attention over an empty cache")
        if scale is None:
            scale = 1.0 / math.sqrt(self.d_key)
        keys, values, k_err, v_err = self.dequantized()
        scores = np.concatenate(
            [matmul(keys, t_q[:, None])[:, 0], matmul(self.r_key, t_q[:, None])[:, 0]]
        ) * DTYPE(scale)
        attn = softmax_row(scores)
        n_q = keys.shape[0]
        a_quant, a_unquant = attn[:n_q], attn[n_q:]
        t_o = matmul(a_quant[None, :], values)[0] + matmul(a_unquant[None, :], self.r_value)[0]

        # first order: d t_o = sum_j a_j dv_j + sum_j a_j dz_j (v_j - t_o),
        # with |dz_j| <= scale * sum_c |q_c| key_err_jc
        a64 = a_quant.astype(np.float64)
        score_err = scale * (k_err.astype(np.float64) @ np.abs(t_q.astype(np.float64)))
        spread = np.abs(values.astype(np.float64) - t_o.astype(np.float64))
        per_channel = a64 @ v_err.astype(np.float64) + (a64 * score_err) @ spread
        bound = float(per_channel.max(initial=0.0))
        return t_o, attn, bound

    def snapshot_state(self) -> dict:
        return {
            "tokens_quantized": self.tokens_quantized,
            "tokens_residual": self.tokens_residual,
            "flushes": self.flushes,
            "bytes": measured_bytes(self),
        }


@dataclass
class PrefillReport:
    kept: SelectionResult
    bytes_before: int
    bytes_after: int
    a_cumul: np.ndarray

    def as_dict(self) -> dict:
        return {
            "kept": int(self.kept.kept_indices.size),
            "hh": int(self.kept.hh_indices.size),
            "rw": int(self.kept.rw_indices.size),
            "clamped": bool(self.kept.clamped),
            "bytes_before": self.bytes_before,
            "bytes_after": self.bytes_after,
        }


def prefill(
    k,
    v,
    a_cumul,
    hh_count: int,
    rw_count: int,
    n_r: int = DEFAULT_RESIDUAL,
    quantizer=None,
):
    """Select the persistent tokens from ``a_cumul`` and quantize them.

    Kept rows are stored in ascending token order; their original positions
    are only recorded in the report.
    """
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    a_cumul = as_vector(a_cumul, "a_cumul")
    if not k.shape[0] == v.shape[0] == a_cumul.size:
        raise ShapeError(f"{k.shape[0]} keys, {v.shape[0]} values, {a_cumul.size} scores")
    kept = select_by_counts(a_cumul, hh_count, rw_count)
    if kept.kept_indices.size == 0:
        raise ConfigError("prefill budget keeps no tokens")
    cache = KVCacheLayer(
        d_key=k.shape[1],
        d_value=v.shape[1],
        n_r=n_r,
        quantizer=quantizer if quantizer is not None else GroupQuantizer(),
    )
    cache.store(k[kept.kept_indices], v[kept.kept_indices])
    report = PrefillReport(
        kept=kept,
        bytes_before=int((k.size + v.size) * 2),
        bytes_after=measured_bytes(cache),
        a_cumul=a_cumul,
    )
    return cache, report


def decode_append(cache: KVCacheLayer, t_k, t_v) -> KVCacheLayer:
    cache.append(t_k, t_v)
    return cache


def decode_step(cache: KVCacheLayer, t_q, t_k, t_v, scale: float | None = None):
    """Append the new token, then attend over the whole cache including it."""
    if cache.total_tokens == 0:
        raise StateError("decode on an empty cache")
    cache.append(t_k, t_v)
    t_o, _, _ = cache.attend(t_q, scale)
    return t_o, cache


def rms_normalize(x: np.ndarray) -> np.ndarray:
    """Rescale to unit root-mean-square; keeps fed-back decode tokens bounded."""
    x = np.asarray(x, dtype=DTYPE)
    rms = np.sqrt(np.mean(x.astype(np.float64) ** 2))
    return (x / DTYPE(rms)).astype(DTYPE) if rms > 0 else x


@dataclass
class DecodeRecord:
    step: int
    layer_outputs: list  # per layer, concatenated head outputs
    hidden: np.ndarray  # residual stream after the last layer
    checks: list  # (|t_o - t_o*|, first-order bound) per layer and head

    @property
    def max_abs_dev(self) -> float:
        return max(d for d, _ in self.checks)

    @property
    def bound(self) -> float:
        return max(b for _, b in self.checks)


@dataclass
class RunTrace:
    prefill_reports: list  # [layer][head] -> PrefillReport
    prefill_outputs: list  # per layer attention output, l_prompt x d
    caches: list  # [layer][head] -> KVCacheLayer
    decode: list  # DecodeRecord per step

    @property
    def max_abs_dev(self) -> float:
        return max((r.max_abs_dev for r in self.decode), default=0.0)

    @property
    def max_bound(self) -> float:
        return max((r.bound for r in self.decode), default=0.0)

    def cache_bytes(self) -> int:
        return sum(measured_bytes(c) for layer in self.caches for c in layer)


def _split_heads(x: np.ndarray, n_heads: int):
    return np.split(x, n_heads, axis=-1)


def run_model(
    model,
    prompt,
    budget: CacheBudget,
    alloc: LayerAllocation,
    steps: int,
    n_r: int = DEFAULT_RESIDUAL,
    quantizer=None,
    tiles: TileConfig = TileConfig(),
) -> RunTrace:
    """Multi-layer prefill followed by ``steps`` autoregressive decode steps.

    Each layer adds its attention output to the residual stream. The next
    decode token is the final residual stream, RMS-normalized. Alongside
    every compressed decode attention, the same query is run against an
    uncompressed copy of that layer's keys/values to report ``|t_o - t_o*|``.
    """
    prompt = as_matrix(prompt, "prompt")
    if len(alloc) != model.layers:
        raise ConfigError(f"allocation has {len(alloc)} layers, model has {model.layers}")
    quantizer = quantizer if quantizer is not None else GroupQuantizer()
    l_prompt = prompt.shape[0]
    rw_count = budget.counts(l_prompt)[1]
    heads = model.n_heads

    x = prompt
    reports, outputs, caches, shadows = [], [], [], []
    for layer in range(model.layers):
        q = matmul(x, model.w_q[layer])
        k = matmul(x, model.w_k[layer])
        v = matmul(x, model.w_v[layer])
        layer_reports, layer_caches, layer_shadows, head_out = [], [], [], []
        for qh, kh, vh in zip(*(_split_heads(t, heads) for t in (q, k, v))):
            res = selective_flash_attn(qh, kh, vh, causal=True, tiles=tiles)
            cache, report = prefill(kh, vh, res.a_cumul, alloc[layer], rw_count, n_r, quantizer)
            layer_reports.append(report)
            layer_caches.append(cache)
            layer_shadows.append([kh.copy(), vh.copy()])
            head_out.append(res.output)
        out = np.concatenate(head_out, axis=1)
        outputs.append(out)
        reports.append(layer_reports)
        caches.append(layer_caches)
        shadows.append(layer_shadows)
        x = x + out

    records = []
    token = rms_normalize(x[-1])
    for step in range(steps):
        h = token
        layer_outputs, checks = [], []
        for layer in range(model.layers):
            tq = matmul(h[None, :], model.w_q[layer])[0]
            tk = matmul(h[None, :], model.w_k[layer])[0]
            tv = matmul(h[None, :], model.w_v[layer])[0]
            head_out = []
            for hi, (qh, kh, vh) in enumerate(zip(*(_split_heads(t, heads) for t in (tq, tk, tv)))):
                cache = caches[layer][hi]
                if cache.total_tokens == 0:
                    raise StateError("decode on an empty cache")
                cache.append(kh, vh)
                t_o, _, b = cache.attend(qh)
                shadow = shadows[layer][hi]
                shadow[0] = np.vstack([shadow[0], kh[None, :]])
                shadow[1] = np.vstack([shadow[1], vh[None, :]])
                ref, _ = decode_attention(qh, shadow[0], shadow[1])
                checks.append((float(np.abs(t_o - ref).max()), b))
                head_out.append(t_o)
            o = np.concatenate(head_out)
            layer_outputs.append(o)
            h = h + o
        records.append(DecodeRecord(step, layer_outputs, h, checks))
        token = rms_normalize(h)
    return RunTrace(reports, outputs, caches, records)
