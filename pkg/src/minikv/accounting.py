"""KV-cache byte accounting for full, evicting, quantized and combined caches.

All closed-form sizes count 16-bit floats at 2 bytes. Quantization metadata
(scale and zero-point) is charged at 2 bytes each even though the runtime
keeps them as 32-bit reals.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .quantizer import QuantizedTensor
from .selection import CacheBudget

FP16_BYTES = 2
GB = 10**9


class ConfigError(ValueError):
    """Raised when a method is missing the budget parameter it needs."""


class Method(str, enum.Enum):
    FULL = "full"
    H2O = "h2o"
    SNAPKV = "snapkv"
    KIVI = "kivi"
    QHITTER = "qhitter"
    MINIKV = "minikv"


@dataclass(frozen=True)
class ModelDims:
    layers: int
    hidden: int
    n_heads: int = 1

    def __post_init__(self):
        if min(self.layers, self.hidden, self.n_heads) < 1:
            raise ValueError("model dimensions must be positive")
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads


@dataclass(frozen=True)
class WorkloadDims:
    l_prompt: int
    l_gen: int = 0

    def __post_init__(self):
        if self.l_prompt < 0 or self.l_gen < 0:
            raise ValueError("sequence lengths must be non-negative")


def qhitter_factor(m: ModelDims) -> float:
    """Compression factor of INT4 per-head token quantization.

    Units are bits: a head row of ``d/n_heads`` FP16 scalars against the same
    row at 4 bits plus two FP16 metadata scalars (``2 * 16`` bits).
    """
    hd = m.head_dim
    return (hd * 16) / (hd * 4 + 2 * 16)


def _budget_sum(budget) -> float:
    if budget is None:
        raise ConfigError("method needs a cache budget")
    if isinstance(budget, CacheBudget):
        return budget.total
    if isinstance(budget, tuple):
        return float(sum(budget))
    return float(budget)


def kv_bytes(method: Method, m: ModelDims, w: WorkloadDims, budget=None, p: float | None = None) -> float:
    """Closed-form KV-cache size in bytes.

    ``budget`` is a :class:`CacheBudget`, an ``(alpha_hh, alpha_rw)`` tuple or
    a single combined fraction. SnapKV takes its prompt keep fraction ``p``.
    """
    method = Method(method)
    hd = m.layers * m.hidden
    lp, lg = w.l_prompt, w.l_gen
    if method is Method.FULL:
        return float(2 * hd * (lp + lg) * FP16_BYTES)
    if method is Method.KIVI:
        return float(hd * (lp + lg))
    if method is Method.SNAPKV:
        if p is None:
            raise ConfigError("SnapKV needs a prompt keep fraction p")
        return 2 * hd * (p * lp + lg) * FP16_BYTES
    alpha = _budget_sum(budget)
    if method is Method.H2O:
        return 2 * hd * lp * alpha * FP16_BYTES
    if method is Method.QHITTER:
        return 2 * hd * lp * alpha * FP16_BYTES / qhitter_factor(m)
    return hd * alpha * lp + float(hd * lg)


def parity_budget(method: Method, target_bytes: float, m: ModelDims, w: WorkloadDims) -> float:
    """Combined budget fraction giving ``method`` a cache of ``target_bytes``.

    H2O and Q-Hitter sizes are linear in the budget, so this is a division.
    """
    per_unit = kv_bytes(method, m, w, budget=1.0)
    if per_unit == 0:
        raise ConfigError("method size does not depend on the budget here")
    return target_bytes / per_unit


def truncate_sig(x: float, digits: int = 2) -> str:
    """Format ``x`` cut (not rounded) to ``digits`` significant figures."""
    if x == 0:
        return "0"
    exponent = math.floor(math.log10(abs(x)))
    decimals = max(digits - 1 - exponent, 0)
    factor = 10.0 ** (digits - 1 - exponent)
    cut = math.floor(abs(x) * factor + 1e-9) / factor
    return f"{math.copysign(cut, x):.{decimals}f}"


@dataclass
class ReportRow:
    method: str
    bytes: float
    gb: float
    reduction_pct: float

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "bytes": self.bytes,
            "gb": self.gb,
            "reduction_pct": self.reduction_pct,
        }


def compression_report(
    methods,
    m: ModelDims,
    w: WorkloadDims,
    budget: CacheBudget,
    snapkv_p: float | None = None,
) -> dict:
    """Per-method sizes plus the H2O and Q-Hitter budgets matching MiniKV's size."""
    full = kv_bytes(Method.FULL, m, w)
    rows = []
    for method in methods:
        method = Method(method)
        if method is Method.SNAPKV and snapkv_p is None:
            p = budget.total
        else:
            p = snapkv_p
        size = kv_bytes(method, m, w, budget=budget, p=p)
        reduction = 100.0 * (1.0 - size / full) if full else 0.0
        rows.append(ReportRow(method.value, size, size / GB, reduction))
    minikv = kv_bytes(Method.MINIKV, m, w, budget=budget)
    parity = {
        "h2o": parity_budget(Method.H2O, minikv, m, w),
        "qhitter": parity_budget(Method.QHITTER, minikv, m, w),
    }
    return {"rows": rows, "parity": parity, "qhitter_factor": qhitter_factor(m)}


def block_bytes(block) -> int:
    """Stored size of one cache block: packed words plus 2 x FP16 per group,
    or FP16-equivalent bytes for an unquantized block."""
    if isinstance(block, QuantizedTensor):
        return int(block.packed_words.size * 4 + block.n_groups * 2 * FP16_BYTES)
    return int(np.asarray(block).size * FP16_BYTES)


def measured_bytes(cache) -> int:
    """Bytes held by a cache layer: quantized blocks plus FP16 residual rows."""
    total = sum(block_bytes(b) for b in cache.key_blocks)
    total += sum(block_bytes(b) for b in cache.value_blocks)
    total += (cache.r_key.size + cache.r_value.size) * FP16_BYTES
    return int(total)
