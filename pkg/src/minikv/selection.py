"""Heavy-hitter / recent-window token selection and per-layer budget allocation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError

# guards floor(alpha * l) against products like 0.29 * 100 = 28.999999999999996
_FLOOR_EPS = 1e-9

VAR_INV_EPS = 1e-6
DEFAULT_PYRAMID_DEPTH = 7


@dataclass(frozen=True)
class CacheBudget:
    alpha_hh: float
    alpha_rw: float

    def __post_init__(self):
        for name in ("alpha_hh", "alpha_rw"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {val}")
        if self.alpha_hh + self.alpha_rw > 1.0 + 1e-12:
            raise ValueError("alpha_hh + alpha_rw must not exceed 1")

    @property
    def total(self) -> float:
        return self.alpha_hh + self.alpha_rw

    def counts(self, l_prompt: int) -> tuple[int, int]:
        """``(hh, rw)`` token counts for a prompt, rounded down."""
        return fraction_count(self.alpha_hh, l_prompt), fraction_count(self.alpha_rw, l_prompt)


def fraction_count(alpha: float, n: int) -> int:
    return int(math.floor(alpha * n + _FLOOR_EPS))


@dataclass(frozen=True)
class SelectionResult:
    kept_indices: np.ndarray
    hh_indices: np.ndarray
    rw_indices: np.ndarray
    clamped: bool = False


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    scores = np.asarray(scores)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def select_by_counts(a_cumul, hh_count: int, rw_count: int) -> SelectionResult:
    a_cumul = np.asarray(a_cumul, dtype=np.float64)
    if a_cumul.ndim != 1:
        raise ShapeError("a_cumul must be 1-D")
    if hh_count < 0 or rw_count < 0:
        raise ValueError("token counts must be non-negative")
    n = a_cumul.size
    clamped = hh_count + rw_count > n
    if clamped:
        rw_count = min(rw_count, n)
        hh_count = n - rw_count
    rw = np.arange(n - rw_count, n, dtype=np.int64)
    candidates = n - rw_count
    hh = np.sort(top_k_indices(a_cumul[:candidates], hh_count)).astype(np.int64)
    kept = np.concatenate([hh, rw])
    return SelectionResult(kept_indices=kept, hh_indices=hh, rw_indices=rw, clamped=clamped)


def select_tokens(a_cumul, budget: CacheBudget, l_prompt: int) -> SelectionResult:
    """Keep the last ``floor(alpha_rw * l)`` tokens plus the top ``floor(alpha_hh * l)``
    of the remaining tokens ranked by cumulative attention."""
    a_cumul = np.asarray(a_cumul)
    if a_cumul.shape != (l_prompt,):
        raise ShapeError(f"a_cumul has shape {a_cumul.shape}, expected ({l_prompt},)")
    hh, rw = budget.counts(l_prompt)
    return select_by_counts(a_cumul, hh, rw)


@dataclass(frozen=True)
class LayerAllocation:
    per_layer_hh: tuple[int, ...]
    fallback: bool = False

    def __post_init__(self):
        if any(b < 0 for b in self.per_layer_hh):
            raise ValueError("per-layer budgets must be non-negative")

    def __len__(self):
        return len(self.per_layer_hh)

    def __getitem__(self, i):
        return self.per_layer_hh[i]

    @property
    def total(self) -> int:
        return sum(self.per_layer_hh)


def allocate_uniform(total_hh: int, layers: int) -> LayerAllocation:
    if layers < 1:
        raise ValueError("need at least one layer")
    base, extra = divmod(total_hh, layers)
    return LayerAllocation(tuple(base + (1 if i < extra else 0) for i in range(layers)))


class PyramidOrientation(str, enum.Enum):
    # layer 0 holds the larger budget 2x - x/d
    LOWER_HEAVY = "lower_heavy"
    # layer 0 holds the smaller budget x/d
    LOWER_LIGHT = "lower_light"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def allocate_pyramid(
    mean_budget_x: int,
    layers: int,
    depth_d: int = DEFAULT_PYRAMID_DEPTH,
    orientation: PyramidOrientation = PyramidOrientation.LOWER_HEAVY,
) -> LayerAllocation:
    """Linear ramp between ``2x - x/d`` and ``x/d`` across layers.

    The ramp has mean ``x``; each layer is rounded half-up independently so
    the total may drift from ``layers * x`` by at most ``layers / 2``.
    """
    if depth_d < 1:
        raise ValueError("pyramid depth must be >= 1")
    if layers < 2:
        raise ValueError("pyramid allocation needs at least two layers")
    x = float(mean_budget_x)
    low = x / depth_d
    high = 2 * x - low
    first, last = (high, low) if PyramidOrientation(orientation) is PyramidOrientation.LOWER_HEAVY else (low, high)
    step = (last - first) / (layers - 1)
    return LayerAllocation(tuple(max(0, _round_half_up(first + i * step)) for i in range(layers)))


class VarianceMode(str, enum.Enum):
    PROP = "prop"
    INV = "inv"


def largest_remainder(shares, total: int) -> list[int]:
    """Integer apportionment of ``total`` proportional to ``shares``."""
    shares = np.asarray(shares, dtype=np.float64)
    quotas = shares / shares.sum() * total
    base = np.floor(quotas).astype(np.int64)
    left = total - int(base.sum())
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:left]] += 1
    return [int(b) for b in base]


def allocate_variance(per_layer_variance, total_hh: int, mode: VarianceMode) -> LayerAllocation:
    var = np.asarray(per_layer_variance, dtype=np.float64)
    if var.ndim != 1 or var.size == 0:
        raise ShapeError("need a non-empty 1-D variance vector")
    if np.any(var < 0) or not np.all(np.isfinite(var)):
        raise ValueError("variances must be finite and non-negative")
    if not np.any(var > 0):
        alloc = allocate_uniform(total_hh, var.size)
        return LayerAllocation(alloc.per_layer_hh, fallback=True)
    shares = var if VarianceMode(mode) is VarianceMode.PROP else 1.0 / (var + VAR_INV_EPS)
    return LayerAllocation(tuple(largest_remainder(shares, total_hh)))


def layer_score_variance(a_cumul) -> float:
    a = np.asarray(a_cumul, dtype=np.float64)
    if a.size == 0:
        raise ShapeError("variance of an empty vector")
    return float(np.var(a))
