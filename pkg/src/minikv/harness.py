"""Synthetic workloads, a toy multi-layer attention model, the dynamic H2O
baseline used for heavy-hitter persistence analysis, and run orchestration.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import __version__
from .accounting import ConfigError, measured_bytes
from .attention import TileConfig, selective_flash_attn
from .cache_engine import GroupQuantizer, IdentityQuantizer, RunTrace, run_model
from .numerics import DTYPE, ShapeError, as_matrix, matmul
from .selection import (
    CacheBudget,
    LayerAllocation,
    PyramidOrientation,
    VarianceMode,
    allocate_pyramid,
    allocate_uniform,
    allocate_variance,
    layer_score_variance,
    select_by_counts,
)

PRNG_NAME = "PCG64/SeedSequence"


def rng_stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Independent generator per (seed, purpose, index...).

    Streams are derived with SeedSequence spawn keys; the purpose string is
    mapped to an integer with CRC-32 so keys are stable across platforms.
    """
    key = (zlib.crc32(purpose.encode()),) + tuple(int(i) for i in index)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class ToyModel:
    layers: int
    d: int
    n_heads: int
    w_q: list
    w_k: list
    w_v: list

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @classmethod
    def create(cls, layers: int, d: int, seed: int, n_heads: int = 1) -> "ToyModel":
        if layers < 1 or d < 1:
            raise ValueError("layers and d must be positive")
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by {n_heads} heads")
        std = 1.0 / math.sqrt(d)
        weights = {}
        for name in ("w_q", "w_k", "w_v"):
            weights[name] = [
                (rng_stream(seed, name, i).standard_normal((d, d)) * std).astype(DTYPE)
                for i in range(layers)
            ]
        return cls(layers=layers, d=d, n_heads=n_heads, **weights)


class Distribution(str, enum.Enum):
    GAUSSIAN = "gaussian"
    POWER_LAW = "powerlaw"


def gen_workload(seed: int, l_prompt: int, d: int, distribution: Distribution = Distribution.GAUSSIAN) -> np.ndarray:
    """Seeded ``l_prompt x d`` token matrix.

    ``POWER_LAW`` adds a shared direction to every token with a per-token
    strength ``0.5 + 1/rank`` (random ranks), so under self-attention a few
    tokens collect most of the cumulative attention.
    """
    if l_prompt < 1 or d < 1:
        raise ValueError("workload dimensions must be positive")
    rng = rng_stream(seed, "workload")
    x = rng.standard_normal((l_prompt, d))
    if Distribution(distribution) is Distribution.POWER_LAW:
        direction = rng.standard_normal(d)
        direction *= math.sqrt(d) / np.linalg.norm(direction)
        ranks = rng.permutation(l_prompt)
        strength = 0.5 + 1.0 / (ranks + 1.0)
        x = x + strength[:, None] * direction[None, :]
    return x.astype(DTYPE)


# --- dynamic H2O baseline -------------------------------------------------


@dataclass
class H2OTrace:
    prefill_hh: np.ndarray
    kept: list  # sorted kept indices after prefill, then after each decode step


def h2o_evict_trace(prefill_scores, hh_count: int, rw_count: int, steps: int, attend) -> H2OTrace:
    """Greedy step-wise eviction on running cumulative attention.

    ``attend(pos, kept)`` returns attention weights of token ``pos`` over the
    sorted array ``kept`` (which already contains ``pos``). After each step the
    lowest-scoring token outside the recent window is evicted while the cache
    holds more than ``hh_count + rw_count`` tokens; among equal scores the
    higher index goes first.
    """
    if hh_count < 1 and rw_count < 1:
        raise ConfigError("H2O budget must keep at least one token")
    prefill_scores = np.asarray(prefill_scores, dtype=np.float64)
    n0 = prefill_scores.size
    capacity = hh_count + rw_count
    scores = np.zeros(n0 + steps, dtype=np.float64)
    scores[:n0] = prefill_scores
    first = select_by_counts(prefill_scores, hh_count, rw_count)
    kept = first.kept_indices.tolist()
    trace = [np.array(kept, dtype=np.int64)]
    for t in range(steps):
        pos = n0 + t
        kept.append(pos)
        idx = np.array(kept, dtype=np.int64)
        scores[idx] += np.asarray(attend(pos, idx), dtype=np.float64)
        while len(kept) > capacity:
            window_start = pos - rw_count + 1
            victim, victim_score = None, math.inf
            for j in kept:
                if j >= window_start:
                    continue
                if scores[j] <= victim_score:
                    victim, victim_score = j, scores[j]
            if victim is None:
                break
            kept.remove(victim)
        trace.append(np.array(kept, dtype=np.int64))
    return H2OTrace(prefill_hh=first.hh_indices, kept=trace)


def h2o_dynamic_baseline(q, k, l_prompt: int, hh_count: int, rw_count: int, scale: float | None = None) -> H2OTrace:
    """Run H2O over a token stream: the first ``l_prompt`` rows of ``q``/``k``
    form the prompt, each further row is one decode step."""
    q = as_matrix(q, "q").astype(np.float64)
    k = as_matrix(k, "k").astype(np.float64)
    if q.shape != k.shape:
        raise ShapeError("q and k streams must have the same shape")
    if not 1 <= l_prompt <= q.shape[0]:
        raise ShapeError("prompt length out of range")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    res = selective_flash_attn(q[:l_prompt], k[:l_prompt], k[:l_prompt], scale=scale, causal=True)

    def attend(pos, kept):
        z = scale * (k[kept] @ q[pos])
        e = np.exp(z - z.max())
        return e / e.sum()

    return h2o_evict_trace(res.a_cumul, hh_count, rw_count, q.shape[0] - l_prompt, attend)


@dataclass
class PersistenceReport:
    fractions: np.ndarray
    final: float

    def as_dict(self) -> dict:
        return {"fractions": [float(f) for f in self.fractions], "final": self.final}


def persistence_analysis(trace: H2OTrace, prefill_hh=None) -> PersistenceReport:
    """Fraction of the prefill heavy hitters still cached at each step."""
    hh = np.asarray(trace.prefill_hh if prefill_hh is None else prefill_hh)
    if hh.size == 0:
        raise ConfigError("no prefill heavy hitters to track")
    fractions = np.array(
        [np.isin(hh, kept).sum() / hh.size for kept in trace.kept], dtype=np.float64
    )
    return PersistenceReport(fractions=fractions, final=float(fractions[-1]))


# --- run configuration and traces -----------------------------------------


class AllocationPolicy(str, enum.Enum):
    UNIFORM = "uniform"
    PYRAMID = "pyramid"
    VAR_PROP = "var_prop"
    VAR_INV = "var_inv"


@dataclass
class RunConfig:
    seed: int = 0
    layers: int = 4
    d: int = 64
    heads: int = 1
    l_prompt: int = 256
    steps: int = 32
    alpha_hh: float = 0.25
    alpha_rw: float = 0.25
    allocation: str = "uniform"
    pyramid_depth: int = 7
    pyramid_orientation: str = "lower_heavy"
    n_r: int = 128
    group_size: int = 16
    block_m: int = 64
    block_n: int = 64
    distribution: str = "gaussian"
    quantizer: str = "int2"
    out: str | None = None
    csv: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            CacheBudget(self.alpha_hh, self.alpha_rw)
            AllocationPolicy(self.allocation)
            PyramidOrientation(self.pyramid_orientation)
            Distribution(self.distribution)
            TileConfig(self.block_m, self.block_n)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.quantizer not in ("int2", "identity"):
            raise ConfigError(f"unknown quantizer {self.quantizer!r}")
        for name in ("layers", "d", "heads", "l_prompt", "n_r", "group_size", "pyramid_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.quantizer == "int2" and self.n_r % self.group_size:
            raise ConfigError(f"n_r={self.n_r} must be a multiple of group_size={self.group_size}")
        if self.allocation == "pyramid" and self.layers < 2:
            raise ConfigError("pyramid allocation needs at least two layers")

    def make_quantizer(self):
        return IdentityQuantizer() if self.quantizer == "identity" else GroupQuantizer(self.group_size)


def prefill_scores(model: ToyModel, prompt, tiles: TileConfig = TileConfig()) -> list:
    """Per-layer cumulative attention (summed over heads) from a full-precision prefill."""
    x = as_matrix(prompt)
    out = []
    for layer in range(model.layers):
        q, k, v = (matmul(x, w[layer]) for w in (model.w_q, model.w_k, model.w_v))
        a = np.zeros(x.shape[0], dtype=np.float64)
        heads = []
        for qh, kh, vh in zip(*(np.split(t, model.n_heads, axis=1) for t in (q, k, v))):
            res = selective_flash_attn(qh, kh, vh, causal=True, tiles=tiles)
            a += res.a_cumul
            heads.append(res.output)
        out.append(a)
        x = x + np.concatenate(heads, axis=1)
    return out


def build_allocation(cfg: RunConfig, model: ToyModel, prompt) -> LayerAllocation:
    hh_per_layer = CacheBudget(cfg.alpha_hh, cfg.alpha_rw).counts(cfg.l_prompt)[0]
    policy = AllocationPolicy(cfg.allocation)
    if policy is AllocationPolicy.UNIFORM:
        return allocate_uniform(hh_per_layer * cfg.layers, cfg.layers)
    if policy is AllocationPolicy.PYRAMID:
        return allocate_pyramid(hh_per_layer, cfg.layers, cfg.pyramid_depth, cfg.pyramid_orientation)
    variances = [layer_score_variance(a) for a in prefill_scores(model, prompt, _tiles(cfg))]
    mode = VarianceMode.PROP if policy is AllocationPolicy.VAR_PROP else VarianceMode.INV
    return allocate_variance(variances, hh_per_layer * cfg.layers, mode)


def _tiles(cfg: RunConfig) -> TileConfig:
    return TileConfig(cfg.block_m, cfg.block_n)


def formula_bytes(trace: RunTrace) -> int:
    """Closed-form size of the caches in ``trace``: every stored scalar at
    2 bits plus 2 x FP16 metadata per 16-scalar group, i.e. one byte per
    token per hidden unit for keys and values together."""
    total = 0
    for layer in trace.caches:
        for cache in layer:
            total += cache.d_key * cache.total_tokens
    return total


def execute(cfg: RunConfig):
    """Run the configured pipeline; returns ``(trace, document)``."""
    cfg.validate()
    model = ToyModel.create(cfg.layers, cfg.d, cfg.seed, cfg.heads)
    prompt = gen_workload(cfg.seed, cfg.l_prompt, cfg.d, cfg.distribution)
    alloc = build_allocation(cfg, model, prompt)
    budget = CacheBudget(cfg.alpha_hh, cfg.alpha_rw)
    trace = run_model(
        model, prompt, budget, alloc, cfg.steps, cfg.n_r, cfg.make_quantizer(), _tiles(cfg)
    )
    return trace, trace_document(cfg, alloc, trace)


def trace_document(cfg: RunConfig, alloc: LayerAllocation, trace: RunTrace) -> dict:
    full = 2 * cfg.layers * cfg.d * (cfg.l_prompt + cfg.steps) * 2
    cache_bytes = trace.cache_bytes()
    layers = []
    for i, (reports, caches) in enumerate(zip(trace.prefill_reports, trace.caches)):
        layers.append(
            {
                "layer": i,
                "hh_budget": alloc[i],
                "prefill_report": [r.as_dict() for r in reports],
                "bytes": sum(measured_bytes(c) for c in caches),
            }
        )
    meta = {
        "seed": cfg.seed,
        "version": __version__,
        "prng": PRNG_NAME,
        "dims": {"layers": cfg.layers, "d": cfg.d, "heads": cfg.heads, "l_prompt": cfg.l_prompt, "steps": cfg.steps},
        "config": {k: v for k, v in dataclasses.asdict(cfg).items() if k not in ("out", "csv")},
    }
    decode = [{"step": r.step, "max_abs_dev": r.max_abs_dev, "bound": r.bound} for r in trace.decode]
    totals = {
        "cache_bytes": cache_bytes,
        "formula_bytes": formula_bytes(trace),
        "full_bytes": full,
        "reduction_pct": 100.0 * (1 - cache_bytes / full),
        "max_abs_dev": trace.max_abs_dev,
        "max_bound": trace.max_bound,
        "final_hidden": [float(v) for v in trace.decode[-1].hidden] if trace.decode else [],
    }
    return {"meta": meta, "layers": layers, "decode": decode, "totals": totals}


def dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
