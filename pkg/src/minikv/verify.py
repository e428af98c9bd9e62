"""Invariant suite behind ``minikv verify``: each check compares a production
path against an oracle or a closed form on seeded inputs."""

from __future__ import annotations

import numpy as np

from . import oracles
from .accounting import Method, ModelDims, WorkloadDims, kv_bytes, measured_bytes, qhitter_factor
from .attention import TileConfig, selective_flash_attn
from .cache_engine import GroupQuantizer, IdentityQuantizer, KVCacheLayer, prefill, run_model
from .harness import ToyModel, gen_workload, h2o_dynamic_baseline, persistence_analysis, rng_stream
from .numerics import matmul
from .quantizer import Axis, dequantize_matrix, pack_codes, quantize_matrix, unpack_codes
from .selection import (
    CacheBudget,
    allocate_pyramid,
    allocate_uniform,
    allocate_variance,
    select_tokens,
)


def _matmul(seed):
    rng = rng_stream(seed, "verify-matmul")
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    return np.array_equal(matmul(a, b), oracles.matmul_loops(a, b)), "bit-exact vs triple loop"


def _attention(seed):
    rng = rng_stream(seed, "verify-attention")
    worst = 0.0
    for _ in range(12):
        l = int(rng.integers(1, 97))
        d = int(rng.choice([8, 16]))
        causal = bool(rng.integers(0, 2))
        tiles = TileConfig(int(rng.integers(1, l + 1)), int(rng.integers(1, l + 1)))
        q, k, v = (rng.standard_normal((l, d)).astype(np.float32) for _ in range(3))
        res = selective_flash_attn(q, k, v, causal=causal, tiles=tiles)
        attn = oracles.attention_matrix(q, k, causal=causal)
        worst = max(worst, np.abs(res.output - attn @ v.astype(np.float64)).max(),
                    np.abs(res.a_cumul - attn.sum(axis=0)).max())
    return worst <= 1e-4, f"max err {worst:.2e}"


def _quantizer(seed):
    rng = rng_stream(seed, "verify-quant")
    m = rng.standard_normal((64, 48)).astype(np.float32)
    ok = True
    for axis in Axis:
        t = quantize_matrix(m, axis)
        err = np.abs(dequantize_matrix(t) - m)
        ok &= bool(np.all(err <= GroupQuantizer().error_bound(t) + 1e-6))
    a = quantize_matrix(m, Axis.PER_TOKEN)
    b = quantize_matrix(m.T, Axis.PER_CHANNEL)
    ok &= np.array_equal(a.packed_words, b.packed_words) and np.array_equal(a.scales, b.scales)
    codes = rng.integers(0, 4, size=1000)
    ok &= np.array_equal(unpack_codes(pack_codes(codes), codes.size), codes)
    return ok, "roundtrip, duality, pack bijection"


def _selection(seed):
    rng = rng_stream(seed, "verify-select")
    a = rng.random(256)
    res = select_tokens(a, CacheBudget(0.25, 0.25), 256)
    return set(res.kept_indices.tolist()) == oracles.selection_oracle(a, 64, 64), "kept set vs full sort"


def _allocation(seed):
    rng = rng_stream(seed, "verify-alloc")
    ok = allocate_uniform(33, 32).per_layer_hh[:2] == (2, 1)
    alloc = allocate_pyramid(70, 8, 7)
    ok &= alloc[0] == 130 and alloc[-1] == 10 and abs(alloc.total - 560) <= 4
    var = rng.random(16) + 0.01
    for mode in ("prop", "inv"):
        ok &= allocate_variance(var, 1000, mode).total == 1000
    return bool(ok), "uniform/pyramid/variance"


def _state_machine(seed):
    cache = KVCacheLayer(d_key=4, d_value=4, n_r=128)
    rng = rng_stream(seed, "verify-state")
    for _ in range(1000):
        cache.append(rng.standard_normal(4), rng.standard_normal(4))
        if cache.tokens_residual >= cache.n_r:
            return False, "residual reached n_r"
    return (cache.flushes, cache.tokens_residual) == (7, 104), f"flushes={cache.flushes}"


def _accounting(seed):
    m, w = ModelDims(32, 4096, 32), WorkloadDims(4096, 512)
    ok = kv_bytes(Method.FULL, m, w) == 2_415_919_104
    ok &= kv_bytes(Method.MINIKV, m, w, CacheBudget(0.25, 0.25)) == 335_544_320
    ok &= abs(qhitter_factor(m) - 3.76) <= 0.005
    rng = rng_stream(seed, "verify-bytes")
    k = rng.standard_normal((256, 64)).astype(np.float32)
    cache, _ = prefill(k, k, rng.random(256), 64, 64)
    ok &= measured_bytes(cache) == kv_bytes(Method.MINIKV, ModelDims(1, 64), WorkloadDims(256, 0), (0.25, 0.25))
    return bool(ok), "closed forms and measured bytes"


def _persistence(seed):
    x = gen_workload(seed, 128, 16, "powerlaw")
    trace = h2o_dynamic_baseline(x, x, 64, 16, 16)
    ref = oracles.h2o_resort_oracle(x, x, 64, 16, 16)
    rep = persistence_analysis(trace)
    ok = all(list(a) == b for a, b in zip(trace.kept, ref))
    ok &= bool(np.all(np.diff(rep.fractions) <= 0)) and 0 <= rep.final <= 1
    return ok, f"final fraction {rep.final:.3f}"


def _pipeline(seed):
    model = ToyModel.create(2, 32, seed)
    prompt = gen_workload(seed, 48, 32)
    trace = run_model(model, prompt, CacheBudget(1.0, 0.0), allocate_uniform(96, 2), 8,
                      n_r=16, quantizer=IdentityQuantizer())
    ref = oracles.oracle_pipeline_fullprecision(model, prompt, 8)
    err = max(np.abs(r.hidden - h).max() for r, h in zip(trace.decode, ref["hidden"]))
    return err <= 1e-5, f"identity pipeline err {err:.2e}"


CHECKS = {
    "numerics.matmul": _matmul,
    "attention.two_pass": _attention,
    "quantizer.bounds": _quantizer,
    "selection.topk": _selection,
    "selection.allocation": _allocation,
    "cache_engine.state": _state_machine,
    "accounting.formulas": _accounting,
    "harness.persistence": _persistence,
    "cache_engine.pipeline": _pipeline,
}


def run_checks(seed: int = 0):
    results = []
    for name, check in CHECKS.items():
        try:
            ok, detail = check(seed)
        except Exception as exc:  # a crash is a failed invariant
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
