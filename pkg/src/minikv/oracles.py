"""Brute-force reference implementations for tests and ``minikv verify``.

Nothing here imports the production modules: each function re-derives its
answer from numpy primitives in float64 so agreement is real evidence.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b) -> np.ndarray:
    """Triple-loop float32 product with left-to-right accumulation."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = np.float32(0)
            for p in range(a.shape[1]):
                acc = np.float32(acc + np.float32(a[i, p] * b[p, j]))
            out[i, j] = acc
    return out


def attention_matrix(q, k, scale=None, causal=True) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    lq, lk = q.shape[0], k.shape[0]
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    attn = np.zeros((lq, lk))
    for i in range(lq):
        visible = lk - lq + i + 1 if causal else lk
        z = np.array([scale * float(np.dot(q[i], k[j])) for j in range(visible)])
        e = np.exp(z - z.max())
        attn[i, :visible] = e / e.sum()
    return attn


def softmax_denominators(q, k, scale=None, causal=True) -> np.ndarray:
    """Un-shifted softmax denominators ``sum_j exp(score_ij)`` per row."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    lq, lk = q.shape[0], k.shape[0]
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    z = scale * q @ k.T
    out = np.empty(lq)
    for i in range(lq):
        visible = lk - lq + i + 1 if causal else lk
        out[i] = np.exp(z[i, :visible]).sum()
    return out


def topk_sorted_set(scores, k: int, exclude=()) -> set:
    """Top-``k`` by full sort over ``(-score, index)`` pairs."""
    excluded = set(exclude)
    pairs = sorted((-float(s), i) for i, s in enumerate(scores) if i not in excluded)
    return {i for _, i in pairs[:k]}


def selection_oracle(a_cumul, hh: int, rw: int) -> set:
    n = len(a_cumul)
    rw = min(rw, n)
    window = set(range(n - rw, n))
    return window | topk_sorted_set(a_cumul, min(hh, n - rw), exclude=window)


def h2o_resort_oracle(q, k, l_prompt: int, hh: int, rw: int, scale=None) -> list:
    """H2O kept sets recomputed by a full re-sort after every step.

    Returns one sorted list per step, starting with the prefill selection.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n = q.shape[0]
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    scores = np.zeros(n)
    scores[:l_prompt] = attention_matrix(q[:l_prompt], k[:l_prompt], scale).sum(axis=0)
    alive = selection_oracle(scores[:l_prompt], hh, rw)
    out = [sorted(alive)]
    for pos in range(l_prompt, n):
        alive.add(pos)
        idx = sorted(alive)
        z = np.array([scale * float(np.dot(k[j], q[pos])) for j in idx])
        e = np.exp(z - z.max())
        for j, w in zip(idx, e / e.sum()):
            scores[j] += w
        window = {j for j in alive if j > pos - rw}
        rest = sorted(alive - window, key=lambda j: (-scores[j], j))
        alive = window | set(rest[: max(hh + rw - len(window), 0)])
        out.append(sorted(alive))
    return out


def pyramid_closed_form(x: float, layers: int, depth: int) -> list:
    """Unrounded ramp from ``2x - x/d`` (layer 0) to ``x/d`` (last layer)."""
    top, bottom = 2 * x - x / depth, x / depth
    return [top + (bottom - top) * i / (layers - 1) for i in range(layers)]


def largest_remainder_oracle(shares, total: int) -> list:
    shares = [float(s) for s in shares]
    s = sum(shares)
    quotas = [total * v / s for v in shares]
    base = [math.floor(qv) for qv in quotas]
    order = sorted(range(len(shares)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def _rms(x):
    return x / math.sqrt(float(np.mean(x * x)))


def oracle_pipeline_fullprecision(model, prompt, steps: int) -> dict:
    """Same toy model with every token kept at full precision (float64).

    Returns per-layer prefill attention outputs, per-step per-layer decode
    outputs, and the per-step final residual stream.
    """
    heads = model.n_heads
    x = np.asarray(prompt, dtype=np.float64)
    l = x.shape[0]
    keys, values, prefill_out = [], [], []
    for layer in range(model.layers):
        wq, wk, wv = (np.asarray(w[layer], dtype=np.float64) for w in (model.w_q, model.w_k, model.w_v))
        q, k, v = x @ wq, x @ wk, x @ wv
        dh = q.shape[1] // heads
        out = np.zeros_like(v)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            z = (q[:, sl] @ k[:, sl].T) / math.sqrt(dh)
            z = np.where(np.tril(np.ones((l, l), dtype=bool)), z, -np.inf)
            a = np.exp(z - z.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            out[:, sl] = a @ v[:, sl]
        prefill_out.append(out)
        keys.append(k)
        values.append(v)
        x = x + out

    decode_outputs, hidden = [], []
    token = _rms(x[-1])
    for _ in range(steps):
        h_vec = token
        layer_outs = []
        for layer in range(model.layers):
            wq, wk, wv = (np.asarray(w[layer], dtype=np.float64) for w in (model.w_q, model.w_k, model.w_v))
            tq, tk, tv = h_vec @ wq, h_vec @ wk, h_vec @ wv
            keys[layer] = np.vstack([keys[layer], tk])
            values[layer] = np.vstack([values[layer], tv])
            dh = tq.size // heads
            o = np.zeros_like(tv)
            for h in range(heads):
                sl = slice(h * dh, (h + 1) * dh)
                z = keys[layer][:, sl] @ tq[sl] / math.sqrt(dh)
                a = np.exp(z - z.max())
                o[sl] = (a / a.sum()) @ values[layer][:, sl]
            layer_outs.append(o)
            h_vec = h_vec + o
        decode_outputs.append(layer_outs)
        hidden.append(h_vec)
        token = _rms(h_vec)
    return {"prefill_outputs": prefill_out, "decode_outputs": decode_outputs, "hidden": hidden}
