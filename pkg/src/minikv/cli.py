"""Command-line entry point: ``minikv {run,verify,mem,allocate,persistence,dump,load}``.

Exit codes: 0 success, 1 invariant failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import snapshot
from .accounting import (
    ConfigError,
    Method,
    ModelDims,
    WorkloadDims,
    compression_report,
    truncate_sig,
)
from .attention import selective_flash_attn
from .cache_engine import prefill
from .harness import (
    RunConfig,
    ToyModel,
    dump_json,
    execute,
    gen_workload,
    h2o_dynamic_baseline,
    persistence_analysis,
    prefill_scores,
    _tiles,
)
from .numerics import DataError
from .selection import (
    CacheBudget,
    PyramidOrientation,
    allocate_pyramid,
    allocate_uniform,
    allocate_variance,
    layer_score_variance,
)
from .verify import run_checks

# flag dest -> RunConfig field
_RUN_FLAGS = {
    "seed": "seed",
    "layers": "layers",
    "hidden": "d",
    "heads": "heads",
    "prompt": "l_prompt",
    "steps": "steps",
    "alloc": "allocation",
    "depth": "pyramid_depth",
    "orientation": "pyramid_orientation",
    "n_r": "n_r",
    "group_size": "group_size",
    "dist": "distribution",
    "quantizer": "quantizer",
    "out": "out",
    "csv": "csv",
}


class InvariantFailure(RuntimeError):
    pass


def _pair(text: str, kind=float) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON document with RunConfig fields")
    p.add_argument("--seed", type=int)


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int, help="model width d")
    p.add_argument("--heads", type=int)
    p.add_argument("--prompt", type=int, help="prompt length")
    p.add_argument("--budget", type=_pair, help="alpha_hh,alpha_rw")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minikv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full prefill + decode pipeline on a synthetic workload")
    _add_common(p)
    _add_model(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--alloc", choices=["uniform", "pyramid", "var_prop", "var_inv"])
    p.add_argument("--depth", type=int, help="pyramid depth")
    p.add_argument("--orientation", choices=[o.value for o in PyramidOrientation])
    p.add_argument("--n-r", dest="n_r", type=int, help="residual flush length")
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--tiles", type=lambda s: _pair(s, int), help="block_m,block_n")
    p.add_argument("--dist", choices=["gaussian", "powerlaw"])
    p.add_argument("--quantizer", choices=["int2", "identity"])
    p.add_argument("--out", help="trace JSON path (default: stdout)")
    p.add_argument("--csv", help="per-step metrics CSV path")

    p = sub.add_parser("verify", help="run the invariant suite")
    _add_common(p)

    p = sub.add_parser("mem", help="closed-form KV-cache size table")
    _add_common(p)
    _add_model(p)
    p.add_argument("--gen", type=int, help="generated tokens")
    p.add_argument("--snapkv-p", dest="snapkv_p", type=float)
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")

    p = sub.add_parser("allocate", help="per-layer heavy-hitter budgets")
    _add_common(p)
    _add_model(p)
    p.add_argument("--policy", choices=["uniform", "pyramid", "var_prop", "var_inv"], default="pyramid")
    p.add_argument("--mean", type=int, help="mean per-layer budget (default from --budget)")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--orientation", choices=[o.value for o in PyramidOrientation])
    p.add_argument("--variances", type=lambda s: [float(v) for v in s.split(",")],
                   help="per-layer variances; default: measured on a seeded prefill")

    p = sub.add_parser("persistence", help="prefill heavy-hitter persistence under dynamic H2O")
    _add_common(p)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--prompt", type=int, default=None)
    p.add_argument("--gen", type=int, default=64)
    p.add_argument("--budget", type=_pair, help="alpha_hh,alpha_rw of the prompt length")
    p.add_argument("--dist", choices=["gaussian", "powerlaw"], default="powerlaw")

    p = sub.add_parser("dump", help="write a single-layer cache snapshot")
    _add_common(p)
    _add_model(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--n-r", dest="n_r", type=int)
    p.add_argument("output", type=Path)

    p = sub.add_parser("load", help="read a cache snapshot and print its summary")
    p.add_argument("input", type=Path)
    return parser


def resolve_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    for flag, name in _RUN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            data[name] = val
    if getattr(args, "budget", None) is not None:
        data["alpha_hh"], data["alpha_rw"] = args.budget
    if getattr(args, "tiles", None) is not None:
        data["block_m"], data["block_n"] = args.tiles
    try:
        return RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_run(args, out) -> int:
    cfg = resolve_config(args)
    trace, doc = execute(cfg)
    text = dump_json(doc)
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        out.write(text)
    if cfg.csv:
        with open(cfg.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "max_abs_dev", "bound"])
            for rec in doc["decode"]:
                w.writerow([rec["step"], repr(rec["max_abs_dev"]), repr(rec["bound"])])
    for rec in trace.decode:
        for dev, _ in rec.checks:
            if not np.isfinite(dev):
                raise InvariantFailure(f"non-finite deviation at step {rec.step}")
    return 0


def cmd_verify(args, out) -> int:
    cfg = resolve_config(args)
    failed = 0
    for name, ok, detail in run_checks(cfg.seed):
        out.write(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}\n")
        failed += not ok
    out.write("all checks passed\n" if not failed else f"{failed} check(s) failed\n")
    return 1 if failed else 0


def cmd_mem(args, out) -> int:
    cfg = resolve_config(args)
    m = ModelDims(cfg.layers, cfg.d, cfg.heads)
    w = WorkloadDims(cfg.l_prompt, cfg.steps if args.gen is None else args.gen)
    budget = CacheBudget(cfg.alpha_hh, cfg.alpha_rw)
    rep = compression_report(list(Method), m, w, budget, args.snapkv_p)
    rows = [r.as_dict() for r in rep["rows"]]
    if args.format == "json":
        out.write(json.dumps({"rows": rows, "parity": rep["parity"], "qhitter_factor": rep["qhitter_factor"]},
                             indent=2) + "\n")
    elif args.format == "csv":
        w_ = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        w_.writeheader()
        w_.writerows(rows)
    else:
        out.write(f"{'method':<10}{'bytes':>16}{'GB':>8}{'reduction':>11}\n")
        for r in rows:
            out.write(f"{r['method']:<10}{r['bytes']:>16,.0f}{truncate_sig(r['gb']):>8}"
                      f"{r['reduction_pct']:>10.0f}%\n")
        out.write(f"qhitter factor: {rep['qhitter_factor']:.2f}x\n")
        out.write(f"parity budget vs minikv: h2o {100 * rep['parity']['h2o']:.1f}%, "
                  f"qhitter {100 * rep['parity']['qhitter']:.1f}%\n")
    return 0


def cmd_allocate(args, out) -> int:
    cfg = resolve_config(args)
    mean = args.mean if args.mean is not None else CacheBudget(cfg.alpha_hh, cfg.alpha_rw).counts(cfg.l_prompt)[0]
    if args.policy == "uniform":
        alloc = allocate_uniform(mean * cfg.layers, cfg.layers)
    elif args.policy == "pyramid":
        alloc = allocate_pyramid(mean, cfg.layers, args.depth or cfg.pyramid_depth,
                                 args.orientation or cfg.pyramid_orientation)
    else:
        variances = args.variances
        if variances is None:
            model = ToyModel.create(cfg.layers, cfg.d, cfg.seed, cfg.heads)
            prompt = gen_workload(cfg.seed, cfg.l_prompt, cfg.d, cfg.distribution)
            variances = [layer_score_variance(a) for a in prefill_scores(model, prompt, _tiles(cfg))]
        alloc = allocate_variance(variances, mean * len(variances), args.policy.split("_")[1])
    out.write(json.dumps({"policy": args.policy, "per_layer_hh": list(alloc.per_layer_hh),
                          "total": alloc.total, "fallback": alloc.fallback}) + "\n")
    return 0


def cmd_persistence(args, out) -> int:
    cfg = resolve_config(args)
    d = args.hidden or cfg.d
    l_prompt = args.prompt or cfg.l_prompt
    budget = CacheBudget(*(args.budget or (cfg.alpha_hh, cfg.alpha_rw)))
    hh, rw = budget.counts(l_prompt)
    x = gen_workload(cfg.seed, l_prompt + args.gen, d, args.dist)
    trace = h2o_dynamic_baseline(x, x, l_prompt, hh, rw)
    rep = persistence_analysis(trace)
    fr = rep.fractions
    if np.any(fr < 0) or np.any(fr > 1) or np.any(np.diff(fr) > 0):
        raise InvariantFailure("persistence fractions out of range or increasing")
    doc = rep.as_dict()
    doc.update({"seed": cfg.seed, "hh": hh, "rw": rw, "l_prompt": l_prompt, "gen": args.gen,
                "reference_range_real_models": [0.6, 0.8]})
    out.write(json.dumps(doc) + "\n")
    return 0


def build_cache(cfg: RunConfig):
    """Single-layer cache from a seeded prompt, then ``cfg.steps`` appended tokens."""
    x = gen_workload(cfg.seed, cfg.l_prompt + cfg.steps, cfg.d, cfg.distribution)
    prompt = x[: cfg.l_prompt]
    res = selective_flash_attn(prompt, prompt, prompt, causal=True, tiles=_tiles(cfg))
    hh, rw = CacheBudget(cfg.alpha_hh, cfg.alpha_rw).counts(cfg.l_prompt)
    cache, _ = prefill(prompt, prompt, res.a_cumul, hh, rw, cfg.n_r, cfg.make_quantizer())
    for row in x[cfg.l_prompt:]:
        cache.append(row, row)
    return cache


def cmd_dump(args, out) -> int:
    cfg = resolve_config(args)
    cache = build_cache(cfg)
    args.output.write_bytes(snapshot.dumps(cache))
    out.write(json.dumps({"path": str(args.output), **cache.snapshot_state()}) + "\n")
    return 0


def cmd_load(args, out) -> int:
    try:
        cache = snapshot.loads(args.input.read_bytes())
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    if cache.tokens_residual >= cache.n_r:
        raise InvariantFailure("residual buffer holds n_r or more tokens")
    out.write(json.dumps({"path": str(args.input), "d_key": cache.d_key, "n_r": cache.n_r,
                          **cache.snapshot_state()}) + "\n")
    return 0


COMMANDS = {
    "run": cmd_run,
    "verify": cmd_verify,
    "mem": cmd_mem,
    "allocate": cmd_allocate,
    "persistence": cmd_persistence,
    "dump": cmd_dump,
    "load": cmd_load,
}


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, out)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, DataError):
            print(f"minikv: invariant failure: {exc}", file=sys.stderr)
            return 1
        print(f"minikv: error: {exc}", file=sys.stderr)
        return 2
    except InvariantFailure as exc:
        print(f"minikv: invariant failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
