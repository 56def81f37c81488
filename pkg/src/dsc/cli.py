"""``dsc`` command line: verify, gradcheck, train, solve, bench.

Exit status is 0 on success, 1 when a check fails and 2 for usage or
config errors. Every run writes ``config.resolved.txt`` into ``--out`` so it
can be replayed exactly with ``--config``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from dsc import config as cfgmod
from dsc import perf
from dsc.budget import BackboneSpec, DenseArch, DscArch, InfeasibleTarget, MoEArch, MoLoRAArch, format_config_block, solve_dense_ffn, solve_dsc, solve_moe
from dsc.grad import PARAM_GROUPS, compute_guard, finite_diff_check
from dsc.layer import CHANNELWISE, SCALAR, forward_with_cache
from dsc.seeding import stream
from dsc.trainer import TrainConfig, make_synthetic_task, run_training
from dsc.verify import random_layer, run_all

OK, FAIL, USAGE = 0, 1, 2

# Reference values the solver should land near (1% band).
REFERENCE_SOLUTION = {
    "dense.d_ffn": 2611, "moe.d_expert": 545, "dsc.M": 1523, "dsc.d_base": 327,
    "dense.total": 35.00e6, "moe.total": 35.54e6, "dsc.total": 35.01e6,
    "moe.active": 28.00e6, "dsc.active": 28.00e6,
}


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_verify(conf: dict, out: Path) -> int:
    rows, lines, total = [], [], 0
    for seed in cfgmod.parse_seeds(conf):
        results = run_all(stream(seed, "verify"), n_configs=conf["n_configs"], tokens=conf["tokens"], fault=conf["inject_fault"])
        for r in results:
            total += len(r.violations)
            rows.append([seed, r.suite, r.cases, len(r.violations), f"{r.worst:.9g}"])
            lines.append(f"[seed {seed}] {r.suite:<20} {'PASS' if r.ok else 'FAIL'}  cases={r.cases} worst={r.worst:.3e}")
            lines += [f"    {v}" for v in r.violations[:20]]
    lines.append(f"{total} violations")
    report = "\n".join(lines) + "\n"
    _write(out, "verify.csv", _csv(["seed", "suite", "cases", "violations", "worst"], rows))
    _write(out, "verify.txt", report)
    print(report, end="")
    return OK if total == 0 else FAIL


def cmd_gradcheck(conf: dict, out: Path) -> int:
    h, thr = conf["h"], conf["threshold"]
    if h > 1e-3:
        print(f"warning: h={h:g} is large; central differences are truncation-dominated", file=sys.stderr)
    lambda_sets = {"none": (0.0, 0.0, 0.0, 0.0), "default": None, "strong": (1.0, 1.0, 1.0, 1.0)}
    rows, failed = [], []
    for seed in cfgmod.parse_seeds(conf):
        rng = stream(seed, "gradcheck")
        for inst in range(conf["instances"]):
            for mode in (SCALAR, CHANNELWISE):
                layer = random_layer(rng, conf["d"], conf["M"], conf["K"], mode, router_std=conf["router_std"])
                layer.config.mu = layer.config.K * layer.router.tau + 1.0  # S never reaches this: hinge active
                X = rng.standard_normal((conf["batch"], conf["d"]))
                guard = compute_guard(layer, forward_with_cache(layer, X))
                for lname, lams in lambda_sets.items():
                    rep = finite_diff_check(layer, X, h, lambdas=lams, seed=seed)
                    for g in PARAM_GROUPS:
                        skipped = sum(1 for s in rep.skipped if s[0] == g)
                        err = rep.max_rel_err[g]
                        rows.append([seed, inst, mode, lname, g, rep.checked[g], skipped, f"{err:.9g}"])
                        if not err < thr:
                            failed.append(f"seed={seed} instance={inst} {mode} lambdas={lname} group={g}: {err:.3e}")
                if not guard.passes():
                    print(f"note: instance {inst} ({mode}) is near a branch: {'; '.join(guard.violations())}")
    _write(out, "gradcheck.csv", _csv(["seed", "instance", "mode", "lambdas", "group", "checked", "skipped", "max_rel_err"], rows))
    worst: dict[str, tuple[float, int]] = {}
    for r in rows:
        e, sk = worst.get(r[4], (0.0, 0))
        worst[r[4]] = (max(e, float(r[7])), sk + r[6])
    print(f"{'group':<8} {'max_rel_err':>12} {'skipped':>8}")
    for g, (e, sk) in worst.items():
        print(f"{g:<8} {e:>12.3e} {sk:>8}")
    for f in failed:
        print(f"FAIL {f}")
    return FAIL if failed else OK


def cmd_train(conf: dict, out: Path) -> int:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    tc = TrainConfig(**{k: v for k, v in conf.items() if k in names})
    task = make_synthetic_task(tc.d, tc.C, tc.task_seed, tc.noise_std)
    res = run_training(tc, task, conf["steps"], cfgmod.parse_seeds(conf))
    _write(out, "metrics.csv", res.csv)
    rows = [[s, f"{res.final_mse[s]:.9g}", f"{m.utilization_entropy:.9g}", f"{m.active_expert_fraction:.9g}",
             f"{m.mean_S:.9g}", f"{m.max_coherence:.9g}"] for s, m in res.final_metrics.items()]
    _write(out, "final.csv", _csv(["seed", "eval_mse", "entropy", "active_frac", "mean_S", "max_coh"], rows))
    for r in rows:
        print(f"seed {r[0]}: eval_mse={r[1]} entropy={r[2]} mean_S={r[4]} max_coh={r[5]}")
    return OK


def _check_paper(budgets) -> list[str]:
    got = {}
    for b in budgets:
        for k, v in b.row().items():
            if k != "arch":
                got[f"{b.arch}.{k}"] = v
    lines = []
    for key, ref in REFERENCE_SOLUTION.items():
        rel = abs(got[key] - ref) / ref
        lines.append(f"{'PASS' if rel <= 0.01 else 'FAIL'} {key}: {got[key]} vs {ref:g} ({100 * rel:.3f}%)")
    return lines


def cmd_solve(conf: dict, out: Path, check_paper: bool) -> int:
    spec = BackboneSpec(conf["d_model"], conf["layers"], conf["heads"], conf["vocab"], conf["seq_len"])
    if conf["target_total"] <= 0 or conf["target_active"] <= 0:
        raise InfeasibleTarget("parameter targets must be positive")
    budgets = [
        solve_dense_ffn(spec, conf["target_total"]),
        solve_moe(spec, conf["N"], conf["top_k"], conf["target_active"]),
        solve_dsc(spec, conf["K"], conf["target_total"], conf["target_active"]),
    ]
    rows = [[b.arch, " ".join(f"{k}={v}" for k, v in b.config.__dict__.items()), b.total_params, b.active_params] for b in budgets]
    _write(out, "solve.csv", _csv(["arch", "config", "total", "active"], rows))
    _write(out, "solve.txt", format_config_block(budgets))
    for r in rows:
        print(f"{r[0]:<6} {r[1]:<32} total={r[2]:>12,} active={r[3]:>12,}")
    if not check_paper:
        return OK
    lines = _check_paper(budgets)
    print("\n".join(lines))
    return OK if all(l.startswith("PASS") for l in lines) else FAIL


def cmd_bench(conf: dict, out: Path, paper_dims: bool) -> int:
    if paper_dims:
        archs, d = perf.REFERENCE_ARCHS, 384
    else:
        d = conf["d"]
        archs = {
            "dense": DenseArch(conf["d_ffn"]),
            "moe": MoEArch(conf["N"], conf["d_expert"], conf["top_k"]),
            "molora": MoLoRAArch(conf["molora_M"], conf["molora_r"], conf["molora_K"], conf["d_base"]),
            "dsc": DscArch(conf["M"], conf["K"], conf["d_base"]),
        }
    backbone = BackboneSpec(d_model=d, heads=1)
    rows = perf.comparison_table(dtype_bytes=conf["dtype_bytes"], archs=archs, backbone=backbone)
    _write(out, "traffic.csv", perf.table_csv(rows))
    _write(out, "traffic.txt", perf.table_text(rows))
    print(perf.table_text(rows), end="")
    moe, dsc = archs["moe"], archs["dsc"]
    holds = perf.dsc_cheaper_than_moe(dsc.K, d, moe.top_k, moe.d_expert)
    print(f"2Kd < 2k d d_expert: {2 * dsc.K * d} < {2 * moe.top_k * d * moe.d_expert} -> {holds}")
    if conf["timing"]:
        dims = dict(M=dsc.M, K=dsc.K, N=moe.n_experts, d_expert=moe.d_expert, top_k=moe.top_k)
        timings = [perf.microbench_forward(k, d, conf["batch"], conf["repeats"], **dims) for k in ("dsc", "moe")]
        # wall-clock numbers: kept apart from the deterministic traffic table
        _write(out, "timing.csv", _csv(["kind", "median_ns", "p90_ns"], [[t.kind, f"{t.median_ns:.0f}", f"{t.p90_ns:.0f}"] for t in timings]))
        for t in timings:
            print(f"{t.kind}: median {t.median_ns / 1e6:.3f} ms, p90 {t.p90_ns / 1e6:.3f} ms")
    return OK if holds else FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in cfgmod.DEFAULTS:
        s = sub.add_parser(name)
        s.add_argument("--config", metavar="PATH")
        s.add_argument("--seed", type=int)
        s.add_argument("--seeds", metavar="LIST")
        s.add_argument("--out", metavar="DIR", default=None)
        if name == "train":
            s.add_argument("--steps", type=int)
        if name == "gradcheck":
            s.add_argument("--h", type=float)
        if name == "solve":
            s.add_argument("--check-paper", action="store_true")
        if name == "bench":
            s.add_argument("--paper-dims", action="store_true")
            s.add_argument("--timing", action="store_true")
    return p


def _dispatch(args, conf: dict, out: Path) -> int:
    if args.command == "verify":
        return cmd_verify(conf, out)
    if args.command == "gradcheck":
        return cmd_gradcheck(conf, out)
    if args.command == "train":
        return cmd_train(conf, out)
    if args.command == "solve":
        return cmd_solve(conf, out, args.check_paper)
    return cmd_bench(conf, out, args.paper_dims)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in ("seed", "seeds", "steps", "h") if getattr(args, k, None) is not None}
    if getattr(args, "timing", False):
        overrides["timing"] = 1
    try:
        conf = cfgmod.load(args.command, args.config, overrides)
        cfgmod.parse_seeds(conf)
        if args.command == "train" and conf["steps"] < 0:
            raise cfgmod.ConfigError("steps must be non-negative")
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE
    out = Path(args.out or f"dsc-out/{args.command}")
    _write(out, "config.resolved.txt", cfgmod.snapshot(args.command, conf))
    limit = threadpool_limits(limits=1) if os.environ.get("DSC_DETERMINISTIC") == "1" else contextlib.nullcontext()
    try:
        with limit, np.errstate(over="ignore"):
            return _dispatch(args, conf, out)
    except (InfeasibleTarget, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return FAIL


if __name__ == "__main__":
    sys.exit(main())
