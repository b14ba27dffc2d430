"""Command line front end: ``stepstone <subcommand> ...``.

Exit codes: 0 ok, 1 configuration or usage error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .addrmap import PimLevel, load_mapping, validate_mapping
from .agen import AddressGenerator
from .config import SimConfig, load_config, parse_overrides
from .energy import energy
from .errors import ConfigError, StepStoneError
from .gemm import Mode, build_trace, gemm_any, run_gemm
from .grouping import MatrixGeometry, derive_groups
from .planner import Subset, evaluate, half_subset
from .timing import PimTopology, roofline, simulate
from .workloads import candidate_totals, choose_for_gemm, get_workload, run_workload

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2

SWEEP_COLUMNS = ["m", "k", "n", "level", "subset", "mode", "pims", "localization", "execution",
                 "reduction", "total_cycles", "total_ns", "gflops", "pj_per_flop"]


def _config(args) -> SimConfig:
    cfg = load_config(getattr(args, "config", None), parse_overrides(getattr(args, "set", None)))
    if getattr(args, "mapping", None):
        cfg.mapping_name = args.mapping
    if getattr(args, "mode", None):
        cfg.mode = Mode.parse(args.mode)
    if getattr(args, "level", None):
        cfg.level = None if args.level == "auto" else PimLevel.parse(args.level)
    return cfg


def simulate_gemm(cfg: SimConfig, m: int, k: int, n: int):
    """Plan and simulate one GEMM; returns (level, subset label, [(mapping, plan, report, topo)])."""
    mapping = cfg.mapping()
    level, kind, pieces = choose_for_gemm(m, k, n, cfg, mapping)
    subset = Subset(level) if kind == "all" else half_subset(mapping, level)
    out = []
    for p in pieces:
        mm, plan, _ = evaluate(mapping, p.geom, n, level, subset, cfg.mode, cfg.timing, cfg.contention,
                               topo_overrides=cfg.topology or None, spread=cfg.spread)
        topo = PimTopology.from_mapping(mm, level, cfg.timing, **cfg.topology)
        rep = simulate(build_trace(plan), mm, topo, cfg.timing, cfg.contention, plan=plan)
        out.append((mm, plan, rep, topo))
    return level, kind, out


def _summary(m, k, n, level, kind, runs, cfg) -> dict:
    phases: dict[str, float] = {}
    for _, _, rep, _ in runs:
        for key in ("localization", "execution", "reduction"):
            phases[key] = phases.get(key, 0.0) + rep.phase_cycles[key]
    total_cycles = sum(r.total_cycles for _, _, r, _ in runs)
    total_ns = sum(r.total_ns for _, _, r, _ in runs)
    flops = 2 * m * k * n
    joules = sum(energy(r, cfg.energy, level, topo)["total_joules"] for _, _, r, topo in runs)
    return {"m": m, "k": k, "n": n, "level": level.value, "subset": kind, "mode": cfg.mode.value,
            "pims": max(len(p.active_pims) for _, p, _, _ in runs),
            **phases, "total_cycles": total_cycles, "total_ns": total_ns,
            "gflops": flops / total_ns if total_ns else 0.0,
            "pj_per_flop": joules * 1e12 / flops}


# -- subcommands ----------------------------------------------------------------

def cmd_validate_mapping(args) -> int:
    try:
        mapping = load_mapping(args.mapping)
    except (OSError, StepStoneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rep = validate_mapping(mapping)
    print(json.dumps({"name": mapping.name, "ok": rep.ok, "invertible": rep.invertible,
                      "rank": rep.rank, "physical_bits": rep.physical_bits,
                      "unused_bits": rep.unused_bits, "problems": rep.problems}, indent=2))
    return EXIT_OK if rep.ok else EXIT_VERIFY


def cmd_plan(args) -> int:
    cfg = _config(args)
    if args.choose:
        cfg.level = None
    elif cfg.level is None:
        raise ConfigError("give --level or --choose")
    mapping = cfg.mapping()
    level, kind, pieces = choose_for_gemm(args.m, args.k, args.n, cfg, mapping)
    subset = Subset(level) if kind == "all" else half_subset(mapping, level)
    plans = []
    for p in pieces:
        mm, plan, est = evaluate(mapping, p.geom, args.n, level, subset, cfg.mode, cfg.timing,
                                 cfg.contention, topo_overrides=cfg.topology or None, spread=cfg.spread)
        plans.append({"panel": [p.row0, p.col0], "mapping": mm.name, "estimate": est, **plan.describe()})
    if args.choose:
        sums, _ = candidate_totals(args.m, args.k, args.n, cfg, mapping)
        print(f"chosen: level={level.value} subset={kind}")
        print(f"{'candidate':<10} {'pims':>5} {'estimate_cycles':>16}")
        for (lv, sub), v in sums.items():
            cells = f"{v[1]:>5} {v[0]:>16.0f}" if v else f"{'-':>5} {'infeasible':>16}"
            print(f"{lv + '/' + sub:<10} {cells}")
    out = {"level": level.value, "subset": kind, "panels": plans, "config": cfg.to_json()}
    if args.dump_plan:
        with open(args.dump_plan, "w") as fh:
            json.dump(out, fh, indent=2, default=str)
    if not args.choose:
        print(json.dumps(out if args.verbose else {k: out[k] for k in ("level", "subset", "panels")},
                         indent=2, default=str))
    return EXIT_OK


def cmd_agen_trace(args) -> int:
    cfg = _config(args)
    mapping = cfg.mapping()
    level = cfg.level or PimLevel.BANK_GROUP
    geom = MatrixGeometry(args.m, args.k, 4, args.base)
    spec = derive_groups(mapping, geom, level)
    gen = AddressGenerator(spec, geom, args.pim, args.group)
    addrs, costs = gen.stream(naive=args.naive)
    w = csv.writer(sys.stdout)
    w.writerow(["step", "addr", "iterations"])
    limit = args.limit if args.limit else len(addrs)
    for i, (a, c) in enumerate(zip(addrs[:limit], costs[:limit])):
        w.writerow([i, f"{int(a):#x}", int(c)])
    return EXIT_OK


TRACE_COLUMNS = ["panel", "pim", "kernel", "kind", "group", "row_part", "col_part", "blocks",
                 "batch", "fill_b_bytes", "fill_c_bytes", "drain_c_bytes"]


def _write_trace_csv(path, runs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for i, (_, plan, _, _) in enumerate(runs):
            trace = build_trace(plan)
            for pim in trace.pims:
                for j, k in enumerate(trace.kernels[pim]):
                    w.writerow([i, pim, j, k.kind, k.group, k.row_part, k.col_part, k.blocks,
                                k.batch, k.fill_b_bytes, k.fill_c_bytes, k.drain_c_bytes])


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    level, kind, runs = simulate_gemm(cfg, args.m, args.k, args.n)
    summary = _summary(args.m, args.k, args.n, level, kind, runs, cfg)
    status = EXIT_OK
    if args.verify:
        rng = np.random.default_rng(cfg.seed)
        A = rng.standard_normal((args.m, args.k)).astype(np.float32)
        B = rng.standard_normal((args.k, args.n)).astype(np.float32)
        ref = A.astype(np.float64) @ B.astype(np.float64)
        if len(runs) == 1:
            C, _ = run_gemm(A, B, runs[0][1])
        else:
            C = gemm_any(A, B, cfg.mapping(), level, cfg.mode)
        err = float(np.abs(C - ref).max() / max(np.abs(ref).max(), 1e-30))
        summary["verify_rel_err"] = err
        if not err <= 1e-4:
            status = EXIT_VERIFY
    if args.trace_csv:
        _write_trace_csv(args.trace_csv, runs)
    report = {"summary": summary,
              "panels": [{**r.to_json(), "energy": energy(r, cfg.energy, level, topo)}
                         for _, _, r, topo in runs],
              "config": cfg.to_json()}
    text = json.dumps(report, indent=2, default=str)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    print(text if args.verbose else json.dumps(summary, indent=2))
    return status


def cmd_run_workload(args) -> int:
    cfg = _config(args)
    spec = get_workload(args.workload)
    extra = dict(cfg.workload_args)
    for key in ("batch", "seq_len", "cpu_other_ns"):
        if getattr(args, key, None) is not None:
            extra[key] = getattr(args, key)
    if extra:
        spec = spec.with_args(**extra)
    rep = run_workload(spec, cfg)
    text = json.dumps(rep.to_json(), indent=2, default=str)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    print(text)
    return EXIT_OK


def _sweep_job(job):
    cfg, m, k, n = job
    level, kind, runs = simulate_gemm(cfg, m, k, n)
    return _summary(m, k, n, level, kind, runs, cfg)


def _ints(text: str) -> list[int]:
    return [int(x, 0) for x in text.split(",") if x]


def cmd_sweep(args) -> int:
    base = _config(args)
    levels = args.levels.split(",") if args.levels else [base.level.value if base.level else "auto"]
    modes = args.modes.split(",") if args.modes else [base.mode.value]
    jobs = []
    for m in _ints(args.m):
        for k in _ints(args.k):
            for n in _ints(args.n):
                for lv in levels:
                    for md in modes:
                        cfg = replace(base, level=None if lv == "auto" else PimLevel.parse(lv),
                                      mode=Mode.parse(md))
                        jobs.append((cfg, m, k, n))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))  # map keeps config order
    else:
        rows = [_sweep_job(j) for j in jobs]
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_roofline(args) -> int:
    cfg = _config(args)
    mapping = cfg.mapping()
    levels = [cfg.level] if cfg.level else list(PimLevel)
    geom = MatrixGeometry(args.m, args.k, 4, 0)
    out = open(args.emit_plot_data, "w", newline="") if args.emit_plot_data else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["level", "m", "k", "n", "intensity_flop_per_byte", "bound_gflops",
                    "peak_gflops", "peak_gbps"])
        for level in levels:
            topo = PimTopology.from_mapping(mapping, level, cfg.timing, **cfg.topology)
            for n in _ints(args.n):
                x, y = roofline(topo, cfg.timing, geom, n)
                w.writerow([level.value, args.m, args.k, n, f"{x:.6g}", f"{y:.6g}",
                            f"{topo.peak_gflops():.6g}", f"{topo.peak_gbps(cfg.timing):.6g}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _common(p, level=True, mode=True):
    p.add_argument("--config", help="key=value config file (may include others)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--mapping", help="mapping file or built-in name")
    if level:
        p.add_argument("--level", help="ch, dv, bg or auto")
    if mode:
        p.add_argument("--mode", help="stp, echo, ncho or pei")


def _gemm_dims(p, batch=True):
    p.add_argument("--m", type=int, help="rows of A")
    p.add_argument("--k", type=int, help="columns of A")
    p.add_argument("--matrix", metavar="MxK", help="shape of A, instead of --m/--k")
    if batch:
        p.add_argument("--n", "--batch", dest="n", type=int, default=4, help="batch size")


def _resolve_dims(args):
    if getattr(args, "matrix", None):
        try:
            args.m, args.k = (int(x) for x in args.matrix.lower().split("x"))
        except ValueError:
            raise ConfigError(f"--matrix must look like 1024x4096, got {args.matrix!r}") from None
    if hasattr(args, "matrix"):
        if args.m is None or args.k is None:
            raise ConfigError("give --matrix MxK or both --m and --k")
        if args.m < 1 or args.k < 1:
            raise ConfigError("matrix dims must be >= 1")
    n = getattr(args, "n", None)
    if isinstance(n, int) and n < 1:
        raise ConfigError("batch size must be >= 1")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are configuration errors; 2 is reserved for failed verification
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="stepstone", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate-mapping", help="check a mapping file is complete and invertible")
    p.add_argument("mapping")
    p.set_defaults(func=cmd_validate_mapping)

    p = sub.add_parser("plan", help="show the execution plan or the planner's choice")
    _common(p)
    _gemm_dims(p)
    p.add_argument("--choose", action="store_true", help="let the planner pick level and subset")
    p.add_argument("--dump-plan", metavar="FILE", help="write the full plan as JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("agen-trace", help="CSV of the addresses one PIM generates for one group")
    _common(p, mode=False)
    _gemm_dims(p, batch=False)
    p.add_argument("--base", type=lambda s: int(s, 0), default=0)
    p.add_argument("--pim", type=int, default=0)
    p.add_argument("--group", type=int, default=0)
    p.add_argument("--naive", action="store_true", help="increment-and-check costs instead")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_agen_trace)

    p = sub.add_parser("run", help="simulate one GEMM and print the report")
    _common(p)
    _gemm_dims(p)
    p.add_argument("--seed", type=int, help="RNG seed for --verify operands (default: config seed)")
    p.add_argument("--verify", action="store_true", help="also check C numerically (exit 2 on mismatch)")
    p.add_argument("--output", "-O", help="write the full JSON report here")
    p.add_argument("--trace-csv", metavar="FILE", help="write one row per kernel of the event trace")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("run-workload", help="end-to-end estimate of a built-in model")
    _common(p)
    p.add_argument("workload", help="dlrm, bert, gpt2 or xlm")
    p.add_argument("--batch", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--cpu-other-ns", dest="cpu_other_ns", type=float)
    p.add_argument("--output", "-O")
    p.set_defaults(func=cmd_run_workload)

    p = sub.add_parser("sweep", help="CSV over a grid of sizes, levels and modes")
    _common(p, level=False, mode=False)
    p.add_argument("--m", required=True, help="comma separated")
    p.add_argument("--k", required=True, help="comma separated")
    p.add_argument("--n", default="4", help="comma separated")
    p.add_argument("--levels", help="comma separated, 'auto' lets the planner pick")
    p.add_argument("--modes", help="comma separated")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output", "-O", help="CSV file (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("roofline", help="roofline coordinates per level and batch size")
    _common(p, mode=False)
    p.add_argument("--m", type=int, default=1024)
    p.add_argument("--k", type=int, default=4096)
    p.add_argument("--n", default="1,2,4,8,16,32,64")
    p.add_argument("--emit-plot-data", metavar="CSV", help="write tidy CSV here instead of stdout")
    p.set_defaults(func=cmd_roofline)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        _resolve_dims(args)
        return args.func(args)
    except (StepStoneError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
