"""Command-line front end.

``cbsprob analyze|simulate|optimize --config FILE [--solver S] [--out FILE] [--seed N] [--csv FILE]``

Exit status: 0 success, 2 infeasible optimisation, 3 configuration error,
4 numerical failure.  ``CBSPROB_THREADS`` sets the worker count for
independent sweep points; rows are always reported in sweep order.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from cbsprob.config import ConfigError, RunConfig, TaskConfig, load_config, materialise
from cbsprob.distributions import resample
from cbsprob.optimizer import exact_probabilities, optimize, report_table, resolve_delta
from cbsprob.qbdp import DivergentReservationError, ReservationParams, build_chain, chain_to_json
from cbsprob.simulator import merge, simulate
from cbsprob.solvers import Method, SolverError, deadline_probability, solve

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4
REPORT_FORMAT = "cbsprob-report v1"
THREADS_ENV = "CBSPROB_THREADS"


class NumericalFailure(RuntimeError):
    """A solver failed; the message carries task, budget and solver context."""


@dataclass
class Report:
    mode: str
    record: dict
    table: str
    csv_header: list[str] = field(default_factory=list)
    csv_rows: list[list] = field(default_factory=list)
    exit_code: int = EXIT_OK

    def to_json(self) -> str:
        return json.dumps(self.record, indent=2, sort_keys=True) + "\n"


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _ordered_map(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _format_table(header: list[str], rows: list[list[str]], title: str = "") -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(line.rstrip() for line in lines)


# ---------------------------------------------------------------- analyze

def _analyze_point(task: TaskConfig, budget: int, solver: str, policy: str,
                   dump_chain: bool) -> dict:
    start = time.perf_counter()
    step = resolve_delta(policy, budget)
    params = ReservationParams(task.period, task.server_period, budget, step)
    row = {
        "task": task.name,
        "budget": budget,
        "bandwidth": params.bandwidth,
        "solver": solver,
        "delta_policy": policy,
        "delta": step,
    }
    try:
        chain = build_chain(resample(task.pmf, step), params)
    except DivergentReservationError:
        row.update(H=None, n=None, classification="Divergent", pi0=0.0, p_meet=0.0,
                   conservative=True)
    else:
        if dump_chain:
            print(chain_to_json(chain), file=sys.stderr)
        try:
            state = solve(chain, solver)
            p = 1.0 if chain.always_meets else deadline_probability(state, chain, task.deadline)
        except (SolverError, ArithmeticError, ValueError) as exc:
            raise NumericalFailure(f"task {task.name}, budget {budget}, solver {solver}, "
                                   f"delta {step}: {exc}") from exc
        row.update(H=chain.H, n=chain.n, classification=state.classification.value,
                   pi0=float(state.pi0), p_meet=float(p), conservative=state.conservative)
    row["runtime_us"] = int(1e6 * (time.perf_counter() - start))
    return row


def run_analyze(cfg: RunConfig, workers: int = 1, dump_chain: bool = False) -> Report:
    points = []
    for task in cfg.tasks:
        for budget in task.budgets:
            for solver in task.solvers:
                for policy in task.delta_sweep or [task.delta_for(solver)]:
                    points.append((task, budget, solver, policy))
    start = time.perf_counter()
    rows = _ordered_map(lambda p: _analyze_point(*p, dump_chain), points, workers)
    header = ["Task", "Budget (us)", "B (%)", "Solver", "Delta (us)", "Class", "pi0",
              "P{meet}", "Time (us)"]
    text_rows = [[r["task"], r["budget"], f"{100 * r['bandwidth']:.1f}", r["solver"], r["delta"],
                  r["classification"], f"{r['pi0']:.4f}", f"{r['p_meet']:.4f}", r["runtime_us"]]
                 for r in rows]
    csv_header = ["task", "budget", "bandwidth", "solver", "delta_policy", "delta",
                  "classification", "pi0", "p_meet", "runtime_us"]
    record = {
        "format": REPORT_FORMAT,
        "mode": "analyze",
        "config": cfg.resolved(),
        "results": rows,
        "runtime_us": int(1e6 * (time.perf_counter() - start)),
    }
    return Report("analyze", record, _format_table(header, text_rows), csv_header,
                  [[r[k] for k in csv_header] for r in rows])


# ---------------------------------------------------------------- simulate

def run_simulate(cfg: RunConfig, workers: int = 1) -> Report:
    """Replay every (task, budget) pair; the report omits wall-clock times."""
    points = [(t, q) for t in cfg.tasks for q in t.budgets]
    reps = max(1, cfg.replications)
    jobs = [(i, r, t, q) for i, (t, q) in enumerate(points) for r in range(reps)]

    def one(item):
        i, r, task, budget = item
        params = ReservationParams(task.period, task.server_period, budget, 1)
        seed = cfg.seed + i * reps + r
        return simulate(task.pmf, params, cfg.jobs, cfg.warmup, seed)

    results = _ordered_map(one, jobs, workers)
    rows = []
    csv_rows = []
    for i, (task, budget) in enumerate(points):
        group = results[i * reps:(i + 1) * reps]
        pooled, samples = merge(group)
        rows.append({
            "task": task.name,
            "budget": budget,
            "bandwidth": budget / task.server_period,
            "p_meet_pooled": pooled,
            "samples": samples,
            "replications": [g.as_record() for g in group],
        })
        hist: dict[int, int] = {}
        for g in group:
            for k, c in g.delay_histogram.items():
                hist[k] = hist.get(k, 0) + c
        csv_rows += [[task.name, budget, k, c] for k, c in sorted(hist.items())]
    header = ["Task", "Budget (us)", "B (%)", "P{meet}", "99% CI +/-", "Jobs"]
    text_rows = [[r["task"], r["budget"], f"{100 * r['bandwidth']:.1f}",
                  f"{r['p_meet_pooled']:.4f}",
                  f"{max(g['ci99_halfwidth'] for g in r['replications']):.4f}", r["samples"]]
                 for r in rows]
    record = {"format": REPORT_FORMAT, "mode": "simulate", "config": cfg.resolved(),
              "results": rows}
    return Report("simulate", record, _format_table(header, text_rows),
                  ["task", "budget", "delay_in_server_periods", "count"], csv_rows)


# ---------------------------------------------------------------- optimize

def run_optimize(cfg: RunConfig, workers: int = 1) -> Report:
    solver = Method(cfg.solvers[0])
    specs = [t.to_spec() for t in cfg.tasks]
    try:
        alloc = optimize(specs, cfg.total_bandwidth, solver, cfg.resolution, workers=workers)
        if alloc.feasible and cfg.exact:
            alloc = exact_probabilities(specs, alloc, Method.MATRIX_GEOMETRIC, cfg.exact_delta)
    except (SolverError, ArithmeticError) as exc:
        raise NumericalFailure(f"optimize ({solver.value}): {exc}") from exc
    record = {"format": REPORT_FORMAT, "mode": "optimize", "config": cfg.resolved(),
              "allocation": alloc.as_record(), "runtime_us": alloc.runtime_us}
    if not alloc.feasible:
        table = f"infeasible: binding constraint is {alloc.binding}"
        return Report("optimize", record, table, exit_code=EXIT_INFEASIBLE)
    csv_header = ["task", "budget", "bandwidth", "p_meet", "exact_p_meet", "quality"]
    csv_rows = [[a.name, a.budget, a.bandwidth, a.p_meet, a.exact_p_meet, a.quality]
                for a in alloc.tasks]
    table = report_table(alloc) + (f"\nminimum quality {alloc.objective_value:.3f}, "
                                   f"total bandwidth {alloc.total_bandwidth:.4f}")
    return Report("optimize", record, table, csv_header, csv_rows)


def run(cfg: RunConfig, workers: int | None = None, dump_chain: bool = False) -> Report:
    """Execute a validated configuration (PMFs are loaded here)."""
    workers = thread_count() if workers is None else workers
    materialise(cfg)
    if cfg.mode == "analyze":
        return run_analyze(cfg, workers, dump_chain)
    if cfg.mode == "simulate":
        return run_simulate(cfg, workers)
    return run_optimize(cfg, workers)


def write_csv(report: Report, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(report.csv_header)
        writer.writerows(report.csv_rows)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cbsprob", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="mode", required=True, parser_class=_Parser)
    for mode in ("analyze", "simulate", "optimize"):
        p = sub.add_parser(mode)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--solver", choices=[m.value for m in Method],
                       help="override the configured solver(s)")
        p.add_argument("--out", help="write the JSON report here ('-' for stdout)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--csv", help="write sweep rows / histogram / allocation as CSV")
        p.add_argument("-q", "--quiet", action="store_true", help="suppress the text table")
        if mode == "analyze":
            p.add_argument("--dump-chain", action="store_true",
                           help="print each chain's coefficients to stderr")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> None:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.solver:
        cfg.solvers = [args.solver]
        for task in cfg.tasks:
            policy = task.delta_for(args.solver)
            task.solvers = [args.solver]
            task.delta = {args.solver: policy}
    if args.out:
        cfg.output = args.out
    if args.csv:
        cfg.csv = args.csv


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, mode=args.mode)
        _apply_overrides(cfg, args)
        report = run(cfg, dump_chain=getattr(args, "dump_chain", False))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if cfg.output == "-":
        sys.stdout.write(report.to_json())
    else:
        if cfg.output:
            Path(cfg.output).write_text(report.to_json())
        if not args.quiet:
            print(report.table)
    if cfg.csv and report.csv_header:
        write_csv(report, cfg.csv)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
