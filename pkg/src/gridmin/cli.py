"""Command-line front end.

``gridmin solve`` runs one case with one method and writes a JSON report
plus a per-iteration convergence CSV.  ``gridmin compare`` runs a set of
cases across methods and load scales and writes the comparison tables.

Exit codes: 0 converged, 1 solver failure, 2 input error.
Set ``GRIDMIN_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .case_io import load_case, write_report
from .driver import solve_nr
from .ecf_engine import NrOptions
from .gmin_homotopy import GminOptions, SubstitutionError, gmin_solve
from .network_model import CaseError, NetworkCase, scale_loading, validate
from .report import SolveReport
from .sparse_linear import SingularMatrixError
from .tx_homotopy import TxOptions, tx_solve

log = logging.getLogger("gridmin")

METHODS = ("nr_flat", "gmin", "tx")
EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2

TABLE_COLUMNS = ("case", "load_scale", "method", "converged", "total_iterations",
                 "initial_deviation_vm", "wall_time_ms", "max_vm_diff", "max_va_diff",
                 "message")


class InputError(Exception):
    """Bad command-line input or unreadable case data (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    case_path: str
    method: str = "gmin"
    load_scale: float = 1.0
    tol: float = 1e-6
    max_iter: int = 25
    v_limit: float = 0.1
    q_limit: float = 0.5
    y_factor: float = 100.0
    mu_min_step: float = 1e-4
    start: str = "flat"
    out: str | None = None
    trace: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.load_scale > 0:
            raise InputError("load scale must be positive")
        if self.start not in ("flat", "case"):
            raise InputError("start must be 'flat' or 'case'")

    def nr_options(self) -> NrOptions:
        return NrOptions(tol=self.tol, max_iter=self.max_iter,
                         v_step_limit=self.v_limit, q_step_limit=self.q_limit)


def prepare_case(config: RunConfig) -> tuple[NetworkCase, list[str]]:
    """Load, scale and validate the case; any problem is an input error."""
    path = Path(config.case_path)
    try:
        case = load_case(path)
    except OSError as exc:
        raise InputError(f"cannot read case file {path}: {exc.strerror or exc}") from exc
    except (CaseError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    notes = []
    if config.load_scale != 1.0:
        before = sum(g.p_set for g in case.in_service_generators() if g.bus != case.slack.id)
        case = scale_loading(case, config.load_scale)
        after = sum(g.p_set for g in case.in_service_generators() if g.bus != case.slack.id)
        ratio = after / before if before else 1.0
        notes.append(f"load_scale={config.load_scale!r}: bus P/Q demand scaled by the factor; "
                     f"non-slack generator P set points scaled by {ratio:.12g}")
    try:
        validate(case)
    except CaseError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return case, notes


def failure_report(case: NetworkCase, method: str, message: str, options: dict,
                   notes, started: float) -> SolveReport:
    return SolveReport(case=case.name, method=method, converged=False, message=message,
                       total_iterations=0, mu_trace=[], steps=[], initial_deviation_vm=None,
                       bus_ids=list(case.bus_ids), options=options, notes=list(notes),
                       timing={"wall_time_ms": (time.perf_counter() - started) * 1e3})


def solve_case(case: NetworkCase, config: RunConfig, notes=()) -> SolveReport:
    """Dispatch to the configured method.  Numerical breakdowns that escape
    the solvers (singular relaxed circuit, collapsed voltages) become a
    failed report rather than an exception."""
    started = time.perf_counter()
    nr = config.nr_options()
    try:
        if config.method == "nr_flat":
            return solve_nr(case, nr, start=config.start, notes=notes)
        if config.method == "gmin":
            return gmin_solve(case, GminOptions(nr=nr, mu_min_step=config.mu_min_step),
                              notes=notes)
        return tx_solve(case, TxOptions(y_factor=config.y_factor, nr=nr,
                                        mu_min_step=config.mu_min_step), notes=notes)
    except (CaseError, SingularMatrixError, SubstitutionError) as exc:
        log.warning("%s on %s failed: %s", config.method, case.name, exc)
        return failure_report(case, config.method, f"{type(exc).__name__}: {exc}",
                              asdict(config), notes, started)


def run(config: RunConfig, stdout=None) -> int:
    """Solve one case and write the requested report files."""
    stdout = stdout or sys.stdout
    case, notes = prepare_case(config)
    report = solve_case(case, config, notes)
    if config.out:
        Path(config.out).write_text(write_report(report, "json"))
    if config.trace:
        Path(config.trace).write_text(write_report(report, "csv"))
    status = "converged" if report.converged else "FAILED"
    print(f"{case.name} {config.method}: {status} in {report.total_iterations} iterations "
          f"({report.message})", file=stdout)
    return EXIT_OK if report.converged else EXIT_FAILED


# -- compare ------------------------------------------------------------------

def discover_cases(items: list[str]) -> list[Path]:
    """Expand a directory (all ``.m``/``.json`` files) or an explicit list
    (space or comma separated) into case paths."""
    paths = []
    for item in items:
        for part in filter(None, item.split(",")):
            p = Path(part)
            if p.is_dir():
                found = sorted(q for q in p.iterdir() if q.suffix in (".m", ".json"))
                if not found:
                    raise InputError(f"no case files in directory {p}")
                paths.extend(found)
            elif p.is_file():
                paths.append(p)
            else:
                raise InputError(f"case file not found: {p}")
    if not paths:
        raise InputError("no cases given")
    return paths


def _run_one(config: RunConfig) -> SolveReport:
    case, notes = prepare_case(config)
    return solve_case(case, config, notes)


def _cross_check(reports: list[SolveReport]) -> list[tuple[float | None, float | None]]:
    """Max |V| and angle differences of each report against the first
    converged one in the group."""
    anchor = next((r for r in reports if r.converged), None)
    out = []
    for r in reports:
        if anchor is None or not r.converged:
            out.append((None, None))
            continue
        out.append((float(np.max(np.abs(np.subtract(r.vm, anchor.vm)), initial=0.0)),
                    float(np.max(np.abs(np.subtract(r.va, anchor.va)), initial=0.0))))
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def compare(case_paths: list[Path], methods: list[str], scales: list[float],
            base: RunConfig, jobs: int = 1) -> list[dict]:
    """One row per (case, load scale, method), in that nesting order."""
    configs = [replace(base, case_path=str(p), method=m, load_scale=s)
               for p in case_paths for s in scales for m in methods]
    for cfg in configs:
        prepare_case(cfg)  # surface input errors before any solving
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_one, configs))
    else:
        reports = [_run_one(cfg) for cfg in configs]

    rows = []
    k = len(methods)
    for g in range(0, len(configs), k):
        group = reports[g:g + k]
        for cfg, rep, (dvm, dva) in zip(configs[g:g + k], group, _cross_check(group)):
            rows.append({
                "case": rep.case, "load_scale": cfg.load_scale, "method": cfg.method,
                "converged": rep.converged, "total_iterations": rep.total_iterations,
                "initial_deviation_vm": rep.initial_deviation_vm,
                "wall_time_ms": rep.wall_time_ms, "max_vm_diff": dvm, "max_va_diff": dva,
                "message": rep.message,
            })
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in TABLE_COLUMNS])
    return buf.getvalue()


def runtime_csv(rows: list[dict]) -> str:
    """Plot-ready runtime bars: one row per (case, load scale), one column
    per method."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case", "load_scale"] + [f"{m}_ms" for m in methods])
    for key, group in _grouped(rows).items():
        writer.writerow(list(key) + [_fmt(group[m]["wall_time_ms"]) if m in group else ""
                                     for m in methods])
    return buf.getvalue()


def iteration_csv(rows: list[dict]) -> str:
    """Iteration-count triple per case: (case, <method>_iters, ...).
    Failed runs are left blank."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case", "load_scale"] + [f"{m}_iters" for m in methods])
    for key, group in _grouped(rows).items():
        writer.writerow(list(key) + [
            str(group[m]["total_iterations"]) if m in group and group[m]["converged"] else ""
            for m in methods])
    return buf.getvalue()


def _grouped(rows):
    groups: dict[tuple, dict] = {}
    for r in rows:
        groups.setdefault((r["case"], _fmt(r["load_scale"])), {})[r["method"]] = r
    return groups


def text_table(rows: list[dict]) -> str:
    head = f"{'case':<16}{'scale':>7} {'method':<8}{'conv':>5}{'iters':>7}{'dev_vm':>11}{'ms':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        dev = "" if r["initial_deviation_vm"] is None else f"{r['initial_deviation_vm']:.4g}"
        ms = "" if r["wall_time_ms"] is None else f"{r['wall_time_ms']:.1f}"
        lines.append(f"{r['case']:<16}{r['load_scale']:>7g} {r['method']:<8}"
                     f"{'yes' if r['converged'] else 'no':>5}{r['total_iterations']:>7}"
                     f"{dev:>11}{ms:>10}")
    return "\n".join(lines) + "\n"


# -- argument parsing -----------------------------------------------------------

def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol", type=float, default=1e-6, help="residual infinity-norm tolerance")
    p.add_argument("--max-iter", type=int, default=25, help="Newton iterations per solve")
    p.add_argument("--v-limit", type=float, default=0.1, help="per-component voltage step limit")
    p.add_argument("--q-limit", type=float, default=0.5, help="per-unit Q step limit")
    p.add_argument("--y-factor", type=float, default=100.0, help="Tx-stepping admittance gain")
    p.add_argument("--mu-min-step", type=float, default=1e-4,
                   help="smallest homotopy step before giving up")
    p.add_argument("--start", choices=("flat", "case"), default="flat",
                   help="initial point for nr_flat")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridmin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve one case with one method")
    solve.add_argument("--case", required=True, help="MATPOWER .m or gridmin .json case")
    solve.add_argument("--method", choices=METHODS, default="gmin")
    solve.add_argument("--load-scale", type=float, default=1.0)
    _add_solver_flags(solve)
    solve.add_argument("--out", help="report JSON path")
    solve.add_argument("--trace", help="convergence trace CSV path")

    cmp_ = sub.add_parser("compare", help="compare methods across cases and load scales")
    cmp_.add_argument("--cases", nargs="+", required=True,
                      help="a directory of cases, or case files (space or comma separated)")
    cmp_.add_argument("--methods", default="gmin,tx", help="comma-separated method list")
    cmp_.add_argument("--load-scale", nargs="+", default=["1.0"],
                      help="one or more load scales (space or comma separated)")
    _add_solver_flags(cmp_)
    cmp_.add_argument("--out", default="table.csv", help="comparison table CSV path")
    cmp_.add_argument("--jobs", type=int, default=1, help="worker processes")
    return parser


def _split_floats(items: list[str]) -> list[float]:
    try:
        return [float(x) for item in items for x in item.split(",") if x]
    except ValueError as exc:
        raise InputError(f"bad load scale: {exc}") from exc


def _configure_logging() -> None:
    level = os.environ.get("GRIDMIN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    common = dict(tol=args.tol, max_iter=args.max_iter, v_limit=args.v_limit,
                  q_limit=args.q_limit, y_factor=args.y_factor,
                  mu_min_step=args.mu_min_step, start=args.start)
    try:
        if args.command == "solve":
            config = RunConfig(case_path=args.case, method=args.method,
                               load_scale=args.load_scale, out=args.out, trace=args.trace,
                               **common)
            return run(config)

        methods = [m for m in args.methods.split(",") if m]
        scales = _split_floats(args.load_scale)
        if not methods:
            raise InputError("no methods given")
        base = RunConfig(case_path="", method=methods[0], **common)
        # RunConfig validates; building one per method and scale rejects bad
        # values before any case is solved.
        for m in methods:
            replace(base, method=m)
        for k in scales:
            replace(base, load_scale=k)
        if args.jobs < 1:
            raise InputError("--jobs must be at least 1")
        rows = compare(discover_cases(args.cases), methods, scales, base, args.jobs)
        out = Path(args.out)
        out.write_text(table_csv(rows))
        out.with_name(out.stem + "_runtime.csv").write_text(runtime_csv(rows))
        out.with_name(out.stem + "_iterations.csv").write_text(iteration_csv(rows))
        sys.stdout.write(text_table(rows))
        return EXIT_OK if all(r["converged"] for r in rows) else EXIT_FAILED
    except InputError as exc:
        print(f"gridmin: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
