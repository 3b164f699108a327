"""Command line harness: run cases through both OPF pipelines and report.

    convopf run ieee14 --mode both
    convopf run path/to/case.m --mode convex --format json --trace out/
    convopf suite manifest.json

Exit codes: 0 success, 1 tolerance failure, 2 input error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .case_io import BUNDLED_CASES, DATA_DIR, CaseParseError, CaseValidationError, load_case, to_network
from .convexify import MAX_ANGLE_DIFF, ConvexityError, convexify, recover
from .ipm import OPTIMAL, SolverOptions, solve, write_log_csv
from .model import ModelError
from .network import UnsupportedBranchError, build_admittance
from .opf import build_opf
from .powerflow import dispatch_from_point, newton_raphson_pf
from .signomial import DEFAULT_GRID, NoPlanFound

__all__ = [
    "ModeRecord",
    "RunReport",
    "RunOptions",
    "SuiteResult",
    "run_case",
    "run_suite",
    "format_reports",
    "main",
    "EXIT_OK",
    "EXIT_TOLERANCE",
    "EXIT_INPUT",
    "EXIT_SOLVER",
]

EXIT_OK, EXIT_TOLERANCE, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3
MODES = ("nonconvex", "convex")
CSV_COLUMNS = ("case", "mode", "status", "objective", "cpu_time", "pg_mw", "qg_mvar", "load_mw", "iterations")
TIMING_FIELDS = ("cpu_time", "wall_time")

_INPUT_ERRORS = (CaseParseError, CaseValidationError, UnsupportedBranchError, FileNotFoundError, KeyError,
                 IsADirectoryError)
_PIPELINE_ERRORS = (ConvexityError, NoPlanFound, ModelError)


class InputError(Exception):
    pass


@dataclass
class ModeRecord:
    mode: str
    status: str
    objective: float  # $/h
    pg_mw: float
    qg_mvar: float
    load_mw: float
    cpu_time: float
    wall_time: float
    iterations: int


@dataclass
class RunReport:
    case: str
    load_mw: float
    records: dict = field(default_factory=dict)  # mode -> ModeRecord
    taylor_gap: dict | None = None
    plan: dict | None = None

    @property
    def ok(self) -> bool:
        return all(r.status == OPTIMAL for r in self.records.values())

    def to_dict(self, timing: bool = True) -> dict:
        recs = {}
        for mode, r in self.records.items():
            d = asdict(r)
            if not timing:
                for k in TIMING_FIELDS:
                    d.pop(k)
            recs[mode] = d
        return {"case": self.case, "load_mw": self.load_mw, "records": recs,
                "taylor_gap": self.taylor_gap, "plan": self.plan}

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=1, sort_keys=True)


@dataclass
class RunOptions:
    max_angle_diff: float = MAX_ANGLE_DIFF
    exponent_grid: tuple = DEFAULT_GRID
    tol_kkt: float = 1e-6
    trace: str | None = None
    powerflow: bool = True

    def solver_options(self) -> SolverOptions:
        return SolverOptions(tol_kkt=self.tol_kkt)


def _load(path) -> tuple:
    try:
        case = load_case(path)
        net = to_network(case)
        Y = build_admittance(net)
    except _INPUT_ERRORS as exc:
        raise InputError(f"{path}: {exc}") from exc
    return case, net, Y


def _totals(net, point) -> tuple:
    pg = sum(point[f"Pg[{i}]"] for i in range(net.n_gen)) * net.base_mva
    qg = sum(point[f"Qg[{i}]"] for i in range(net.n_gen)) * net.base_mva
    return float(pg), float(qg)


def _record(mode, sol, net, cpu, wall) -> ModeRecord:
    pg, qg = _totals(net, sol.x)
    return ModeRecord(mode, sol.status, float(sol.objective), pg, qg, float(net.pd.sum() * net.base_mva),
                      cpu, wall, sol.iterations)


def _trace_dir(opts, name):
    if opts.trace is None:
        return None
    d = Path(opts.trace) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_case(path, mode: str = "both", opts: RunOptions | None = None) -> RunReport:
    """Run one case through the requested pipeline(s).

    ``path`` is a ``.m``/``.json`` file or the name of a bundled case.
    Raises :class:`InputError` for unreadable cases; plan and convexity
    errors propagate.
    """
    opts = opts or RunOptions()
    modes = MODES if mode == "both" else (mode,)
    if any(m not in MODES for m in modes):
        raise InputError(f"unknown mode {mode!r}")
    case, net, Y = _load(path)
    name = case.name or Path(str(path)).stem
    report = RunReport(name, float(net.pd.sum() * net.base_mva))
    tdir = _trace_dir(opts, name)
    sopts = opts.solver_options()

    if "nonconvex" in modes:
        c0, w0 = time.process_time(), time.perf_counter()
        model = build_opf(net, Y)
        sol = solve(model, sopts)
        report.records["nonconvex"] = _record("nonconvex", sol, net, time.process_time() - c0,
                                              time.perf_counter() - w0)
        if tdir:
            (tdir / "nonconvex_model.txt").write_text(model.dump())
            write_log_csv(sol, tdir / "nonconvex_log.csv")

    if "convex" in modes:
        c0, w0 = time.process_time(), time.perf_counter()
        model = build_opf(net, Y)
        cm = convexify(model, opts.max_angle_diff, tuple(opts.exponent_grid))
        sol = solve(cm, sopts)
        rec = recover(sol, cm.shifts, cm.plan, model, cm)
        report.records["convex"] = _record("convex", rec, net, time.process_time() - c0,
                                           time.perf_counter() - w0)
        rf = cm.trace["reformulate"]
        report.plan = {
            "transformed_variables": cm.plan.n_new,
            "transformed_terms": rf["transformed_terms"],
            "split_equalities": rf["split_equalities"],
            "inverse_relations": rf["inverse_relations"],
            "convex_inequalities": rf["convex_inequalities"],
            "untransformed_inequalities": rf["untransformed_inequalities"],
        }
        gap = {
            "max_balance_residual": rec.max_eq_residual,
            "max_limit_violation": rec.max_ineq_violation,
            "transform_gap": rec.info.get("transform_gap", 0.0),
        }
        if opts.powerflow:
            pf = newton_raphson_pf(net, Y, dispatch_from_point(net, rec.x))
            gap["pf_status"] = pf.status
            gap["pf_iterations"] = pf.iterations
            gap["pf_mismatch"] = pf.mismatch
            gap["pf_objective"] = float(np.sum(net.c2 * pf.pg**2 + net.c1 * pf.pg + net.c0))
        report.taylor_gap = gap
        if tdir:
            (tdir / "convex_model.txt").write_text(cm.model.dump())
            (tdir / "plan.txt").write_text(cm.plan.dump())
            (tdir / "pipeline.json").write_text(cm.trace_json() + "\n")
            write_log_csv(sol, tdir / "convex_log.csv")
    if tdir:
        (tdir / "report.json").write_text(report.to_json() + "\n")
    return report


# --------------------------------------------------------------------------
# formatting


def _rows(reports):
    for rep in reports:
        for mode, r in rep.records.items():
            yield {"case": rep.case, "mode": mode, "status": r.status, "objective": r.objective,
                   "cpu_time": r.cpu_time, "pg_mw": r.pg_mw, "qg_mvar": r.qg_mvar, "load_mw": r.load_mw,
                   "iterations": r.iterations}


def format_reports(reports, fmt: str = "table") -> str:
    if fmt == "json":
        return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in _rows(reports):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()
    head = f"{'case':<10} {'mode':<10} {'status':<16} {'objective ($/h)':>16} {'CPU (s)':>8} " \
           f"{'Pg (MW)':>10} {'Qg (MVAr)':>10} {'load (MW)':>10}"
    lines = [head, "-" * len(head)]
    for row in _rows(reports):
        lines.append(f"{row['case']:<10} {row['mode']:<10} {row['status']:<16} {row['objective']:>16.2f} "
                     f"{row['cpu_time']:>8.2f} {row['pg_mw']:>10.2f} {row['qg_mvar']:>10.2f} {row['load_mw']:>10.2f}")
    for rep in reports:
        if rep.taylor_gap:
            g = rep.taylor_gap
            line = f"{rep.case}: max balance residual at recovered point {g['max_balance_residual']:.2e} p.u."
            if "pf_status" in g:
                line += f", power flow {g['pf_status']} in {g['pf_iterations']} it (cost {g['pf_objective']:.2f} $/h)"
            lines.append(line)
        if rep.plan:
            p = rep.plan
            lines.append(f"{rep.case}: {p['transformed_variables']} transformed variables, "
                         f"{p['transformed_terms']} transformed terms, {p['split_equalities']} split equalities")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# suite


@dataclass
class SuiteResult:
    reports: list
    failures: list  # human-readable diff lines
    errors: list  # (case, exit code, message)

    @property
    def exit_code(self) -> int:
        if self.errors:
            return max(code for _, code, _ in self.errors)
        return EXIT_TOLERANCE if self.failures else EXIT_OK


def _resolve(entry, base: Path):
    p = Path(entry)
    if not p.is_absolute():
        cand = base / p
        if cand.exists() or str(entry) not in BUNDLED_CASES:
            return cand
    return p


def _check(rep: RunReport, expected: dict) -> list:
    out = []
    for mode, exp in expected.items():
        r = rep.records.get(mode)
        if r is None:
            out.append(f"{rep.case} {mode}: not run")
            continue
        if r.status != OPTIMAL:
            out.append(f"{rep.case} {mode}: status {r.status}")
        if "objective" in exp:
            rtol = exp.get("rtol", 5e-3)
            rel = abs(r.objective - exp["objective"]) / abs(exp["objective"])
            if rel > rtol:
                out.append(f"{rep.case} {mode}: objective {r.objective:.2f} expected {exp['objective']:.2f} "
                           f"(rel diff {rel:.3e} > {rtol:g})")
        if "pg_mw" in exp:
            atol = exp.get("pg_atol", 1.0)
            if abs(r.pg_mw - exp["pg_mw"]) > atol:
                out.append(f"{rep.case} {mode}: total Pg {r.pg_mw:.2f} MW expected {exp['pg_mw']:.2f} "
                           f"(|diff| > {atol:g})")
    return out


def _run_entry(args):
    path, mode, opts = args
    try:
        return run_case(path, mode, opts), None
    except InputError as exc:
        return None, (EXIT_INPUT, str(exc))
    except _PIPELINE_ERRORS as exc:
        return None, (EXIT_SOLVER, f"{path}: {exc}")


def run_suite(manifest, opts: RunOptions | None = None, jobs: int = 1) -> SuiteResult:
    """Run every case of a JSON manifest and compare against expected values.

    Manifest format::

        {"cases": [{"case": "ieee14.m", "mode": "both",
                    "expected": {"convex": {"objective": 8081.14, "rtol": 0.005,
                                            "pg_mw": 268.28, "pg_atol": 1.0}}}]}

    Relative case paths are taken from the manifest directory, falling back
    to the bundled cases.
    """
    opts = opts or RunOptions()
    mpath = Path(manifest)
    try:
        spec = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{manifest}: {exc}") from exc
    entries = spec.get("cases", []) if isinstance(spec, dict) else spec
    work = [(_resolve(e["case"], mpath.parent), e.get("mode", "both"), opts) for e in entries]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_entry, work))
    else:
        results = [_run_entry(w) for w in work]
    res = SuiteResult([], [], [])
    for e, (rep, err) in zip(entries, results):
        if err is not None:
            res.errors.append((e["case"], *err))
            continue
        res.reports.append(rep)
        res.failures.extend(_check(rep, e.get("expected", {})))
    return res


def bundled_manifest() -> Path:
    return DATA_DIR / "manifest.json"


# --------------------------------------------------------------------------
# entry point


def _grid(text: str) -> tuple:
    try:
        return tuple(float(Fraction(t.strip())) for t in text.split(",") if t.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad exponent grid {text!r}: {exc}") from None


def _parser():
    p = argparse.ArgumentParser(prog="convopf", description="Convexified polar AC optimal power flow.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--max-angle-diff", type=float, default=MAX_ANGLE_DIFF,
                        help="Taylor window for angle differences, rad (default 0.6)")
        sp.add_argument("--exponent-grid", type=_grid, default=DEFAULT_GRID,
                        help="comma separated substitution exponents, e.g. 1/3,-3,1/2")
        sp.add_argument("--tol-kkt", type=float, default=1e-6)
        sp.add_argument("--format", choices=("table", "csv", "json"), default="table")
        sp.add_argument("--trace", metavar="DIR", help="write model, plan and iteration dumps here")
        sp.add_argument("--no-powerflow", action="store_true", help="skip the power flow check")

    r = sub.add_parser("run", help="run one case")
    r.add_argument("case", help=f"case file or bundled name ({', '.join(BUNDLED_CASES)})")
    r.add_argument("--mode", choices=("nonconvex", "convex", "both"), default="both")
    common(r)
    s = sub.add_parser("suite", help="run a manifest of cases against expected objectives")
    s.add_argument("manifest", nargs="?", help="manifest JSON (default: the bundled four-case suite)")
    s.add_argument("--jobs", type=int, default=1)
    common(s)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    opts = RunOptions(args.max_angle_diff, args.exponent_grid, args.tol_kkt, args.trace, not args.no_powerflow)
    if args.command == "run":
        try:
            rep = run_case(args.case, args.mode, opts)
        except InputError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        except _PIPELINE_ERRORS as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        sys.stdout.write(format_reports([rep], args.format))
        if not rep.ok:
            for r in rep.records.values():
                if r.status != OPTIMAL:
                    print(f"{rep.case} {r.mode}: solver status {r.status}", file=sys.stderr)
            return EXIT_SOLVER
        return EXIT_OK

    try:
        res = run_suite(args.manifest or bundled_manifest(), opts, args.jobs)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    sys.stdout.write(format_reports(res.reports, args.format))
    for case, _, msg in res.errors:
        print(f"error: {msg}", file=sys.stderr)
    for line in res.failures:
        print(f"FAIL {line}", file=sys.stderr)
    if args.format == "table":
        print(f"{len(res.reports)} case(s) run, {len(res.failures)} tolerance failure(s), {len(res.errors)} error(s)")
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
