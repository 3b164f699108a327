import csv
import io
import json
import subprocess
import sys

import pytest

from convopf.case_io import serialize_matpower
from convopf.cli import (
    CSV_COLUMNS,
    EXIT_INPUT,
    EXIT_OK,
    EXIT_SOLVER,
    EXIT_TOLERANCE,
    InputError,
    RunOptions,
    bundled_manifest,
    format_reports,
    main,
    run_case,
    run_suite,
)

from oracles import two_bus_case
from pipelines import PAPER

MALFORMED = "function mpc = broken\nmpc.bus = [\n\t1\t3\t0\t0;\n];\n"


@pytest.fixture(scope="module")
def ieee14_both():
    return run_case("ieee14", "both")


def test_ieee14_both(ieee14_both):
    rep = ieee14_both
    assert rep.ok and set(rep.records) == {"nonconvex", "convex"}
    assert rep.records["nonconvex"].objective == pytest.approx(PAPER["ieee14"]["nonconvex"], rel=5e-3)
    assert rep.records["convex"].objective == pytest.approx(PAPER["ieee14"]["convex"], rel=5e-3)
    assert rep.records["convex"].pg_mw == pytest.approx(PAPER["ieee14"]["pg_mw"], abs=1.0)
    # load is input data, identical across modes
    loads = {r.load_mw for r in rep.records.values()}
    assert len(loads) == 1 and loads.pop() == pytest.approx(259.0)
    assert rep.taylor_gap["pf_status"] == "Converged"
    assert rep.plan["transformed_variables"] > 0


def test_ieee30_convex():
    rep = run_case("ieee30", "convex", RunOptions(powerflow=False))
    assert set(rep.records) == {"convex"}
    r = rep.records["convex"]
    assert r.objective == pytest.approx(8906.13, rel=5e-3)
    assert r.pg_mw == pytest.approx(295.14, abs=1.0)
    assert "pf_status" not in rep.taylor_gap


def test_generation_covers_load(ieee14_both):
    for r in ieee14_both.records.values():
        assert r.status == "Optimal" and r.pg_mw >= r.load_mw


def test_json_deterministic_except_timing():
    a = run_case("ieee14", "convex")
    b = run_case("ieee14", "convex")
    assert a.to_json(timing=False) == b.to_json(timing=False)
    d = json.loads(a.to_json())
    assert {"cpu_time", "wall_time"} <= set(d["records"]["convex"])
    assert "cpu_time" not in json.loads(a.to_json(timing=False))["records"]["convex"]


def test_formats(ieee14_both):
    rows = list(csv.DictReader(io.StringIO(format_reports([ieee14_both], "csv"))))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r["mode"] for r in rows] == ["nonconvex", "convex"]
    assert float(rows[1]["objective"]) == ieee14_both.records["convex"].objective
    doc = json.loads(format_reports([ieee14_both], "json"))
    assert doc[0]["case"] == "ieee14" and doc[0]["load_mw"] == pytest.approx(259.0)
    table = format_reports([ieee14_both], "table")
    assert "objective ($/h)" in table and "ieee14" in table and "power flow Converged" in table


def test_main_run(capsys):
    assert main(["run", "ieee14", "--mode", "nonconvex", "--format", "csv"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(CSV_COLUMNS)


def test_malformed_file(tmp_path, capsys):
    p = tmp_path / "broken.m"
    p.write_text(MALFORMED)
    assert main(["run", str(p)]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "broken.m" in err and "baseMVA" in err


def test_missing_file(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.m")]) == EXIT_INPUT
    assert "nope.m" in capsys.readouterr().err
    with pytest.raises(InputError):
        run_case(tmp_path / "nope.m")


def test_plan_failure_exit_code(tmp_path, capsys):
    p = tmp_path / "two.m"
    p.write_text(serialize_matpower(two_bus_case()))
    # identity-only grid leaves the nonconvex terms unresolved
    assert main(["run", str(p), "--mode", "convex", "--exponent-grid", "1"]) == EXIT_SOLVER
    assert "no exponent assignment" in capsys.readouterr().err


def test_bad_grid_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "ieee14", "--exponent-grid", "1/0"])
    assert exc.value.code == 2


def test_trace_output(tmp_path):
    run_case("ieee14", "both", RunOptions(trace=str(tmp_path)))
    d = tmp_path / "ieee14"
    names = {p.name for p in d.iterdir()}
    assert names == {"nonconvex_model.txt", "nonconvex_log.csv", "convex_model.txt", "plan.txt",
                     "pipeline.json", "convex_log.csv", "report.json"}
    trace = json.loads((d / "pipeline.json").read_text())
    assert list(trace) == ["original", "reformulate", "shift", "taylor"]
    assert trace["taylor"]["remainder"]["max_row_bound"] > 0
    assert "subst" in (d / "plan.txt").read_text()


# --------------------------------------------------------------------------
# suite


def _manifest(tmp_path, cases):
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps({"cases": cases}))
    return p


def test_empty_manifest(tmp_path, capsys):
    p = _manifest(tmp_path, [])
    res = run_suite(p)
    assert res.reports == [] and res.exit_code == EXIT_OK
    assert main(["suite", str(p)]) == EXIT_OK


def test_wrong_expected_value(tmp_path, capsys):
    p = _manifest(tmp_path, [{"case": "ieee14", "mode": "nonconvex",
                              "expected": {"nonconvex": {"objective": 9000.0, "rtol": 0.005}}}])
    assert main(["suite", str(p), "--no-powerflow"]) == EXIT_TOLERANCE
    err = capsys.readouterr().err
    assert "FAIL ieee14 nonconvex: objective" in err and "expected 9000.00" in err


def test_missing_case_in_manifest(tmp_path, capsys):
    p = _manifest(tmp_path, [{"case": "missing.m"}])
    res = run_suite(p)
    assert res.exit_code == EXIT_INPUT and res.errors[0][0] == "missing.m"
    assert main(["suite", str(p)]) == EXIT_INPUT


def test_unreadable_manifest(tmp_path, capsys):
    p = tmp_path / "m.json"
    p.write_text("{oops")
    assert main(["suite", str(p)]) == EXIT_INPUT


def test_bundled_manifest_lists_four_cases():
    spec = json.loads(bundled_manifest().read_text())
    assert [c["case"] for c in spec["cases"]] == ["ieee14.m", "ieee30.m", "ieee57.m", "ieee118.m"]
    assert spec["cases"][1]["expected"]["convex"]["pg_mw"] == 295.14


def test_module_entry_point(tmp_path):
    p = tmp_path / "broken.m"
    p.write_text(MALFORMED)
    out = subprocess.run([sys.executable, "-m", "convopf", "run", str(p)], capture_output=True, text=True)
    assert out.returncode == EXIT_INPUT
    assert out.stderr.startswith("error:")
