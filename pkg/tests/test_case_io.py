import json
import logging
import re

import numpy as np
import pytest
from hypothesis import given, settings

from convopf import case_io
from convopf.case_io import (
    BUNDLED_CASES,
    DATA_DIR,
    BranchRecord,
    BusRecord,
    CaseData,
    CaseParseError,
    CaseValidationError,
    CostRecord,
    GenRecord,
    bundled_case,
    case_from_json,
    case_to_json,
    from_network,
    load_case,
    parse_matpower,
    serialize_matpower,
    to_network,
)

from oracles import two_bus_case
from strategies import cases

TWO_BUS = """function mpc = tiny
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.1	0.9;
	2	1	50	10	0	0	1	1	0	135	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	20	5;
];
"""

# published load column of the four results tables (MW)
PAPER_LOAD = {"ieee14": 259.00, "ieee30": 283.40, "ieee57": 1250.80, "ieee118": 4242.00}


def _matrix_rows(text, name):
    """Count data rows of one matrix by scanning the raw file text."""
    block = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\]", text, re.S).group(1)
    rows = [ln.split("%")[0].strip() for ln in block.splitlines()]
    return sum(1 for r in rows if r.strip(";").strip())


def test_ieee14_counts_and_load():
    case = bundled_case("ieee14")
    assert len(case.buses) == 14
    assert len(case.generators) == 5
    assert case.total_load_mw == pytest.approx(259.0, abs=1e-9)


def test_ieee14_branch_count_matches_file_rows():
    text = (DATA_DIR / "ieee14.m").read_text()
    case = parse_matpower(text)
    assert len(case.branches) == _matrix_rows(text, "branch") == 20
    assert len(case.generators) == _matrix_rows(text, "gen")


def test_ieee30_load():
    assert bundled_case("ieee30").total_load_mw == pytest.approx(283.4, abs=1e-9)


@pytest.mark.parametrize("name", BUNDLED_CASES)
def test_per_unit_load_matches_published_column(name):
    net = to_network(bundled_case(name))
    assert net.pd.sum() * net.base_mva == pytest.approx(PAPER_LOAD[name], abs=0.01)


def test_minimal_two_bus():
    case = parse_matpower(TWO_BUS, name="tiny")
    assert (len(case.buses), len(case.branches), len(case.generators)) == (2, 1, 1)
    assert case.buses[0].type == "slack"
    assert case.branches[0].tap == 1.0  # 0 in the file means nominal ratio
    assert case.costs[0] == CostRecord(0, 0.01, 20.0, 5.0)


def test_linear_cost_row_is_padded():
    text = TWO_BUS.replace("2	0	0	3	0.01	20	5;", "2	0	0	2	20	5;")
    c = parse_matpower(text).costs[0]
    assert (c.c2, c.c1, c.c0) == (0.0, 20.0, 5.0)


def test_per_unit_conversion():
    net = to_network(bundled_case("ieee14"))
    assert net.base_mva == 100.0
    assert net.pd.sum() == pytest.approx(2.59, abs=1e-12)


def test_dense_renumbering():
    case = CaseData(
        100.0,
        (BusRecord(1, "slack", 0, 0), BusRecord(2, "PQ", 10, 0), BusRecord(5, "PQ", 20, 5)),
        (BranchRecord(1, 2, 0.0, 0.1), BranchRecord(2, 5, 0.0, 0.1)),
        (GenRecord(1, 0, 0, 0, 100, -50, 50),),
        (CostRecord(0, 0.0, 10.0, 0.0),),
    )
    net = to_network(case)
    assert net.index_of == {1: 0, 2: 1, 5: 2}
    assert list(net.t_bus) == [1, 2]
    assert sorted(net.index_of.values()) == list(range(net.n_bus))


@pytest.mark.parametrize("name", BUNDLED_CASES)
def test_network_round_trip(name):
    case = bundled_case(name)
    back = from_network(to_network(case))
    for a, b in [(case.buses, back.buses), (case.branches, back.branches),
                 (case.generators, back.generators), (case.costs, back.costs)]:
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            for f in ra.__dataclass_fields__:
                va, vb = getattr(ra, f), getattr(rb, f)
                if isinstance(va, float):
                    assert vb == pytest.approx(va, rel=1e-12, abs=1e-12), (f, ra, rb)
                else:
                    assert va == vb


@pytest.mark.parametrize("name", BUNDLED_CASES)
def test_serialize_round_trip_bundled(name):
    case = bundled_case(name)
    assert parse_matpower(serialize_matpower(case), name=name) == case


@pytest.mark.parametrize("name", BUNDLED_CASES)
def test_bundled_json_matches_matpower_text(name):
    assert bundled_case(name, fmt="json") == bundled_case(name)


def test_load_case_by_path_and_name(tmp_path):
    p = tmp_path / "tiny.m"
    p.write_text(TWO_BUS)
    assert load_case(p).name == "tiny"
    j = tmp_path / "tiny.json"
    j.write_text(case_to_json(load_case(p)))
    assert load_case(j) == load_case(p)
    assert load_case("ieee14") == bundled_case("ieee14")


def test_unknown_bundled_case():
    with pytest.raises(KeyError):
        bundled_case("ieee9999")


# --------------------------------------------------------------------------
# error paths


def test_syntax_error_reports_line():
    bad = TWO_BUS.replace("2	1	50	10", "2	1	5x0	10")
    with pytest.raises(CaseParseError) as exc:
        parse_matpower(bad)
    assert exc.value.line == 5
    assert "line 5" in str(exc.value)


def test_duplicate_bus_id():
    bad = TWO_BUS.replace("	2	1	50	10", "	1	1	50	10")
    with pytest.raises(CaseParseError, match="duplicate bus id 1"):
        parse_matpower(bad)


@pytest.mark.parametrize("matrix", ["bus", "gen", "branch", "gencost"])
def test_missing_matrix(matrix):
    bad = re.sub(rf"mpc\.{matrix} = \[.*?\];", "", TWO_BUS, flags=re.S)
    with pytest.raises(CaseParseError, match=f"mpc.{matrix}"):
        parse_matpower(bad)


def test_missing_base():
    with pytest.raises(CaseParseError, match="baseMVA"):
        parse_matpower(TWO_BUS.replace("mpc.baseMVA = 100;", ""))


def test_piecewise_linear_cost_rejected():
    bad = TWO_BUS.replace("2	0	0	3	0.01	20	5;", "1	0	0	2	0	0	100	2000;")
    with pytest.raises(CaseParseError, match="polynomial"):
        parse_matpower(bad)


def test_cubic_cost_rejected():
    bad = TWO_BUS.replace("2	0	0	3	0.01	20	5;", "2	0	0	4	1	0.01	20	5;")
    with pytest.raises(CaseParseError, match="degree 3"):
        parse_matpower(bad)


def test_unterminated_matrix():
    bad = TWO_BUS.replace("	1	2	0.01	0.1	0.02	0	0	0	0	0	1	-360	360;\n];", "")
    with pytest.raises(CaseParseError):
        parse_matpower(bad)


@pytest.mark.parametrize(
    "buses, branches, gens, costs, msg",
    [
        ((BusRecord(1, "slack", 0, 0), BusRecord(2, "slack", 0, 0)), (), (), (), "slack"),
        ((BusRecord(1, "slack", 0, 0, vmin=1.1, vmax=0.9),), (), (), (), "Vmin > Vmax"),
        ((BusRecord(1, "slack", 0, 0),), (BranchRecord(1, 7, 0, 0.1),), (), (), "unknown endpoint"),
        ((BusRecord(1, "slack", 0, 0),), (), (GenRecord(3, 0, 0, 0, 1, 0, 1),), (), "unknown bus"),
        ((BusRecord(1, "slack", 0, 0),), (), (GenRecord(1, 0, 0, 5, 1, 0, 1),), (CostRecord(0, 0, 1, 0),),
         "inverted"),
        ((BusRecord(1, "slack", 0, 0),), (), (GenRecord(1, 0, 0, 0, 1, 0, 1),), (), "no cost record"),
    ],
)
def test_validation(buses, branches, gens, costs, msg):
    with pytest.raises(CaseValidationError, match=msg):
        CaseData(100.0, buses, branches, gens, costs)


def test_nonpositive_base_rejected():
    with pytest.raises(CaseValidationError, match="base_mva"):
        CaseData(0.0, (BusRecord(1, "slack", 0, 0),), (), (), ())


def test_json_errors():
    with pytest.raises(CaseParseError, match="invalid JSON"):
        case_from_json("{not json")
    doc = json.loads(case_to_json(two_bus_case()))
    doc["buses"][0]["area"] = 1
    with pytest.raises(CaseParseError, match="unknown field"):
        case_from_json(json.dumps(doc))
    del doc["costs"]
    with pytest.raises(CaseParseError, match="costs"):
        case_from_json(json.dumps(doc))


def test_ignored_columns_warned_once(caplog):
    case_io._warned.clear()
    with caplog.at_level(logging.WARNING, logger="convopf.case_io"):
        parse_matpower(TWO_BUS)
        parse_matpower(TWO_BUS)
    hits = [r for r in caplog.records if "ignored bus columns" in r.getMessage()]
    assert len(hits) == 1


# --------------------------------------------------------------------------
# properties

@settings(max_examples=60, deadline=None)
@given(cases())
def test_parse_serialize_round_trip(case):
    once = parse_matpower(serialize_matpower(case), name="rnd")
    assert once == case
    assert parse_matpower(serialize_matpower(once), name="rnd") == once


@settings(max_examples=60, deadline=None)
@given(cases())
def test_json_round_trip(case):
    assert case_from_json(case_to_json(case)) == case


@settings(max_examples=60, deadline=None)
@given(cases())
def test_per_unit_demand_exact(case):
    net = to_network(case)
    for b in case.buses:
        assert net.pd[net.index_of[b.id]] == b.pd / case.base_mva
    assert np.array_equal(np.sort(list(net.index_of.values())), np.arange(net.n_bus))
