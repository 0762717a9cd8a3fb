import csv
import io
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from gridmin.case_io import (
    CaseFormatError, dump_case_json, load_case, parse_case_json, parse_matpower, read_report,
    to_network_case, to_raw, write_report,
)
from gridmin.gmin_homotopy import gmin_solve
from gridmin.network_model import BusKind, CaseError

from conftest import CASE_DIR, STANDARD_CASES, four_bus_remote, reference, standard_case

TINY = """function mpc = tiny
% a three-bus test case
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1.02\t5\t230\t1\t1.1\t0.9;
\t2\t2\t30\t10\t0\t5\t1\t1\t0\t230\t1\t1.1\t0.9;  % trailing comment
\t3\t1\t90, 30, 1, 0, 1, 1, -2, 230, 1, 1.1, 0.9;
];
mpc.gen = [
\t1\t0\t0\t300\t-300\t1.02\t100\t1\t250\t10;
\t2\t60\t0\t300\t-300\t1.01\t100\t1\t300\t10;
\t3\t5\t2\t300\t-300\t1\t100\t0\t300\t10;
];
mpc.branch = [
\t1\t2\t0.01\t0.1\t0.02\t250\t250\t250\t0\t0\t1\t-360\t360;
\t2\t3\t0.02\t0.2\t0\t250\t250\t250\t0.97\t3\t1\t-360\t360;
\t1\t3\t0.02\t0.2\t0\t250\t250\t250\t0\t0\t0\t-360\t360;
];
mpc.gencost = [ 2 0 0 3 0.1 20 0 ];
"""


def test_parse_tiny():
    raw = parse_matpower(TINY)
    assert raw.name == "tiny" and raw.base_mva == 100
    assert raw.bus.shape == (3, 13) and raw.branch.shape == (3, 13)
    case = to_network_case(raw)
    assert [b.kind for b in case.buses] == [BusKind.SLACK, BusKind.PV, BusKind.PQ]
    b2, b3 = case.bus(2), case.bus(3)
    assert (b2.p_load, b2.q_load, b2.b_shunt) == (0.3, 0.1, 0.05)
    assert b3.g_shunt == 0.01 and b3.theta_init == pytest.approx(math.radians(-2))
    assert case.bus(1).theta_init == pytest.approx(math.radians(5))
    # Out-of-service generator and branch dropped; TAP 0 means 1.
    assert len(case.generators) == 2 and len(case.branches) == 2
    assert case.branches[0].tap == 1.0
    assert case.branches[1].tap == 0.97
    assert case.branches[1].shift == pytest.approx(math.radians(3))


@pytest.mark.parametrize("name", STANDARD_CASES)
def test_standard_cases_per_unit(name):
    raw = parse_matpower((CASE_DIR / f"{name}.m").read_text(), name)
    case = standard_case(name)
    assert case.bus_ids == reference(name)["bus_ids"]
    pd = np.array([b.p_load for b in case.buses]) * raw.base_mva
    qd = np.array([b.q_load for b in case.buses]) * raw.base_mva
    # Division by the base and multiplication back is exact to one rounding.
    np.testing.assert_allclose(pd, raw.bus[:, 2], rtol=1e-15, atol=0)
    np.testing.assert_allclose(qd, raw.bus[:, 3], rtol=1e-15, atol=0)
    assert sum(1 for b in case.buses if b.kind is BusKind.SLACK) == 1


def test_pv_without_generator_becomes_pq(caplog):
    text = TINY.replace("\t2\t60\t0\t300\t-300\t1.01\t100\t1", "\t2\t60\t0\t300\t-300\t1.01\t100\t0")
    case = to_network_case(parse_matpower(text))
    assert case.bus(2).kind is BusKind.PQ
    assert "no in-service generator" in caplog.text


def test_generator_at_pq_bus_kept_as_fixed_injection(caplog):
    text = TINY.replace("\t3\t5\t2\t300\t-300\t1\t100\t0", "\t3\t5\t2\t300\t-300\t1\t100\t1")
    case = to_network_case(parse_matpower(text))
    assert any(g.bus == 3 and g.p_set == 0.05 for g in case.generators)
    assert "fixed P,Q injection" in caplog.text


@pytest.mark.parametrize("edit, message", [
    (lambda t: t.replace("mpc.gen =", "mpc.generators ="), "missing required matrix mpc.gen"),
    (lambda t: t.replace("mpc.baseMVA = 100;", ""), "baseMVA"),
    (lambda t: t.replace("\t30\t10\t", "\t30\tabc\t"), "non-numeric"),
    (lambda t: t.replace("\t1\t1.1\t0.9;  %", "\t1\t1.1;  %"), "columns"),
    (lambda t: t.replace("1\t3\t0\t0\t0\t0", "1\t7\t0\t0\t0\t0"), "BUS_TYPE"),
])
def test_malformed_text(edit, message):
    with pytest.raises(CaseFormatError, match=message):
        parse_matpower(edit(TINY))


def test_branch_table_needs_status_column():
    lines = TINY.splitlines()
    start = lines.index("mpc.branch = [") + 1
    for k in range(start, start + 3):
        lines[k] = "\t".join(lines[k].split("\t")[:10]) + ";"
    with pytest.raises(CaseFormatError, match="need at least 11"):
        parse_matpower("\n".join(lines))


def test_isolated_bus_type_rejected():
    text = TINY.replace("\t3\t1\t90,", "\t3\t4\t90,")
    with pytest.raises(CaseError, match="isolated"):
        to_network_case(parse_matpower(text))


def test_missing_slack_rejected():
    text = TINY.replace("\t1\t3\t0\t0", "\t1\t1\t0\t0")
    with pytest.raises(CaseError, match="slack"):
        to_network_case(parse_matpower(text))


def test_quoted_percent_is_not_a_comment():
    text = TINY.replace("mpc.version = '2';", "mpc.version = '2%';")
    assert parse_matpower(text).bus.shape[0] == 3


@pytest.mark.parametrize("name", ["case9", "case118"])
def test_matpower_round_trip(name):
    case = standard_case(name)
    again = to_network_case(to_raw(case))
    # Angles pass through degrees, which can cost one ulp.
    assert [replace(b, theta_init=0.0) for b in again.buses] == \
        [replace(b, theta_init=0.0) for b in case.buses]
    np.testing.assert_allclose([b.theta_init for b in again.buses],
                               [b.theta_init for b in case.buses], rtol=1e-15, atol=1e-16)
    assert [replace(br, shift=0.0) for br in again.branches] == \
        [replace(br, shift=0.0) for br in case.branches]
    for g0, g1 in zip(case.generators, again.generators):
        assert g1.p_set == pytest.approx(g0.p_set, rel=1e-15)
        assert g1.v_set == g0.v_set


def test_json_round_trip_exact():
    for case in (standard_case("case300"), four_bus_remote()):
        assert parse_case_json(dump_case_json(case)) == case


def test_json_rejects_other_documents():
    with pytest.raises(CaseFormatError):
        parse_case_json(json.dumps({"format": "other"}))
    doc = json.loads(dump_case_json(four_bus_remote()))
    doc["version"] = 99
    with pytest.raises(CaseFormatError, match="version"):
        parse_case_json(json.dumps(doc))
    del doc["buses"][0]["kind"]
    doc["version"] = 1
    with pytest.raises(CaseFormatError):
        parse_case_json(json.dumps(doc))


def test_load_case_dispatch(tmp_path):
    p = tmp_path / "remote.json"
    p.write_text(dump_case_json(four_bus_remote()))
    assert load_case(p) == four_bus_remote()
    assert load_case(CASE_DIR / "case9.m").name == "case9"


def test_report_round_trip_and_csv():
    report = gmin_solve(standard_case("case14"))
    text = write_report(report, "json")
    again = read_report(text)
    assert again == report
    rows = list(csv.DictReader(io.StringIO(write_report(report, "csv"))))
    assert len(rows) == sum(len(s.trace) for s in report.steps)
    assert float(rows[-1]["mu"]) == 0.0
    assert float(rows[-1]["residual_norm"]) <= 1e-6
    with pytest.raises(ValueError):
        write_report(report, "xml")
    with pytest.raises(CaseFormatError):
        read_report(json.dumps({"format": "nope"}))
