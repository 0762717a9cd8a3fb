"""MATPOWER ingestion, canonical case JSON, and report serialization."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network_model import Branch, Bus, BusKind, CaseError, Generator, NetworkCase, validate
from .report import SolveReport

log = logging.getLogger(__name__)

# MATPOWER column indices (0-based), per the MATPOWER 7 caseformat docs.
BUS_I, BUS_TYPE, PD, QD, GS, BS, BUS_AREA, VM, VA, BASE_KV, ZONE, VMAX, VMIN = range(13)
GEN_BUS, PG, QG, QMAX, QMIN, VG, MBASE, GEN_STATUS, PMAX, PMIN = range(10)
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, RATE_B, RATE_C, TAP, SHIFT, BR_STATUS = range(11)

MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 11}

CASE_FORMAT = "gridmin-case"
CASE_FORMAT_VERSION = 1
REPORT_FORMAT = "gridmin-report"
REPORT_FORMAT_VERSION = 1

TRACE_COLUMNS = ["step", "mu", "step_converged", "iteration", "residual_norm",
                 "limited_v", "limited_q", "floored"]


class CaseFormatError(CaseError):
    """Malformed case file text."""


@dataclass(frozen=True)
class RawMatpowerCase:
    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    name: str = "case"


# -- MATPOWER text ------------------------------------------------------------

def _strip_comments(text: str) -> str:
    out = []
    for line in text.splitlines():
        in_str = False
        for k, ch in enumerate(line):
            if ch == "'":
                in_str = not in_str
            elif ch == "%" and not in_str:
                line = line[:k]
                break
        out.append(line)
    return "\n".join(out)


def _number(token: str, where: str) -> float:
    try:
        return float(token)
    except ValueError:
        low = token.lower()
        if low in ("inf", "+inf"):
            return math.inf
        if low == "-inf":
            return -math.inf
        if low == "nan":
            return math.nan
        raise CaseFormatError(f"non-numeric token {token!r} in {where}") from None


def _matrix(text: str, name: str) -> np.ndarray:
    match = re.search(r"\bmpc\." + name + r"\s*=\s*\[", text)
    if match is None:
        raise CaseFormatError(f"missing required matrix mpc.{name}")
    end = text.find("]", match.end())
    if end < 0:
        raise CaseFormatError(f"unterminated matrix mpc.{name}")
    body = text[match.end():end].replace("...", " ")
    rows = []
    for chunk in re.split(r"[;\n]", body):
        tokens = chunk.replace(",", " ").split()
        if tokens:
            rows.append([_number(t, f"mpc.{name}") for t in tokens])
    if not rows:
        raise CaseFormatError(f"matrix mpc.{name} is empty")
    width = len(rows[0])
    for k, row in enumerate(rows):
        if len(row) != width:
            raise CaseFormatError(
                f"mpc.{name} row {k + 1} has {len(row)} columns, expected {width}")
    if width < MIN_COLUMNS[name]:
        raise CaseFormatError(
            f"mpc.{name} has {width} columns, need at least {MIN_COLUMNS[name]}")
    return np.array(rows, dtype=float)


def parse_matpower(text: str, name: str | None = None) -> RawMatpowerCase:
    """Extract baseMVA and the bus/gen/branch tables from MATPOWER case text.

    Only plain numeric matrices are understood; other fields are ignored.
    """
    text = _strip_comments(text)
    match = re.search(r"\bmpc\.baseMVA\s*=\s*([^;\n]+)", text)
    if match is None:
        raise CaseFormatError("missing required scalar mpc.baseMVA")
    base_mva = _number(match.group(1).strip(), "mpc.baseMVA")
    if name is None:
        fn = re.search(r"function\s+\w+\s*=\s*(\w+)", text)
        name = fn.group(1) if fn else "case"
    bus = _matrix(text, "bus")
    gen = _matrix(text, "gen")
    branch = _matrix(text, "branch")
    bad = set(bus[:, BUS_TYPE]) - {1.0, 2.0, 3.0, 4.0}
    if bad:
        raise CaseFormatError(f"invalid BUS_TYPE values {sorted(bad)}")
    return RawMatpowerCase(base_mva, bus, gen, branch, name)


def to_network_case(raw: RawMatpowerCase) -> NetworkCase:
    """Convert MATPOWER tables to a validated per-unit :class:`NetworkCase`.

    Out-of-service generators and branches are dropped.  A PV bus left with
    no in-service generator becomes PQ; a generator on a PQ bus becomes a
    fixed (P, Q) injection.  Both are logged as warnings.
    """
    base = raw.base_mva
    kinds = {3: BusKind.SLACK, 2: BusKind.PV, 1: BusKind.PQ}
    on_gen = raw.gen[raw.gen[:, GEN_STATUS] > 0]
    gen_buses = {int(b) for b in on_gen[:, GEN_BUS]}

    seen: set[int] = set()
    buses = []
    for row in raw.bus:
        bus_id = int(row[BUS_I])
        if bus_id in seen:
            raise CaseError(f"duplicate bus id {bus_id}")
        seen.add(bus_id)
        code = int(row[BUS_TYPE])
        if code == 4:
            raise CaseError(f"bus {bus_id} is isolated (BUS_TYPE 4); not supported")
        kind = kinds[code]
        if kind is BusKind.PV and bus_id not in gen_buses:
            log.warning("PV bus %d has no in-service generator; treating as PQ", bus_id)
            kind = BusKind.PQ
        buses.append(Bus(
            id=bus_id, kind=kind,
            p_load=row[PD] / base, q_load=row[QD] / base,
            g_shunt=row[GS] / base, b_shunt=row[BS] / base,
            v_nominal=1.0, v_init=row[VM], theta_init=math.radians(row[VA]),
        ))
    if not any(b.kind is BusKind.SLACK for b in buses):
        raise CaseError("case has no slack bus (BUS_TYPE 3)")
    kind_of = {b.id: b.kind for b in buses}

    generators = []
    for row in on_gen:
        bus_id = int(row[GEN_BUS])
        if bus_id not in kind_of:
            raise CaseError(f"generator at unknown bus {bus_id}")
        if kind_of[bus_id] is BusKind.PQ:
            log.warning("generator at PQ bus %d treated as a fixed P,Q injection", bus_id)
        generators.append(Generator(
            bus=bus_id, p_set=row[PG] / base, v_set=row[VG], q_set=row[QG] / base))

    branches = []
    for row in raw.branch:
        if not row[BR_STATUS] > 0:
            continue
        tap = row[TAP] if row[TAP] != 0 else 1.0
        branches.append(Branch(
            from_bus=int(row[F_BUS]), to_bus=int(row[T_BUS]),
            r=row[BR_R], x=row[BR_X], b_charging=row[BR_B],
            tap=tap, shift=math.radians(row[SHIFT]),
        ))

    case = NetworkCase(base_mva=base, buses=tuple(buses), generators=tuple(generators),
                       branches=tuple(branches), name=raw.name)
    validate(case)
    return case


def to_raw(case: NetworkCase) -> RawMatpowerCase:
    """Express a case back in MATPOWER units (MW, MVAr, degrees)."""
    base = case.base_mva
    code = {BusKind.SLACK: 3, BusKind.PV: 2, BusKind.PQ: 1}
    bus = np.zeros((case.n_bus, 13))
    for k, b in enumerate(case.buses):
        bus[k, [BUS_I, BUS_TYPE, PD, QD, GS, BS, VM, VA]] = [
            b.id, code[b.kind], b.p_load * base, b.q_load * base,
            b.g_shunt * base, b.b_shunt * base, b.v_init, math.degrees(b.theta_init)]
        bus[k, [BUS_AREA, ZONE, VMAX, VMIN]] = [1, 1, 1.1, 0.9]
    gen = np.zeros((len(case.generators), 10))
    for k, g in enumerate(case.generators):
        gen[k, [GEN_BUS, PG, QG, VG, MBASE, GEN_STATUS]] = [
            g.bus, g.p_set * base, g.q_set * base, g.v_set, base, 1 if g.status else 0]
    branch = np.zeros((len(case.branches), 11))
    for k, br in enumerate(case.branches):
        branch[k, [F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT, BR_STATUS]] = [
            br.from_bus, br.to_bus, br.r, br.x, br.b_charging, br.tap,
            math.degrees(br.shift), 1 if br.status else 0]
    return RawMatpowerCase(base, bus, gen, branch, case.name)


# -- canonical JSON -----------------------------------------------------------

def case_to_dict(case: NetworkCase) -> dict:
    def gen_dict(g: Generator) -> dict:
        d = {"bus": g.bus, "p_set": g.p_set, "v_set": g.v_set, "q_set": g.q_set,
             "status": g.status}
        if g.controlled_bus is not None:
            d["controlled_bus"] = g.controlled_bus
        return d

    return {
        "format": CASE_FORMAT,
        "version": CASE_FORMAT_VERSION,
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [{
            "id": b.id, "kind": b.kind.value, "p_load": b.p_load, "q_load": b.q_load,
            "g_shunt": b.g_shunt, "b_shunt": b.b_shunt, "v_nominal": b.v_nominal,
            "v_init": b.v_init, "theta_init": b.theta_init,
        } for b in case.buses],
        "generators": [gen_dict(g) for g in case.generators],
        "branches": [{
            "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
            "b_charging": br.b_charging, "tap": br.tap, "shift": br.shift,
            "status": br.status,
        } for br in case.branches],
    }


def case_from_dict(data: dict) -> NetworkCase:
    if data.get("format") != CASE_FORMAT:
        raise CaseFormatError(f"not a {CASE_FORMAT} document")
    if data.get("version") != CASE_FORMAT_VERSION:
        raise CaseFormatError(f"unsupported case format version {data.get('version')!r}")
    try:
        buses = [Bus(
            id=int(b["id"]), kind=BusKind(b["kind"]),
            p_load=float(b.get("p_load", 0.0)), q_load=float(b.get("q_load", 0.0)),
            g_shunt=float(b.get("g_shunt", 0.0)), b_shunt=float(b.get("b_shunt", 0.0)),
            v_nominal=float(b.get("v_nominal", 1.0)), v_init=float(b.get("v_init", 1.0)),
            theta_init=float(b.get("theta_init", 0.0)),
        ) for b in data["buses"]]
        generators = [Generator(
            bus=int(g["bus"]), p_set=float(g["p_set"]), v_set=float(g.get("v_set", 1.0)),
            controlled_bus=None if g.get("controlled_bus") is None else int(g["controlled_bus"]),
            q_set=float(g.get("q_set", 0.0)), status=bool(g.get("status", True)),
        ) for g in data.get("generators", [])]
        branches = [Branch(
            from_bus=int(br["from"]), to_bus=int(br["to"]), r=float(br["r"]), x=float(br["x"]),
            b_charging=float(br.get("b_charging", 0.0)), tap=float(br.get("tap", 1.0)),
            shift=float(br.get("shift", 0.0)), status=bool(br.get("status", True)),
        ) for br in data.get("branches", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseFormatError(f"bad case document: {exc}") from exc
    case = NetworkCase(base_mva=float(data["base_mva"]), buses=tuple(buses),
                       generators=tuple(generators), branches=tuple(branches),
                       name=str(data.get("name", "case")))
    validate(case)
    return case


def dump_case_json(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=1) + "\n"


def parse_case_json(text: str) -> NetworkCase:
    return case_from_dict(json.loads(text))


def load_case(path) -> NetworkCase:
    """Read a ``.m`` MATPOWER file or a canonical ``.json`` case."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return parse_case_json(text)
    return to_network_case(parse_matpower(text, name=path.stem))


# -- reports ------------------------------------------------------------------

def write_report(report: SolveReport, fmt: str = "json") -> str:
    if fmt == "json":
        doc = {"format": REPORT_FORMAT, "version": REPORT_FORMAT_VERSION, **report.to_dict()}
        return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for k, step in enumerate(report.steps):
            for rec in step.trace:
                writer.writerow([k, repr(step.mu), int(step.converged), rec.iteration,
                                 repr(rec.residual_norm), rec.limited_v, rec.limited_q,
                                 rec.floored])
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def read_report(text: str) -> SolveReport:
    data = json.loads(text)
    if data.pop("format", None) != REPORT_FORMAT:
        raise CaseFormatError(f"not a {REPORT_FORMAT} document")
    data.pop("version", None)
    return SolveReport.from_dict(data)
