"""Per-unit network description and bus admittance matrix."""

from __future__ import annotations

import cmath
import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .sparse_linear import TripletMatrix, assemble

log = logging.getLogger(__name__)

#: Tolerance on V_set agreement between generators merged at one bus.
VSET_MERGE_TOL = 1e-6


class CaseError(ValueError):
    """Invalid or unsupported network data."""


class BusKind(enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_nominal: float = 1.0
    v_init: float = 1.0
    theta_init: float = 0.0


@dataclass(frozen=True)
class Generator:
    """A generating unit injecting at ``bus``.

    ``controlled_bus`` is the bus whose magnitude is held at ``v_set``;
    ``None`` means local control.  ``q_set`` is only used when the unit sits
    on a PQ bus and is treated as a fixed injection.
    """

    bus: int
    p_set: float
    v_set: float = 1.0
    controlled_bus: int | None = None
    q_set: float = 0.0
    status: bool = True

    @property
    def regulated_bus(self) -> int:
        return self.bus if self.controlled_bus is None else self.controlled_bus


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    status: bool = True


@dataclass(frozen=True)
class GenUnit:
    """In-service generators at one bus after merging."""

    bus: int
    controlled_bus: int
    p_set: float
    q_set: float
    v_set: float


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...] = ()
    branches: tuple[Branch, ...] = ()
    name: str = "case"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "branches", tuple(self.branches))
        index = {}
        for k, bus in enumerate(self.buses):
            if bus.id in index:
                raise CaseError(f"duplicate bus id {bus.id}")
            index[bus.id] = k
        object.__setattr__(self, "_index", index)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus_index(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise CaseError(f"unknown bus id {bus_id}") from None

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_index(bus_id)]

    @property
    def slack(self) -> Bus:
        slacks = [b for b in self.buses if b.kind is BusKind.SLACK]
        if len(slacks) != 1:
            raise CaseError(f"expected exactly one slack bus, found {len(slacks)}")
        return slacks[0]

    def in_service_branches(self) -> list[Branch]:
        return [br for br in self.branches if br.status]

    def in_service_generators(self) -> list[Generator]:
        return [g for g in self.generators if g.status]

    def with_updates(self, **changes) -> "NetworkCase":
        return replace(self, **changes)


def generator_units(case: NetworkCase) -> dict[str, list[GenUnit]]:
    """Merge in-service generators per bus and sort them by role.

    Returns a mapping with keys ``"slack"``, ``"pv"`` and ``"fixed"``; the
    role follows the kind of the generator's own bus.
    """
    grouped: dict[int, list[Generator]] = {}
    for gen in case.in_service_generators():
        grouped.setdefault(gen.bus, []).append(gen)
    units: dict[str, list[GenUnit]] = {"slack": [], "pv": [], "fixed": []}
    for bus_id, gens in grouped.items():
        first = gens[0]
        for other in gens[1:]:
            if abs(other.v_set - first.v_set) > VSET_MERGE_TOL:
                raise CaseError(
                    f"generators at bus {bus_id} disagree on v_set "
                    f"({first.v_set} vs {other.v_set})")
            if other.regulated_bus != first.regulated_bus:
                raise CaseError(f"generators at bus {bus_id} regulate different buses")
        unit = GenUnit(
            bus=bus_id,
            controlled_bus=first.regulated_bus,
            p_set=sum(g.p_set for g in gens),
            q_set=sum(g.q_set for g in gens),
            v_set=first.v_set,
        )
        kind = case.bus(bus_id).kind
        role = {BusKind.SLACK: "slack", BusKind.PV: "pv", BusKind.PQ: "fixed"}[kind]
        units[role].append(unit)
    return units


def slack_setpoint(case: NetworkCase) -> tuple[float, float]:
    """Slack voltage magnitude and angle (radians).

    The magnitude comes from a generator at the slack bus when there is one,
    otherwise from the bus's initial magnitude; the angle is always the
    bus's own angle.
    """
    slack = case.slack
    units = generator_units(case)["slack"]
    vmag = units[0].v_set if units else slack.v_init
    return vmag, slack.theta_init


def validate(case: NetworkCase) -> None:
    """Check the structural invariants; raise :class:`CaseError` if violated."""
    if case.base_mva <= 0:
        raise CaseError("base_mva must be positive")
    if case.n_bus == 0:
        raise CaseError("case has no buses")
    slack = case.slack
    for bus in case.buses:
        if not bus.v_nominal > 0:
            raise CaseError(f"bus {bus.id}: v_nominal must be positive")
    for k, br in enumerate(case.branches):
        case.bus_index(br.from_bus)
        case.bus_index(br.to_bus)
        if not br.status:
            continue
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {k} ({br.from_bus}-{br.to_bus}) has zero series impedance")
        if not br.tap > 0:
            raise CaseError(f"branch {k} ({br.from_bus}-{br.to_bus}) has non-positive tap")
    for gen in case.generators:
        case.bus_index(gen.bus)
        case.bus_index(gen.regulated_bus)
        if gen.status and not gen.v_set > 0:
            raise CaseError(f"generator at bus {gen.bus}: v_set must be positive")

    units = generator_units(case)
    has_unit = {u.bus for u in units["pv"]}
    for bus in case.buses:
        if bus.kind is BusKind.PV and bus.id not in has_unit:
            raise CaseError(f"PV bus {bus.id} has no in-service generator")
    regulated: dict[int, int] = {}
    for unit in units["pv"]:
        c = unit.controlled_bus
        if c == slack.id:
            raise CaseError(f"generator at bus {unit.bus} regulates the slack bus {c}")
        if c in regulated:
            raise CaseError(
                f"bus {c} is regulated by generators at both bus {regulated[c]} and bus {unit.bus}")
        regulated[c] = unit.bus
    vmag, _ = slack_setpoint(case)
    if not vmag > 0:
        raise CaseError(f"slack bus {slack.id} has non-positive voltage set point")

    islands = island_labels(case)
    n_islands = islands.max() + 1
    if n_islands > 1:
        home = islands[case.bus_index(slack.id)]
        stray = [case.buses[k].id for k in np.flatnonzero(islands != home)]
        raise CaseError(
            f"network has {n_islands} islands; buses not connected to the slack: {stray[:10]}")


def island_labels(case: NetworkCase) -> np.ndarray:
    n = case.n_bus
    rows, cols = [], []
    for br in case.in_service_branches():
        rows.append(case.bus_index(br.from_bus))
        cols.append(case.bus_index(br.to_bus))
    graph = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def branch_admittance(branch: Branch) -> tuple[complex, complex, complex, complex]:
    """Two-port pi-model entries (y_ff, y_ft, y_tf, y_tt) with tap and shift.

    The off-nominal transformer t*exp(j*shift) sits on the from side.
    """
    if branch.r == 0 and branch.x == 0:
        raise CaseError(f"branch {branch.from_bus}-{branch.to_bus} has zero series impedance")
    ys = 1.0 / complex(branch.r, branch.x)
    a = branch.tap * cmath.exp(1j * branch.shift)
    ytt = ys + 0.5j * branch.b_charging
    yff = ytt / (branch.tap * branch.tap)
    yft = -ys / a.conjugate()
    ytf = -ys / a
    return yff, yft, ytf, ytt


@dataclass(frozen=True)
class YBus:
    """Bus admittance matrix split into conductance and susceptance parts."""

    g: sp.csr_matrix
    b: sp.csr_matrix

    def to_complex(self) -> sp.csr_matrix:
        return (self.g + 1j * self.b).tocsr()


def branch_admittance_arrays(branches) -> tuple[np.ndarray, ...]:
    """Vectorized :func:`branch_admittance` over a sequence of branches."""
    r = np.array([br.r for br in branches], dtype=float)
    x = np.array([br.x for br in branches], dtype=float)
    bc = np.array([br.b_charging for br in branches], dtype=float)
    tap = np.array([br.tap for br in branches], dtype=float)
    shift = np.array([br.shift for br in branches], dtype=float)
    ys = 1.0 / (r + 1j * x)
    a = tap * np.exp(1j * shift)
    ytt = ys + 0.5j * bc
    return ytt / (tap * tap), -ys / np.conj(a), -ys / a, ytt


def build_ybus(case: NetworkCase) -> YBus:
    n = case.n_bus
    branches = case.in_service_branches()
    for br in branches:
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} has zero series impedance")
    f = np.array([case.bus_index(br.from_bus) for br in branches], dtype=np.int64)
    t = np.array([case.bus_index(br.to_bus) for br in branches], dtype=np.int64)
    yff, yft, ytf, ytt = branch_admittance_arrays(branches)
    diag = np.arange(n)
    rows = np.concatenate([f, f, t, t, diag])
    cols = np.concatenate([f, t, f, t, diag])
    shunt = np.array([complex(bus.g_shunt, bus.b_shunt) for bus in case.buses])
    vals = np.concatenate([yff, yft, ytf, ytt, shunt])
    g = TripletMatrix(n)
    b = TripletMatrix(n)
    g.add_many(rows, cols, vals.real)
    b.add_many(rows, cols, vals.imag)
    return YBus(assemble(g), assemble(b))


def scale_loading(case: NetworkCase, factor: float) -> NetworkCase:
    """Scale every P/Q demand by ``factor`` and redispatch generation.

    The added real demand is shared by all in-service generators in
    proportion to their P set points; units on the slack bus are not
    rescheduled, the slack picks up its share plus losses implicitly.
    """
    if not factor > 0:
        raise ValueError("load scale must be positive")
    buses = tuple(replace(b, p_load=b.p_load * factor, q_load=b.q_load * factor)
                  for b in case.buses)
    extra = (factor - 1.0) * sum(b.p_load for b in case.buses)
    gens = case.in_service_generators()
    total = sum(g.p_set for g in gens)
    if total <= 0 or extra == 0:
        return case.with_updates(buses=buses)
    ratio = 1.0 + extra / total
    slack_id = case.slack.id
    generators = tuple(
        replace(g, p_set=g.p_set * ratio) if g.status and g.bus != slack_id else g
        for g in case.generators)
    return case.with_updates(buses=buses, generators=generators)
