"""Linear DC power flow used to seed bus angles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network_model import CaseError, NetworkCase, generator_units, island_labels, slack_setpoint
from .sparse_linear import SingularMatrixError, TripletMatrix, assemble, lu_solve


@dataclass(frozen=True)
class DcSolution:
    theta: np.ndarray  # radians, in case bus order


@dataclass(frozen=True)
class DcSystem:
    """``B' theta = p_net - p_shift`` before the slack row is replaced."""

    bprime: object  # compressed sparse matrix
    p_net: np.ndarray
    p_shift: np.ndarray
    branch_from: np.ndarray
    branch_to: np.ndarray
    branch_b: np.ndarray
    branch_shift: np.ndarray


def dc_system(case: NetworkCase) -> DcSystem:
    """Build B' from series reactances (no resistance, no taps) and the
    scheduled net real injections (generation minus load)."""
    n = case.n_bus
    branches = case.in_service_branches()
    for br in branches:
        if br.x == 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} has x = 0; DC power flow undefined")
    f = np.array([case.bus_index(br.from_bus) for br in branches], dtype=np.int64)
    t = np.array([case.bus_index(br.to_bus) for br in branches], dtype=np.int64)
    b = np.array([1.0 / br.x for br in branches])
    shift = np.array([br.shift for br in branches])

    trip = TripletMatrix(n)
    trip.add_many(np.concatenate([f, f, t, t]), np.concatenate([f, t, f, t]),
                  np.concatenate([b, -b, -b, b]))
    bprime = assemble(trip)

    p_net = -np.array([bus.p_load for bus in case.buses])
    units = generator_units(case)
    for unit in units["pv"] + units["fixed"] + units["slack"]:
        p_net[case.bus_index(unit.bus)] += unit.p_set
    # A phase shifter's flow b*(theta_f - theta_t - shift) leaves a constant
    # -b*shift at the from bus and +b*shift at the to bus.
    p_shift = np.zeros(n)
    np.add.at(p_shift, f, -b * shift)
    np.add.at(p_shift, t, b * shift)
    return DcSystem(bprime, p_net, p_shift, f, t, b, shift)


def solve_dc(case: NetworkCase) -> DcSolution:
    system = dc_system(case)
    n = case.n_bus
    s = case.bus_index(case.slack.id)
    _, theta_slack = slack_setpoint(case)

    mat = system.bprime.tolil()
    rhs = system.p_net - system.p_shift
    mat[s, :] = 0.0
    mat[s, s] = 1.0
    rhs[s] = theta_slack
    try:
        theta = lu_solve(mat.tocsr(), rhs)
    except SingularMatrixError as exc:
        labels = island_labels(case)
        stray = [case.buses[k].id for k in np.flatnonzero(labels != labels[s])]
        raise CaseError(
            f"singular B' matrix; buses disconnected from the slack: {stray[:10]}") from exc
    theta[s] = theta_slack
    if n and not np.all(np.isfinite(theta)):
        raise CaseError("DC power flow produced non-finite angles")
    return DcSolution(theta)


def branch_flows(case: NetworkCase, theta: np.ndarray) -> np.ndarray:
    """DC real-power flow on each in-service branch, from-to direction."""
    system = dc_system(case)
    return system.branch_b * (theta[system.branch_from] - theta[system.branch_to]
                              - system.branch_shift)
