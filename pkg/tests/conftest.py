"""Shared fixtures: bundled MATPOWER cases, frozen reference solutions and
small hand-built networks."""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from gridmin.case_io import load_case
from gridmin.network_model import Branch, Bus, BusKind, Generator, NetworkCase

DATA = Path(__file__).parent / "data"
CASE_DIR = DATA / "cases"
REF_DIR = DATA / "reference"
STANDARD_CASES = ("case9", "case14", "case30", "case57", "case118", "case300")


@lru_cache(maxsize=None)
def standard_case(name: str) -> NetworkCase:
    return load_case(CASE_DIR / f"{name}.m")


@lru_cache(maxsize=None)
def reference(name: str) -> dict:
    return json.loads((REF_DIR / f"{name}.json").read_text())


def two_bus(p_load: float = 1.0, q_load: float = 0.0, x: float = 0.1, r: float = 0.0,
            v_slack: float = 1.0) -> NetworkCase:
    """Slack bus 1 feeding a PQ load at bus 2 through one series impedance."""
    return NetworkCase(
        base_mva=100.0,
        buses=(Bus(1, BusKind.SLACK), Bus(2, BusKind.PQ, p_load=p_load, q_load=q_load)),
        generators=(Generator(1, 0.0, v_set=v_slack),),
        branches=(Branch(1, 2, r, x),),
        name="two_bus",
    )


def four_bus_remote() -> NetworkCase:
    """Generator at bus 2 holds the magnitude of load bus 3 at 1.02."""
    return NetworkCase(
        base_mva=100.0,
        buses=(
            Bus(1, BusKind.SLACK),
            Bus(2, BusKind.PV),
            Bus(3, BusKind.PQ, p_load=0.9, q_load=0.3),
            Bus(4, BusKind.PQ, p_load=0.7, q_load=0.25, b_shunt=0.05),
        ),
        generators=(
            Generator(1, 0.0, v_set=1.03),
            Generator(2, 0.8, v_set=1.02, controlled_bus=3),
        ),
        branches=(
            Branch(1, 2, 0.01, 0.08, b_charging=0.02),
            Branch(2, 3, 0.02, 0.10, b_charging=0.01),
            Branch(3, 4, 0.015, 0.09),
            Branch(1, 4, 0.02, 0.12, b_charging=0.03, tap=0.98),
        ),
        name="four_bus_remote",
    )


def complex_ybus(case: NetworkCase) -> np.ndarray:
    """Dense Y-bus from first principles: each branch is a pi section behind
    an ideal transformer of complex ratio a on its from side.  The
    transformer enforces V_f' = V_f / a and conserves power, so the
    from-side current is I_f'/conj(a)."""
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.in_service_branches():
        f, t = case.bus_index(br.from_bus), case.bus_index(br.to_bus)
        a = br.tap * np.exp(1j * br.shift)
        ys = 1.0 / complex(br.r, br.x)
        half = 0.5j * br.b_charging
        # Currents for unit voltage at f (then t) by direct circuit analysis.
        for col, vf, vt in ((f, 1.0, 0.0), (t, 0.0, 1.0)):
            vfp = vf / a
            i_fp = (vfp - vt) * ys + vfp * half
            i_t = (vt - vfp) * ys + vt * half
            y[f, col] += i_fp / np.conj(a)
            y[t, col] += i_t
    for k, bus in enumerate(case.buses):
        y[k, k] += bus.g_shunt + 1j * bus.b_shunt
    return y


def polar_power_flow(case: NetworkCase, regulated: dict[int, float], guess=None):
    """Independent polar power-flow oracle solved with scipy.optimize.fsolve.

    ``regulated`` maps bus id -> held magnitude.  Every bus owning a
    generator (other than the slack) has free Q; every regulated bus has
    fixed |V|.  The problem is square when each generator regulates exactly
    one bus.
    """
    from scipy.optimize import fsolve

    ybus = complex_ybus(case)
    n = case.n_bus
    s = case.bus_index(case.slack.id)
    slack_gen = next(g for g in case.generators if g.bus == case.slack.id)
    p_inj = np.array([-b.p_load for b in case.buses])
    q_inj = np.array([-b.q_load for b in case.buses])
    free_q = set()
    for g in case.in_service_generators():
        k = case.bus_index(g.bus)
        if k != s:
            p_inj[k] += g.p_set
            free_q.add(k)
    fixed_v = {case.bus_index(b): v for b, v in regulated.items()}
    ang_idx = [k for k in range(n) if k != s]
    mag_idx = [k for k in range(n) if k != s and k not in fixed_v]
    p_rows = ang_idx
    q_rows = [k for k in range(n) if k != s and k not in free_q]

    def unpack(z):
        va = np.zeros(n)
        vm = np.ones(n)
        vm[s] = slack_gen.v_set
        for k, v in fixed_v.items():
            vm[k] = v
        va[ang_idx] = z[:len(ang_idx)]
        vm[mag_idx] = z[len(ang_idx):]
        return vm, va

    def equations(z):
        vm, va = unpack(z)
        v = vm * np.exp(1j * va)
        sbus = v * np.conj(ybus @ v)
        return np.concatenate([sbus.real[p_rows] - p_inj[p_rows],
                               sbus.imag[q_rows] - q_inj[q_rows]])

    z0 = np.concatenate([np.zeros(len(ang_idx)), np.ones(len(mag_idx))]) if guess is None else guess
    assert len(p_rows) + len(q_rows) == len(z0), "oracle problem is not square"
    z, info, ok, msg = fsolve(equations, z0, xtol=1e-13, full_output=True)
    assert ok == 1, msg
    return unpack(z)


# -- acceptance summary --------------------------------------------------------

def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance_log(request):
    """Append one PASS/FAIL line per acceptance criterion (INFO when
    ``passed`` is None, for non-gating benchmarks)."""
    lines = request.config._acceptance_lines

    def log(number, title, passed, detail=""):
        status = "INFO" if passed is None else ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2} {status}: {title}"
        if detail:
            line += f" ({detail})"
        lines.append(line)
        print(line)

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


# -- numerical oracles -----------------------------------------------------------

def fd_jacobian(fun, x, rel_step=1e-3):
    """Central differences with one Richardson extrapolation (h and h/2),
    so the truncation error is fourth order."""
    x = np.asarray(x, dtype=float)
    f0 = fun(x)
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))

        def central(step):
            xp, xm = x.copy(), x.copy()
            xp[j] += step
            xm[j] -= step
            return (fun(xp) - fun(xm)) / (2 * step)

        jac[:, j] = (4 * central(h / 2) - central(h)) / 3
    return jac


def random_interior_state(circuit, rng):
    """Voltages near nominal with modest angles; generic Q and slack currents."""
    from gridmin.ecf_engine import SplitState

    n = circuit.n_bus
    vm = rng.uniform(0.9, 1.1, n)
    va = rng.uniform(-0.5, 0.5, n)
    return SplitState(vm * np.cos(va), vm * np.sin(va), rng.uniform(-1.0, 1.0, circuit.n_pv),
                      float(rng.uniform(-2, 2)), float(rng.uniform(-2, 2)))


def jacobian_relative_error(analytic, numeric):
    """Entry-wise relative error; entries below 1e-9 of the matrix scale are
    compared in absolute terms against that scale instead."""
    scale = max(np.max(np.abs(analytic)), 1.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-9 * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))
