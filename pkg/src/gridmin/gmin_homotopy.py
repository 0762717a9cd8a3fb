"""Two-stage G-min stepping.

Stage I replaces every nonlinear bus model by a linear stand-in:

* each voltage-regulating unit becomes a pair of free current sources at its
  own bus, with the regulated bus pinned to ``v_set`` at the DC angle;
* each constant-power demand becomes the admittance that would draw the
  scheduled power at the bus base voltage.

One linear solve gives the relaxed operating point.  The power each
stand-in delivers there differs from its schedule; that error, expressed as
an admittance at the relaxed voltage, is the homotopy admittance.  Placing
it in parallel with the true nonlinear model (with the sign that cancels
the error) reproduces the relaxed solution exactly, so the relaxed point
already solves the homotopy problem at ``mu = 1``.

Stage II scales the homotopy admittances by ``mu`` and steps ``mu`` to 0
with :func:`gridmin.driver.step_mu`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from .dc_power_flow import DcSolution, solve_dc
from .driver import build_report, max_vm_deviation, step_mu
from .ecf_engine import (
    BusShunts, LinearProblem, NrOptions, SplitCircuit, SplitState, nr_solve, residual,
    stamp_network, stamp_shunt_admittance,
)
from .network_model import CaseError, NetworkCase
from .report import IterationRecord, StepRecord
from .sparse_linear import SingularMatrixError, assemble, lu_solve

log = logging.getLogger(__name__)


class SubstitutionError(RuntimeError):
    """The relaxed point does not solve the mu = 1 problem (internal bug)."""


@dataclass(frozen=True)
class GminOptions:
    nr: NrOptions = NrOptions()
    mu_min_step: float = 1e-4
    max_homotopy_steps: int = 100
    stepping: str = "jump"
    # Off by default: the relaxed Q seeds the solve unconditionally.
    q_seed_clamp: float | None = None

    def __post_init__(self):
        if not (self.mu_min_step > 0 and self.max_homotopy_steps > 0):
            raise ValueError("mu_min_step and max_homotopy_steps must be positive")


@dataclass(frozen=True)
class RelaxedSolution:
    v_real: np.ndarray
    v_imag: np.ndarray
    pv_i_real: np.ndarray  # source currents per regulating unit
    pv_i_imag: np.ndarray
    p_relaxed: np.ndarray
    q_relaxed: np.ndarray
    i_slack_real: float
    i_slack_imag: float
    load_bus: np.ndarray  # bus indices carrying a relaxed demand admittance
    g_base: np.ndarray
    b_base: np.ndarray


@dataclass(frozen=True)
class HomotopyAdmittanceSet:
    """Relaxation errors expressed as admittances.

    ``g_pv`` sits at each regulating unit's own bus, ``g_pq``/``b_pq`` at
    each demand bus.  The shunts actually installed are the negatives of
    these values, see :meth:`installed`.
    """

    pv_bus: np.ndarray
    g_pv: np.ndarray
    load_bus: np.ndarray
    g_pq: np.ndarray
    b_pq: np.ndarray
    g_pq_base: np.ndarray
    b_pq_base: np.ndarray

    def scaled(self, mu: float) -> "HomotopyAdmittanceSet":
        return HomotopyAdmittanceSet(self.pv_bus, mu * self.g_pv, self.load_bus,
                                     mu * self.g_pq, mu * self.b_pq,
                                     self.g_pq_base, self.b_pq_base)

    def installed(self, n_bus: int) -> BusShunts:
        """Per-bus shunts that close the relaxation error."""
        g = np.zeros(n_bus)
        b = np.zeros(n_bus)
        np.subtract.at(g, self.pv_bus, self.g_pv)
        np.subtract.at(g, self.load_bus, self.g_pq)
        np.subtract.at(b, self.load_bus, self.b_pq)
        return BusShunts(g, b)


def base_voltages(circuit: SplitCircuit) -> np.ndarray:
    """V_B per bus: the set point if regulated (or slack), else nominal."""
    vb = np.array([bus.v_nominal for bus in circuit.case.buses], dtype=float)
    vb[circuit.pv_ctrl] = circuit.pv_v
    vb[circuit.slack] = circuit.slack_v
    return vb


def solve_relaxed(circuit: SplitCircuit, dc: DcSolution) -> RelaxedSolution:
    """One linear solve of the relaxed circuit."""
    n, m = circuit.n_bus, circuit.n_pv
    size = 2 * n + 2 * m + 2
    out = LinearProblem.empty(size)
    stamp_network(out, circuit)

    load_bus = np.flatnonzero((circuit.p_dem != 0) | (circuit.q_dem != 0))
    vb2 = base_voltages(circuit)[load_bus] ** 2
    g_base = circuit.p_dem[load_bus] / vb2
    b_base = -circuit.q_dem[load_bus] / vb2
    stamp_shunt_admittance(out, load_bus, g_base, b_base)

    i, c = circuit.pv_bus, circuit.pv_ctrl
    src = 2 * n + 2 * np.arange(m)
    out.matrix.add_many(np.concatenate([2 * i, 2 * i + 1]), np.concatenate([src, src + 1]),
                        -np.ones(2 * m))
    out.matrix.add_many(np.concatenate([src, src + 1]), np.concatenate([2 * c, 2 * c + 1]),
                        np.ones(2 * m))
    theta = dc.theta[c]
    out.rhs[src] = circuit.pv_v * np.cos(theta)
    out.rhs[src + 1] = circuit.pv_v * np.sin(theta)

    s, k = circuit.slack, 2 * n + 2 * m
    out.matrix.add_many([2 * s, 2 * s + 1, k, k + 1], [k, k + 1, 2 * s, 2 * s + 1],
                        [-1.0, -1.0, 1.0, 1.0])
    out.rhs[k] = circuit.slack_v * np.cos(circuit.slack_theta)
    out.rhs[k + 1] = circuit.slack_v * np.sin(circuit.slack_theta)

    try:
        x = lu_solve(assemble(out.matrix), out.rhs)
    except SingularMatrixError as exc:
        raise CaseError(f"relaxed circuit is singular: {exc}") from exc

    vr, vi = x[0:2 * n:2], x[1:2 * n:2]
    ir, ii = x[src], x[src + 1]
    # Power delivered by the sources into their bus (injection convention).
    p_rel = ir * vr[i] + ii * vi[i]
    q_rel = ir * vi[i] - ii * vr[i]
    return RelaxedSolution(vr.copy(), vi.copy(), ir, ii, p_rel, q_rel,
                           float(x[k]), float(x[k + 1]), load_bus, g_base, b_base)


def homotopy_admittances(circuit: SplitCircuit, relaxed: RelaxedSolution,
                         vmag_floor: float = 1e-4) -> HomotopyAdmittanceSet:
    i = circuit.pv_bus
    vi2 = relaxed.v_real[i] ** 2 + relaxed.v_imag[i] ** 2
    lb = relaxed.load_bus
    vl2 = relaxed.v_real[lb] ** 2 + relaxed.v_imag[lb] ** 2
    low = np.concatenate([i[vi2 < vmag_floor ** 2], lb[vl2 < vmag_floor ** 2]])
    if low.size:
        ids = sorted({int(circuit.bus_ids[k]) for k in low})
        raise CaseError(f"relaxed circuit collapsed the voltage at buses {ids[:10]}")
    g_pv = (relaxed.p_relaxed - circuit.pv_p) / vi2
    g_pq = circuit.p_dem[lb] / vl2 - relaxed.g_base
    b_pq = -circuit.q_dem[lb] / vl2 - relaxed.b_base
    return HomotopyAdmittanceSet(i.copy(), g_pv, lb.copy(), g_pq, b_pq,
                                 relaxed.g_base, relaxed.b_base)


def relaxed_state(relaxed: RelaxedSolution, q_seed_clamp: float | None = None) -> SplitState:
    q = relaxed.q_relaxed.copy()
    if q_seed_clamp is not None:
        q = np.clip(q, -q_seed_clamp, q_seed_clamp)
    return SplitState(relaxed.v_real.copy(), relaxed.v_imag.copy(), q,
                      relaxed.i_slack_real, relaxed.i_slack_imag)


def stage_one(case: NetworkCase, circuit: SplitCircuit | None = None,
              vmag_floor: float = 1e-4):
    """DC angles, relaxed solve and homotopy admittances."""
    circuit = circuit or SplitCircuit(case)
    dc = solve_dc(case)
    relaxed = solve_relaxed(circuit, dc)
    admittances = homotopy_admittances(circuit, relaxed, vmag_floor)
    return circuit, dc, relaxed, admittances


def gmin_solve(case: NetworkCase, options: GminOptions = GminOptions(), notes=()):
    started = time.perf_counter()
    nr = options.nr
    circuit, _, relaxed, adm = stage_one(case, vmag_floor=nr.vmag_floor)
    initial = relaxed_state(relaxed, options.q_seed_clamp)

    cert = residual(circuit, initial, adm.installed(circuit.n_bus), nr.vmag_floor)
    cert_norm = cert.norm()
    if options.q_seed_clamp is None and cert_norm > nr.tol:
        raise SubstitutionError(
            f"relaxed point leaves residual {cert_norm:.3e} at mu=1 (expected <= {nr.tol})")
    first = StepRecord(1.0, True, 0, [IterationRecord(0, cert_norm, floored=cert.floored)])

    def solve_at(mu, start):
        return nr_solve(circuit, start, adm.scaled(mu).installed(circuit.n_bus), nr)

    outcome = step_mu(solve_at, initial, mu_min_step=options.mu_min_step,
                      max_steps=options.max_homotopy_steps, stepping=options.stepping)
    deviation = max_vm_deviation(initial, outcome.state) if outcome.converged else None
    return build_report(
        case, "gmin", circuit, converged=outcome.converged, message=outcome.message,
        state=outcome.state, steps=[first] + outcome.steps, mu_trace=outcome.mu_trace,
        initial_deviation_vm=deviation, options=asdict(options),
        started=started, notes=notes)

