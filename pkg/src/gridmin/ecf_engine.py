"""Split-circuit Newton-Raphson engine.

Unknowns are the real and imaginary bus voltages, one reactive power per
voltage-regulating generator unit and the two slack injection currents,
ordered as::

    [V_R,0, V_I,0, V_R,1, V_I,1, ..., Q_0, ..., Q_m-1, I_slack_R, I_slack_I]

Rows follow the same layout: the real/imaginary KCL pair of every bus, one
magnitude constraint per regulating unit, then the two slack voltage
constraints.  KCL rows are written as *current leaving the bus*: network
and load currents enter with a plus sign, generator and slack injections
with a minus sign.

Every device contributes a "stamp" to a :class:`LinearProblem` ``A x = b``
whose value at the linearization point reproduces :func:`residual` exactly:
``A @ x_k - b == F(x_k)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network_model import (
    NetworkCase, build_ybus, generator_units, slack_setpoint, validate,
)
from .report import IterationRecord
from .sparse_linear import SingularMatrixError, TripletMatrix, assemble, lu_solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NrOptions:
    tol: float = 1e-6
    max_iter: int = 25
    v_step_limit: float = 0.1
    q_step_limit: float = 0.5
    vmag_floor: float = 1e-4

    def __post_init__(self):
        for name in ("tol", "max_iter", "v_step_limit", "q_step_limit", "vmag_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"NrOptions.{name} must be positive")


class NrDiverged(Exception):
    """Newton solve failed.

    ``reason`` is one of ``"max_iter"``, ``"non_finite"`` or ``"singular"``.
    """

    def __init__(self, reason: str, message: str, trace=None, state=None):
        super().__init__(message)
        self.reason = reason
        self.trace = trace or []
        self.state = state


@dataclass
class SplitState:
    v_real: np.ndarray
    v_imag: np.ndarray
    q_gen: np.ndarray
    i_slack_real: float = 0.0
    i_slack_imag: float = 0.0

    @property
    def vm(self) -> np.ndarray:
        return np.hypot(self.v_real, self.v_imag)

    @property
    def va(self) -> np.ndarray:
        return np.arctan2(self.v_imag, self.v_real)

    def to_vector(self) -> np.ndarray:
        n = len(self.v_real)
        x = np.empty(2 * n + len(self.q_gen) + 2)
        x[0:2 * n:2] = self.v_real
        x[1:2 * n:2] = self.v_imag
        x[2 * n:2 * n + len(self.q_gen)] = self.q_gen
        x[-2] = self.i_slack_real
        x[-1] = self.i_slack_imag
        return x

    @classmethod
    def from_vector(cls, x: np.ndarray, n_bus: int) -> "SplitState":
        x = np.asarray(x, dtype=float)
        return cls(
            v_real=x[0:2 * n_bus:2].copy(),
            v_imag=x[1:2 * n_bus:2].copy(),
            q_gen=x[2 * n_bus:-2].copy(),
            i_slack_real=float(x[-2]),
            i_slack_imag=float(x[-1]),
        )

    def copy(self) -> "SplitState":
        return SplitState(self.v_real.copy(), self.v_imag.copy(), self.q_gen.copy(),
                          self.i_slack_real, self.i_slack_imag)


@dataclass
class Residual:
    kcl_real: np.ndarray
    kcl_imag: np.ndarray
    vmag: np.ndarray
    slack_v: np.ndarray
    floored: int = 0

    def vector(self) -> np.ndarray:
        n = len(self.kcl_real)
        out = np.empty(2 * n + len(self.vmag) + 2)
        out[0:2 * n:2] = self.kcl_real
        out[1:2 * n:2] = self.kcl_imag
        out[2 * n:2 * n + len(self.vmag)] = self.vmag
        out[-2:] = self.slack_v
        return out

    def norm(self) -> float:
        return float(np.max(np.abs(self.vector())))


@dataclass(frozen=True)
class BusShunts:
    """Extra per-bus shunt admittances (drawing current from the bus)."""

    g: np.ndarray
    b: np.ndarray

    def is_zero(self) -> bool:
        return not (np.any(self.g) or np.any(self.b))


@dataclass
class LinearProblem:
    matrix: TripletMatrix
    rhs: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "LinearProblem":
        return cls(TripletMatrix(n), np.zeros(n))


class SplitCircuit:
    """A validated case compiled to index arrays for the split formulation."""

    def __init__(self, case: NetworkCase):
        validate(case)
        self.case = case
        self.n_bus = n = case.n_bus
        self.bus_ids = np.array(case.bus_ids)

        ybus = build_ybus(case)
        self.ybus = ybus
        self._net_rows, self._net_cols, self._net_vals = _network_triplets(ybus)

        units = generator_units(case)
        pv = units["pv"]
        self.pv_units = pv
        self.pv_bus = np.array([case.bus_index(u.bus) for u in pv], dtype=np.int64)
        self.pv_ctrl = np.array([case.bus_index(u.controlled_bus) for u in pv], dtype=np.int64)
        self.pv_p = np.array([u.p_set for u in pv], dtype=float)
        self.pv_v = np.array([u.v_set for u in pv], dtype=float)
        self.n_pv = len(pv)

        self.p_load = np.array([b.p_load for b in case.buses], dtype=float)
        self.q_load = np.array([b.q_load for b in case.buses], dtype=float)
        # Generators on PQ buses act as negative constant-power load.
        self.p_dem = self.p_load.copy()
        self.q_dem = self.q_load.copy()
        for u in units["fixed"]:
            k = case.bus_index(u.bus)
            self.p_dem[k] -= u.p_set
            self.q_dem[k] -= u.q_set
        self.fixed_units = units["fixed"]

        self.slack = case.bus_index(case.slack.id)
        self.slack_v, self.slack_theta = slack_setpoint(case)
        self.size = 2 * n + self.n_pv + 2

    @property
    def q_offset(self) -> int:
        return 2 * self.n_bus

    @property
    def slack_offset(self) -> int:
        return 2 * self.n_bus + self.n_pv

    def flat_state(self) -> SplitState:
        n = self.n_bus
        return SplitState(np.ones(n), np.zeros(n), np.zeros(self.n_pv))

    def case_state(self) -> SplitState:
        buses = self.case.buses
        vm = np.array([b.v_init for b in buses], dtype=float)
        va = np.array([b.theta_init for b in buses], dtype=float)
        return SplitState(vm * np.cos(va), vm * np.sin(va), np.zeros(self.n_pv))

    def zero_shunts(self) -> BusShunts:
        return BusShunts(np.zeros(self.n_bus), np.zeros(self.n_bus))


def _network_triplets(ybus):
    g = ybus.g.tocoo()
    b = ybus.b.tocoo()
    # G and B share their sparsity pattern only up to explicit zeros, so
    # stamp them separately.
    rows = np.concatenate([2 * g.row, 2 * g.row + 1, 2 * b.row, 2 * b.row + 1])
    cols = np.concatenate([2 * g.col, 2 * g.col + 1, 2 * b.col + 1, 2 * b.col])
    vals = np.concatenate([g.data, g.data, -b.data, b.data])
    return rows, cols, vals


# -- device equations ---------------------------------------------------------

def _vmag2(v_real, v_imag, vmag_floor):
    m = v_real * v_real + v_imag * v_imag
    low = m < vmag_floor * vmag_floor
    return np.where(low, vmag_floor * vmag_floor, m), low


def pq_current(p, q, v_real, v_imag, vmag_floor: float = 1e-4):
    """Current of a constant-power element, ``I = (P - jQ) / conj(V)``.

    Returns ``(i_real, i_imag)``.  Below ``vmag_floor`` the squared magnitude
    in the denominator is clamped; use :func:`floored_count` to detect it.
    """
    p, q, v_real, v_imag = np.broadcast_arrays(*(np.asarray(a, dtype=float)
                                                 for a in (p, q, v_real, v_imag)))
    m, _ = _vmag2(v_real, v_imag, vmag_floor)
    i_real = (p * v_real + q * v_imag) / m
    i_imag = (p * v_imag - q * v_real) / m
    if i_real.ndim == 0:
        return float(i_real), float(i_imag)
    return i_real, i_imag


def floored_count(v_real, v_imag, vmag_floor: float) -> int:
    return int(np.count_nonzero(_vmag2(np.asarray(v_real), np.asarray(v_imag), vmag_floor)[1]))


def pq_partials(p, q, v_real, v_imag, vmag_floor: float = 1e-4):
    """Partials of :func:`pq_current`.

    Returns ``(dIr_dVr, dIr_dVi, dIi_dVr, dIi_dVi, dIr_dQ, dIi_dQ)``.
    """
    m, _ = _vmag2(v_real, v_imag, vmag_floor)
    m2 = m * m
    vr2_vi2 = v_real * v_real - v_imag * v_imag
    cross = 2.0 * v_real * v_imag
    dir_dvr = -(p * vr2_vi2 + q * cross) / m2
    dir_dvi = (q * vr2_vi2 - p * cross) / m2
    return dir_dvr, dir_dvi, dir_dvi, -dir_dvr, v_imag / m, -v_real / m


# -- stamps -------------------------------------------------------------------

def _kcl_block(out, buses, cols_r, cols_i, d_rr, d_ri, d_ir, d_ii):
    rows_r = 2 * buses
    out.matrix.add_many(
        np.concatenate([rows_r, rows_r, rows_r + 1, rows_r + 1]),
        np.concatenate([cols_r, cols_i, cols_r, cols_i]),
        np.concatenate([d_rr, d_ri, d_ir, d_ii]),
    )


def stamp_network(out: LinearProblem, circuit: SplitCircuit) -> None:
    out.matrix.add_many(circuit._net_rows, circuit._net_cols, circuit._net_vals)


def stamp_pq(out: LinearProblem, buses, p, q, v_real, v_imag, vmag_floor: float) -> int:
    """Linearized constant-power loads drawing current from ``buses``.

    ``v_real``/``v_imag`` are the voltages at ``buses``.  Returns the number
    of floored evaluations.
    """
    buses = np.asarray(buses, dtype=np.int64)
    i_r, i_i = pq_current(p, q, v_real, v_imag, vmag_floor)
    d_rr, d_ri, d_ir, d_ii, _, _ = pq_partials(p, q, v_real, v_imag, vmag_floor)
    _kcl_block(out, buses, 2 * buses, 2 * buses + 1, d_rr, d_ri, d_ir, d_ii)
    # Constant history source: J x_k - I(x_k).
    np.add.at(out.rhs, 2 * buses, d_rr * v_real + d_ri * v_imag - i_r)
    np.add.at(out.rhs, 2 * buses + 1, d_ir * v_real + d_ii * v_imag - i_i)
    return floored_count(v_real, v_imag, vmag_floor)


def stamp_pv(out: LinearProblem, circuit: SplitCircuit, state: SplitState,
             vmag_floor: float) -> int:
    """Voltage-regulating generators: injection at the unit's bus with a free
    Q column, plus one magnitude-constraint row at the regulated bus."""
    if circuit.n_pv == 0:
        return 0
    i = circuit.pv_bus
    c = circuit.pv_ctrl
    q = state.q_gen
    vr, vi = state.v_real[i], state.v_imag[i]
    i_r, i_i = pq_current(circuit.pv_p, q, vr, vi, vmag_floor)
    d_rr, d_ri, d_ir, d_ii, d_rq, d_iq = pq_partials(circuit.pv_p, q, vr, vi, vmag_floor)
    # Injection: stamp the negated element current.
    _kcl_block(out, i, 2 * i, 2 * i + 1, -d_rr, -d_ri, -d_ir, -d_ii)
    qcols = circuit.q_offset + np.arange(circuit.n_pv)
    out.matrix.add_many(np.concatenate([2 * i, 2 * i + 1]), np.concatenate([qcols, qcols]),
                        np.concatenate([-d_rq, -d_iq]))
    # -(d_rq * q) is the only Q term in the history; I is linear in Q.
    np.add.at(out.rhs, 2 * i, -(d_rr * vr + d_ri * vi + d_rq * q) + i_r)
    np.add.at(out.rhs, 2 * i + 1, -(d_ir * vr + d_ii * vi + d_iq * q) + i_i)

    vr_c, vi_c = state.v_real[c], state.v_imag[c]
    rows = qcols
    out.matrix.add_many(np.concatenate([rows, rows]), np.concatenate([2 * c, 2 * c + 1]),
                        np.concatenate([2.0 * vr_c, 2.0 * vi_c]))
    out.rhs[rows] += vr_c * vr_c + vi_c * vi_c + circuit.pv_v * circuit.pv_v
    return floored_count(vr, vi, vmag_floor)


def stamp_slack(out: LinearProblem, circuit: SplitCircuit) -> None:
    """Two voltage-source rows at the slack bus and their current columns."""
    s = circuit.slack
    k = circuit.slack_offset
    out.matrix.add_many([2 * s, 2 * s + 1, k, k + 1], [k, k + 1, 2 * s, 2 * s + 1],
                        [-1.0, -1.0, 1.0, 1.0])
    out.rhs[k] += circuit.slack_v * np.cos(circuit.slack_theta)
    out.rhs[k + 1] += circuit.slack_v * np.sin(circuit.slack_theta)


def stamp_shunt_admittance(out: LinearProblem, buses, g, b) -> None:
    """Linear shunts ``g + jb`` drawing ``(g V_R - b V_I, g V_I + b V_R)``."""
    buses = np.asarray(buses, dtype=np.int64)
    g = np.broadcast_to(np.asarray(g, dtype=float), buses.shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), buses.shape)
    _kcl_block(out, buses, 2 * buses, 2 * buses + 1, g, -b, b, g)


def linearize(circuit: SplitCircuit, state: SplitState, shunts: BusShunts | None = None,
              vmag_floor: float = 1e-4) -> tuple[LinearProblem, int]:
    """Assemble the linearized circuit around ``state``.

    Returns the problem and the number of floored device evaluations.
    """
    out = LinearProblem.empty(circuit.size)
    stamp_network(out, circuit)
    buses = np.arange(circuit.n_bus)
    floored = stamp_pq(out, buses, circuit.p_dem, circuit.q_dem,
                       state.v_real, state.v_imag, vmag_floor)
    floored += stamp_pv(out, circuit, state, vmag_floor)
    stamp_slack(out, circuit)
    if shunts is not None and not shunts.is_zero():
        stamp_shunt_admittance(out, buses, shunts.g, shunts.b)
    return out, floored


def residual(circuit: SplitCircuit, state: SplitState, shunts: BusShunts | None = None,
             vmag_floor: float = 1e-4) -> Residual:
    """Exact nonlinear mismatch of every equation at ``state``."""
    vr, vi = state.v_real, state.v_imag
    g, b = circuit.ybus.g, circuit.ybus.b
    kcl_r = g @ vr - b @ vi
    kcl_i = b @ vr + g @ vi

    i_r, i_i = pq_current(circuit.p_dem, circuit.q_dem, vr, vi, vmag_floor)
    kcl_r = kcl_r + i_r
    kcl_i = kcl_i + i_i
    floored = floored_count(vr, vi, vmag_floor)

    if circuit.n_pv:
        i = circuit.pv_bus
        g_r, g_i = pq_current(circuit.pv_p, state.q_gen, vr[i], vi[i], vmag_floor)
        np.subtract.at(kcl_r, i, g_r)
        np.subtract.at(kcl_i, i, g_i)
        floored += floored_count(vr[i], vi[i], vmag_floor)

    if shunts is not None and not shunts.is_zero():
        kcl_r = kcl_r + (shunts.g * vr - shunts.b * vi)
        kcl_i = kcl_i + (shunts.g * vi + shunts.b * vr)

    s = circuit.slack
    kcl_r[s] -= state.i_slack_real
    kcl_i[s] -= state.i_slack_imag

    c = circuit.pv_ctrl
    vmag = vr[c] ** 2 + vi[c] ** 2 - circuit.pv_v ** 2
    slack_v = np.array([
        vr[s] - circuit.slack_v * np.cos(circuit.slack_theta),
        vi[s] - circuit.slack_v * np.sin(circuit.slack_theta),
    ])
    return Residual(kcl_r, kcl_i, vmag, slack_v, floored)


def jacobian(circuit: SplitCircuit, state: SplitState, shunts: BusShunts | None = None,
             vmag_floor: float = 1e-4):
    """Compressed Jacobian of :func:`residual` at ``state``."""
    problem, _ = linearize(circuit, state, shunts, vmag_floor)
    return assemble(problem.matrix)


def power_mismatch(circuit: SplitCircuit, state: SplitState) -> np.ndarray:
    """Per-bus complex power mismatch ``S_injected - S_scheduled``.

    Computed from complex phasors and the complex Y-bus, independently of the
    split current equations.
    """
    v = state.v_real + 1j * state.v_imag
    s_net = v * np.conj(circuit.ybus.to_complex() @ v)
    sched = -(circuit.p_dem + 1j * circuit.q_dem)
    if circuit.n_pv:
        np.add.at(sched, circuit.pv_bus, circuit.pv_p + 1j * state.q_gen)
    s = circuit.slack
    sched[s] += v[s] * np.conj(state.i_slack_real + 1j * state.i_slack_imag)
    return s_net - sched


@dataclass
class NrResult:
    state: SplitState
    trace: list[IterationRecord] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def nr_solve(circuit: SplitCircuit, initial: SplitState, shunts: BusShunts | None = None,
             options: NrOptions = NrOptions()) -> NrResult:
    """Newton-Raphson with independent per-variable step limiting.

    Each ``dV_R``/``dV_I`` component is clamped to ``v_step_limit`` and each
    ``dQ`` to ``q_step_limit``; slack currents are never limited.  Raises
    :class:`NrDiverged` on failure.
    """
    n = circuit.n_bus
    x = initial.to_vector()
    if x.shape[0] != circuit.size:
        raise ValueError("initial state does not match the circuit dimension")
    volt = slice(0, 2 * n)
    qsl = slice(2 * n, 2 * n + circuit.n_pv)
    trace: list[IterationRecord] = []
    state = initial.copy()
    for k in range(options.max_iter + 1):
        res = residual(circuit, state, shunts, options.vmag_floor)
        f = res.vector()
        norm = float(np.max(np.abs(f)))
        record = IterationRecord(iteration=k, residual_norm=norm, floored=res.floored)
        trace.append(record)
        if not np.isfinite(norm):
            raise NrDiverged("non_finite", f"non-finite residual at iteration {k}", trace, state)
        if norm <= options.tol:
            return NrResult(state, trace)
        if k == options.max_iter:
            break
        problem, _ = linearize(circuit, state, shunts, options.vmag_floor)
        try:
            dx = lu_solve(assemble(problem.matrix), -f)
        except SingularMatrixError as exc:
            raise NrDiverged("singular", f"singular Jacobian at iteration {k}: {exc}",
                             trace, state) from exc
        if not np.all(np.isfinite(dx)):
            raise NrDiverged("non_finite", f"non-finite update at iteration {k}", trace, state)
        dv = dx[volt]
        dq = dx[qsl]
        record.limited_v = int(np.count_nonzero(np.abs(dv) > options.v_step_limit))
        record.limited_q = int(np.count_nonzero(np.abs(dq) > options.q_step_limit))
        dx[volt] = np.clip(dv, -options.v_step_limit, options.v_step_limit)
        dx[qsl] = np.clip(dq, -options.q_step_limit, options.q_step_limit)
        x = x + dx
        state = SplitState.from_vector(x, n)
    raise NrDiverged("max_iter",
                     f"no convergence in {options.max_iter} iterations "
                     f"(residual {trace[-1].residual_norm:.3e})", trace, state)
