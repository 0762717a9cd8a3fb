"""Dynamic homotopy-factor stepping and report assembly.

Both homotopy methods share the same schedule: from the last converged
factor ``mu`` try to jump straight to 0; on divergence halve the step and
retry; after every success reset the step to the full remaining distance.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .ecf_engine import NrDiverged, NrOptions, NrResult, SplitCircuit, SplitState, nr_solve
from .network_model import NetworkCase
from .report import SolveReport, StepRecord

log = logging.getLogger(__name__)

STEPPING_MODES = ("jump", "double")


@dataclass
class DriverOutcome:
    converged: bool
    state: SplitState
    steps: list[StepRecord] = field(default_factory=list)
    mu_trace: list[float] = field(default_factory=list)
    message: str = ""


def step_mu(solve_at: Callable[[float, SplitState], NrResult], state: SplitState, *,
            mu_min_step: float, max_steps: int, stepping: str = "jump") -> DriverOutcome:
    """Drive the homotopy factor from 1 to 0.

    ``solve_at(mu, start)`` must return an :class:`NrResult` or raise
    :class:`NrDiverged`.  ``state`` is the converged solution at ``mu = 1``.
    """
    if stepping not in STEPPING_MODES:
        raise ValueError(f"stepping must be one of {STEPPING_MODES}")
    out = DriverOutcome(False, state, mu_trace=[1.0])
    mu, dmu = 1.0, 1.0
    while mu > 0.0:
        if len(out.steps) >= max_steps:
            out.message = f"homotopy step limit {max_steps} reached at mu={mu:.6g}"
            return out
        target = mu - dmu if dmu < mu else 0.0
        try:
            res = solve_at(target, out.state)
        except NrDiverged as exc:
            out.steps.append(StepRecord(target, False, max(len(exc.trace) - 1, 0),
                                        exc.trace, exc.reason))
            dmu /= 2.0
            log.debug("mu=%.6g failed (%s); step cut to %.3g", target, exc.reason, dmu)
            if dmu < mu_min_step:
                out.message = f"homotopy stalled at mu={mu:.6g}"
                return out
            continue
        out.steps.append(StepRecord(target, True, res.iterations, res.trace))
        out.state = res.state
        mu = target
        out.mu_trace.append(mu)
        dmu = mu if stepping == "jump" else min(2.0 * dmu, mu)
        log.debug("mu=%.6g converged in %d iterations", mu, res.iterations)
    out.converged = True
    out.message = "converged"
    return out


def max_vm_deviation(a: SplitState, b: SplitState) -> float:
    return float(np.max(np.abs(a.vm - b.vm))) if len(a.v_real) else 0.0


def build_report(case: NetworkCase, method: str, circuit: SplitCircuit, *, converged: bool,
                 message: str, state: SplitState, steps: list[StepRecord],
                 mu_trace: list[float], initial_deviation_vm: float | None,
                 options: dict, started: float, notes=()) -> SolveReport:
    return SolveReport(
        case=case.name,
        method=method,
        converged=converged,
        message=message,
        total_iterations=sum(s.iterations for s in steps),
        mu_trace=[float(m) for m in mu_trace],
        steps=steps,
        initial_deviation_vm=initial_deviation_vm,
        bus_ids=[int(b) for b in circuit.bus_ids],
        vm=state.vm.tolist(),
        va=state.va.tolist(),
        q_gen=state.q_gen.tolist(),
        options=options,
        notes=list(notes),
        timing={"wall_time_ms": (time.perf_counter() - started) * 1e3},
    )


def solve_nr(case: NetworkCase, options: NrOptions = NrOptions(), start: str = "flat",
             notes=()) -> SolveReport:
    """Plain limited Newton from a flat (1 at 0 rad) or case-provided start."""
    started = time.perf_counter()
    circuit = SplitCircuit(case)
    if start == "flat":
        initial = circuit.flat_state()
    elif start == "case":
        initial = circuit.case_state()
    else:
        raise ValueError("start must be 'flat' or 'case'")
    try:
        res = nr_solve(circuit, initial, None, options)
        step = StepRecord(0.0, True, res.iterations, res.trace)
        state, converged, message = res.state, True, "converged"
    except NrDiverged as exc:
        step = StepRecord(0.0, False, max(len(exc.trace) - 1, 0), exc.trace, exc.reason)
        state, converged, message = exc.state or initial, False, str(exc)
    return build_report(case, "nr_flat", circuit, converged=converged, message=message,
                        state=state, steps=[step], mu_trace=[0.0] if converged else [],
                        initial_deviation_vm=None,
                        options={"nr": asdict(options), "start": start},
                        started=started, notes=notes)
