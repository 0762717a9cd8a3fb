"""Tx-stepping baseline: homotopy embedded in the network branches.

At ``mu = 1`` every series admittance is multiplied by ``Y + 1`` and all
taps and phase shifts are normalized, which ties the whole grid to the slack
voltage.  ``mu`` is then stepped to 0 with the same schedule as G-min.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

from .driver import build_report, max_vm_deviation, step_mu
from .ecf_engine import NrDiverged, NrOptions, SplitCircuit, nr_solve
from .network_model import NetworkCase
from .report import StepRecord


@dataclass(frozen=True)
class TxOptions:
    y_factor: float = 100.0
    nr: NrOptions = NrOptions()
    mu_min_step: float = 1e-4
    max_homotopy_steps: int = 100
    stepping: str = "jump"
    # Also shrink line charging by (1 - mu); off by default.
    scale_charging: bool = False
    # Reactive power scales with the branch admittances, so the Q step limit
    # is scaled by the same mu * Y + 1 factor (equal to nr's limit at mu=0).
    scale_q_limit: bool = True

    def __post_init__(self):
        if not self.y_factor > 0:
            raise ValueError("y_factor must be positive")
        if not (self.mu_min_step > 0 and self.max_homotopy_steps > 0):
            raise ValueError("mu_min_step and max_homotopy_steps must be positive")


def tx_modified_case(case: NetworkCase, mu: float, y_factor: float = 100.0,
                     scale_charging: bool = False) -> NetworkCase:
    """Case with the homotopy factor embedded in every in-service branch.

    Series admittance times ``mu * y_factor + 1``, tap ``t + (1 - t) mu``,
    phase shift ``(1 - mu) shift``.  Loads, generators and bus shunts are
    untouched.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    if mu == 0.0:
        return case
    scale = mu * y_factor + 1.0
    branches = []
    for br in case.branches:
        if not br.status:
            branches.append(br)
            continue
        branches.append(replace(
            br,
            r=br.r / scale,
            x=br.x / scale,
            tap=br.tap + (1.0 - br.tap) * mu,
            shift=(1.0 - mu) * br.shift,
            b_charging=(1.0 - mu) * br.b_charging if scale_charging else br.b_charging,
        ))
    return case.with_updates(branches=tuple(branches))


def tx_solve(case: NetworkCase, options: TxOptions = TxOptions(), notes=()):
    started = time.perf_counter()
    nr = options.nr

    def circuit_at(mu):
        return SplitCircuit(tx_modified_case(case, mu, options.y_factor, options.scale_charging))

    def nr_at(mu):
        if not options.scale_q_limit:
            return nr
        return replace(nr, q_step_limit=nr.q_step_limit * (mu * options.y_factor + 1.0))

    shorted = circuit_at(1.0)
    base = SplitCircuit(case)
    try:
        first = nr_solve(shorted, shorted.flat_state(), None, nr_at(1.0))
    except NrDiverged as exc:
        step = StepRecord(1.0, False, max(len(exc.trace) - 1, 0), exc.trace, exc.reason)
        return build_report(case, "tx", base, converged=False,
                            message=f"shorted (mu=1) problem failed: {exc}",
                            state=exc.state or shorted.flat_state(), steps=[step], mu_trace=[],
                            initial_deviation_vm=None, options=asdict(options),
                            started=started, notes=notes)
    first_step = StepRecord(1.0, True, first.iterations, first.trace)

    def solve_at(mu, start):
        return nr_solve(base if mu == 0.0 else circuit_at(mu), start, None, nr_at(mu))

    outcome = step_mu(solve_at, first.state, mu_min_step=options.mu_min_step,
                      max_steps=options.max_homotopy_steps, stepping=options.stepping)
    deviation = max_vm_deviation(first.state, outcome.state) if outcome.converged else None
    return build_report(
        case, "tx", base, converged=outcome.converged, message=outcome.message,
        state=outcome.state, steps=[first_step] + outcome.steps, mu_trace=outcome.mu_trace,
        initial_deviation_vm=deviation, options=asdict(options), started=started, notes=notes)
