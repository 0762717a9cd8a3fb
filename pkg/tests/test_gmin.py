import json

import numpy as np
import pytest

from gridmin.case_io import write_report
from gridmin.dc_power_flow import solve_dc
from gridmin.driver import step_mu
from gridmin.ecf_engine import NrDiverged, NrResult, SplitState, residual
from gridmin.gmin_homotopy import (
    GminOptions, base_voltages, gmin_solve, relaxed_state, stage_one,
)
from gridmin.report import IterationRecord

from conftest import four_bus_remote, polar_power_flow, reference, standard_case, two_bus


@pytest.mark.parametrize("case_fn", [lambda: standard_case("case57"), four_bus_remote])
def test_relaxed_solution_pins_regulated_voltages(case_fn):
    case = case_fn()
    circuit, dc, relaxed, _ = stage_one(case)
    c = circuit.pv_ctrl
    v = relaxed.v_real + 1j * relaxed.v_imag
    np.testing.assert_allclose(np.abs(v[c]), circuit.pv_v, rtol=1e-13)
    np.testing.assert_allclose(np.angle(v[c]), dc.theta[c], atol=1e-13)
    s = circuit.slack
    assert abs(v[s]) == pytest.approx(circuit.slack_v, rel=1e-14)


@pytest.mark.parametrize("case_fn", [lambda: standard_case("case30"), four_bus_remote])
def test_homotopy_admittances_close_the_power_gap(case_fn):
    circuit, _, relaxed, adm = stage_one(case_fn())
    v = relaxed.v_real + 1j * relaxed.v_imag
    # Generator side: the source's delivered power minus the schedule,
    # computed from complex phasors.
    i_src = relaxed.pv_i_real + 1j * relaxed.pv_i_imag
    s_src = v[circuit.pv_bus] * np.conj(i_src)
    np.testing.assert_allclose(adm.g_pv * np.abs(v[circuit.pv_bus]) ** 2,
                               s_src.real - circuit.pv_p, rtol=1e-10, atol=1e-12)
    # Demand side: base plus homotopy admittance draws exactly the schedule.
    lb = adm.load_bus
    y_total = (adm.g_pq_base + adm.g_pq) + 1j * (adm.b_pq_base + adm.b_pq)
    s_drawn = np.abs(v[lb]) ** 2 * np.conj(y_total)
    np.testing.assert_allclose(s_drawn.real, circuit.p_dem[lb], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(s_drawn.imag, circuit.q_dem[lb], rtol=1e-12, atol=1e-14)


def test_base_voltages():
    circuit, *_ = stage_one(four_bus_remote())
    np.testing.assert_array_equal(base_voltages(circuit), [1.03, 1.0, 1.02, 1.0])


@pytest.mark.parametrize("case_fn", [lambda: standard_case("case9"), four_bus_remote])
def test_substitution_certificate(case_fn):
    circuit, _, relaxed, adm = stage_one(case_fn())
    res = residual(circuit, relaxed_state(relaxed), adm.installed(circuit.n_bus))
    assert res.norm() <= 1e-8
    # With the opposite sign the relaxed point is not a solution.
    flipped = adm.scaled(-1.0).installed(circuit.n_bus)
    assert residual(circuit, relaxed_state(relaxed), flipped).norm() > 1e-3


def test_mu_zero_is_bit_identical_to_target_problem():
    case = standard_case("case118")
    circuit, _, relaxed, adm = stage_one(case)
    state = relaxed_state(relaxed)
    at_zero = residual(circuit, state, adm.scaled(0.0).installed(circuit.n_bus)).vector()
    plain = residual(circuit, state).vector()
    assert at_zero.tobytes() == plain.tobytes()


@pytest.mark.parametrize("name", ["case14", "case118"])
def test_gmin_matches_reference(name):
    report = gmin_solve(standard_case(name))
    ref = reference(name)
    assert report.converged and report.method == "gmin"
    assert report.mu_trace[0] == 1.0 and report.mu_trace[-1] == 0.0
    assert all(a > b for a, b in zip(report.mu_trace, report.mu_trace[1:]))
    np.testing.assert_allclose(report.vm, ref["vm"], atol=1e-6)
    np.testing.assert_allclose(report.va, ref["va_rad"], atol=1e-6)
    assert report.steps[0].iterations == 0
    assert report.total_iterations == sum(s.iterations for s in report.steps)


def test_remote_control_against_polar_oracle():
    case = four_bus_remote()
    report = gmin_solve(case, GminOptions())
    vm, va = polar_power_flow(case, {3: 1.02})
    assert report.converged
    np.testing.assert_allclose(report.vm, vm, atol=1e-6)
    np.testing.assert_allclose(report.va, va, atol=1e-6)
    assert report.vm[2] == pytest.approx(1.02, abs=1e-6)


def test_relaxed_q_seed_clamp_skips_certificate():
    report = gmin_solve(standard_case("case9"), GminOptions(q_seed_clamp=0.0))
    assert report.converged


def test_infeasible_two_bus_reports_failure():
    report = gmin_solve(two_bus(p_load=6.0, x=0.1))
    assert not report.converged
    assert "stalled" in report.message or "limit" in report.message
    assert report.initial_deviation_vm is None


def test_deterministic_report():
    a = json.loads(write_report(gmin_solve(standard_case("case30")), "json"))
    b = json.loads(write_report(gmin_solve(standard_case("case30")), "json"))
    a.pop("timing"), b.pop("timing")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_dc_angles_feed_stage_one():
    case = standard_case("case14")
    _, dc, _, _ = stage_one(case)
    np.testing.assert_array_equal(dc.theta, solve_dc(case).theta)


# -- homotopy driver --------------------------------------------------------------

class FakeSolver:
    """Stands in for a Newton solve: ``ok(mu, target)`` decides success."""

    def __init__(self, ok):
        self.ok = ok
        self.mu = 1.0
        self.calls = []

    def __call__(self, target, start):
        self.calls.append(target)
        trace = [IterationRecord(0, 1.0), IterationRecord(1, 0.0)]
        if not self.ok(self.mu, target):
            raise NrDiverged("max_iter", "nope", trace + [IterationRecord(2, 5.0)], start)
        self.mu = target
        return NrResult(start, trace)


START = SplitState(np.ones(1), np.zeros(1), np.zeros(0))


def test_driver_halves_then_resets_to_direct_jump():
    fake = FakeSolver(lambda mu, target: target >= 0.4 or mu <= 0.6)
    out = step_mu(fake, START, mu_min_step=1e-4, max_steps=100)
    assert out.converged and out.message == "converged"
    assert fake.calls == [0.0, 0.5, 0.0]
    assert out.mu_trace == [1.0, 0.5, 0.0]
    assert [s.converged for s in out.steps] == [False, True, True]
    assert [s.iterations for s in out.steps] == [2, 1, 1]


def test_driver_stalls_below_min_step():
    fake = FakeSolver(lambda mu, target: False)
    out = step_mu(fake, START, mu_min_step=0.1, max_steps=100)
    assert not out.converged
    assert fake.calls == [0.0, 0.5, 0.75, 0.875]
    assert out.message == "homotopy stalled at mu=1"


def test_driver_step_limit():
    fake = FakeSolver(lambda mu, target: mu - target <= 0.3)
    out = step_mu(fake, START, mu_min_step=1e-6, max_steps=4)
    assert not out.converged and "step limit 4" in out.message
    assert len(out.steps) == 4


def test_driver_doubling_mode():
    fake = FakeSolver(lambda mu, target: mu - target <= 0.3)
    out = step_mu(fake, START, mu_min_step=1e-6, max_steps=100, stepping="double")
    assert out.converged
    # After each success the step doubles (0.25 -> 0.5), fails, and is halved again.
    assert fake.calls == [0.0, 0.5, 0.75, 0.25, 0.5, 0.0, 0.25, 0.0]
    assert out.mu_trace == [1.0, 0.75, 0.5, 0.25, 0.0]
    with pytest.raises(ValueError):
        step_mu(fake, START, mu_min_step=1e-6, max_steps=10, stepping="bogus")


def test_options_validation():
    with pytest.raises(ValueError):
        GminOptions(mu_min_step=0)
