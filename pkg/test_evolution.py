#!/usr/bin/env python3

from pathlib import Path

import numpy as np
import pytest

from coag_config import load_config
from coag_errors import DomainError
from coag_op import DiscreteProblem, build_pair_table
from diagnostics import DiagnosticSettings, apriori_bounds
from evolution import (
    EXISTS,
    INCONCLUSIVE,
    NONEXISTENT,
    EvolveParams,
    ProbeSettings,
    check_deltas,
    classify_ladder,
    delta_continuation,
    evolve_to_steady,
    integrability_probe,
    nonexistence_probe,
    step,
)
from grid import build_geometric, moment
from kernels import SumPowerKernel, sum_power
from sources import SourceSpec, bin_averages, source_moment, zero_source

UNIT = SourceSpec("indicator", c=1.0, a=1.0, b=2.0)
CONFIGS = Path(__file__).parent / "configs"


def _no_coagulation():
    return SumPowerKernel(lam=0.0, k1=1.0, k2=1.0, shape="custom",
                          rate_fn=lambda x, y: np.zeros(np.broadcast(x, y).shape))


@pytest.fixture(scope="module")
def constant_family():
    grid = build_geometric(1e-2, 1e5, 6)
    return delta_continuation([0.1, 0.01, 0.001], sum_power(0.0, 1.0), UNIT, grid, EvolveParams(delta=0.1))


def test_empty_system_is_a_fixed_point():
    grid = build_geometric(1e-2, 1e2, 4)
    table = build_pair_table(sum_power(0.5, 1.0), grid)
    out = step(table, grid, zero_source(), np.zeros(grid.size), 1.0, 0.1)
    assert np.all(out.values == 0.0)


@pytest.mark.parametrize("dt", [1e-6, 1e-2, 1.0, 1e3, 1e9])
def test_step_keeps_densities_non_negative(dt):
    grid = build_geometric(1e-2, 1e3, 6)
    table = build_pair_table(sum_power(0.7, 1.0, 2.0), grid)
    phi = np.random.default_rng(0).random(grid.size) * 10.0
    out = step(table, grid, UNIT.truncated(0.1), phi, dt, 0.1)
    assert np.all(out.values >= 0.0)


def test_step_rejects_non_positive_dt():
    grid = build_geometric(1e-2, 1e2, 4)
    table = build_pair_table(sum_power(0.0, 1.0), grid)
    with pytest.raises(DomainError):
        step(table, grid, UNIT, np.zeros(grid.size), 0.0, 0.1)


def test_linear_relaxation_without_coagulation():
    grid = build_geometric(1.0, 2.0, 1)
    table = build_pair_table(_no_coagulation(), grid)
    source = bin_averages(UNIT.truncated(0.1), grid)
    phi = np.zeros(grid.size)
    first = step(table, grid, source, phi, 2.0, 0.1).values
    np.testing.assert_allclose(first, 2.0 * source / (1.0 + 0.4))
    for _ in range(200):
        phi = step(table, grid, source, phi, 10.0, 0.1).values
    np.testing.assert_allclose(phi, source / 0.2, rtol=1e-12)


def test_fixed_point_converges_immediately():
    grid = build_geometric(1e-1, 1e2, 4)
    problem = DiscreteProblem.build(_no_coagulation(), UNIT, grid, 0.1)
    init = problem.source_rates / 0.2
    result = evolve_to_steady(EvolveParams(delta=0.1), problem, init)
    assert result.converged
    assert result.steps <= 2
    phi, record, converged = result
    assert converged and len(record) >= 1


def test_max_steps_is_not_an_error():
    grid = build_geometric(1e-2, 1e3, 4)
    problem = DiscreteProblem.build(sum_power(0.0, 1.0), UNIT, grid, 0.01)
    result = evolve_to_steady(EvolveParams(delta=0.01, max_steps=5), problem)
    assert not result.converged
    assert result.steps == 5
    assert len(result.record) == 6 - result.rejected


def test_problem_is_rebuilt_for_the_requested_delta():
    grid = build_geometric(1e-1, 1e2, 4)
    problem = DiscreteProblem.build(_no_coagulation(), UNIT, grid, 0.5)
    result = evolve_to_steady(EvolveParams(delta=0.1, max_steps=3), problem)
    assert result.steps == 3


def test_evolve_params_validation():
    with pytest.raises(DomainError):
        EvolveParams(delta=0.0)
    with pytest.raises(DomainError):
        EvolveParams(delta=0.1, steady_tol=0.0)
    with pytest.raises(DomainError):
        EvolveParams(delta=0.1, dt_init=10.0, dt_max=1.0)


def test_check_deltas():
    assert check_deltas([0.1, 0.01]) == [0.1, 0.01]
    for bad in ([], [0.01, 0.1], [0.1, 0.1], [1.5], [0.1, 0.0]):
        with pytest.raises(DomainError):
            check_deltas(bad)


def test_constant_kernel_family(constant_family):
    assert constant_family.complete
    assert constant_family.deltas == [0.1, 0.01, 0.001]
    m0 = [moment(e.problem.grid, e.phi.values, 0.0) for e in constant_family.entries]
    assert m0[0] < m0[1] < m0[2]
    assert m0[-1] == pytest.approx(1.0, abs=0.02)


def test_constant_kernel_family_reports(constant_family):
    for entry in constant_family.entries:
        report = entry.report
        assert report.converged
        assert report.d2a.identity_gap <= 1e-6
        assert report.d2a.r_lo <= 1.0 + 1e-6
        assert report.d2a.passed and report.d2b.passed
        assert all(r.value <= 1e-4 for r in report.residuals)
        assert report.trajectory.number_balance_pass
        assert report.trajectory.ceiling_pass
    final = constant_family.last.report
    assert final.d2a.passed
    assert final.d2b.sandwich_pass
    assert final.trajectory.passed


def test_step_size_recovers_on_a_stiff_kernel():
    # unequal sandwich constants and a heavy source tail made the step ratchet down to its floor
    grid = build_geometric(1e-3, 1e5, 8)
    source = SourceSpec("power_bump", c=1.0, a=1.0, b=4.0, p=0.5)
    family = delta_continuation([0.1, 0.01], sum_power(0.7, 1.0, 2.0), source, grid, EvolveParams(delta=0.1))
    assert family.complete
    assert all(e.result.converged for e in family.entries)
    assert family.last.report.d2a.passed


@pytest.mark.parametrize("lam,k1,k2", [(0.3, 0.8, 1.2), (0.7, 1.0, 2.0)])
def test_number_sandwich_at_small_delta(lam, k1, k2):
    grid = build_geometric(1e-3, 1e5, 8)
    family = delta_continuation([0.1, 0.01, 0.001], sum_power(lam, k1, k2), UNIT, grid, EvolveParams(delta=0.1))
    assert family.complete
    final = family.last.report
    assert final.delta == 0.001
    assert final.d2a.tol == 0.02
    assert final.d2a.r_lo <= 1.02 and final.d2a.r_hi >= 0.98
    assert final.d2a.passed and final.d2b.passed


@pytest.mark.parametrize("lam", [0.0, 0.5])
def test_tail_slope_of_steady_states(lam):
    grid = build_geometric(1e-3, 1e8, 32)
    settings = DiagnosticSettings(checks=("tail",))
    family = delta_continuation([0.1, 0.01, 0.001, 0.0001], sum_power(lam, 1.0), UNIT, grid,
                                EvolveParams(delta=0.1), settings)
    final = family.last.report
    assert final.converged
    assert final.tail is not None and final.tail.points >= 8
    assert final.tail.slope == pytest.approx(-(3.0 + lam) / 2.0, abs=0.1)
    assert final.failures() == []


def test_moments_stay_inside_apriori_bounds(constant_family):
    constants = apriori_bounds(sum_power(0.0, 1.0), UNIT)
    for entry in constant_family.entries[1:]:
        mlam = moment(entry.problem.grid, entry.phi.values, 0.0)
        assert constants.C4 <= mlam <= constants.C1


def test_trajectory_moments_are_finite_and_non_negative(constant_family):
    record = constant_family.last.result.record
    for series in (record.M0, record.Mlambda, record.M1, record.M1plambda):
        values = np.asarray(series)
        assert np.all(np.isfinite(values)) and np.all(values >= 0.0)


def test_continuation_is_deterministic():
    grid = build_geometric(1e-2, 1e3, 4)
    kernel = sum_power(0.5, 1.0)
    a = delta_continuation([0.2, 0.05], kernel, UNIT, grid, EvolveParams(delta=0.2))
    b = delta_continuation([0.2, 0.05], kernel, UNIT, grid, EvolveParams(delta=0.2))
    for ea, eb in zip(a.entries, b.entries):
        np.testing.assert_array_equal(ea.phi.values, eb.phi.values)
        assert ea.result.steps == eb.result.steps
    assert a.to_dict() == b.to_dict()


def test_blow_up_stops_the_continuation():
    grid = build_geometric(1e-2, 1e3, 4)
    params = EvolveParams(delta=0.1, blowup_moment=1e-3)
    family = delta_continuation([0.1, 0.01], sum_power(1.5, 1.0), UNIT, grid, params)
    assert len(family.entries) == 1
    assert family.last.result.blew_up
    assert not family.complete and "blow-up" in family.flags[0]


def test_non_convergence_is_flagged():
    grid = build_geometric(1e-2, 1e3, 4)
    family = delta_continuation([0.1, 0.01], sum_power(0.0, 1.0), UNIT, grid,
                                EvolveParams(delta=0.1, max_steps=3))
    assert len(family.entries) == 1
    assert family.flags == ["not converged at delta=0.1"]
    assert not family.passed


@pytest.mark.parametrize("values,expected", [
    ([1.0, 1.02, 1.03], EXISTS),
    ([0.0, 0.0, 0.0], EXISTS),
    ([1.0, 6.0, 40.0], NONEXISTENT),
    ([1.0, 2.0, 3.0], NONEXISTENT),
    ([1.0, 2.0, 2.3], INCONCLUSIVE),
    ([3.0, 2.0, 1.0], INCONCLUSIVE),
])
def test_classify_ladder(values, expected):
    assert classify_ladder([1e3, 1e4, 1e5], values) == expected


def test_classify_ladder_needs_two_rungs():
    assert classify_ladder([1e3], [1.0]) == INCONCLUSIVE


def test_probe_control_exists():
    probe = ProbeSettings(x_maxes=(1e3, 1e4, 1e5), deltas=(0.1, 0.01), x_min=1e-2, bins_per_decade=6)
    report = nonexistence_probe(sum_power(0.0, 1.0), UNIT, probe, EvolveParams(delta=0.1))
    assert report.verdict == EXISTS
    assert report.matches_expectation
    assert [r.x_max for r in report.rungs] == [1e3, 1e4, 1e5]
    assert all(r.min_residual <= 1e-4 for r in report.rungs)


@pytest.mark.parametrize("name", ["probe_lambda_1.json", "probe_lambda_1.5.json"])
def test_shipped_superlinear_probes_find_no_steady_state(name):
    config = load_config(CONFIGS / name)
    kernel = config.build_kernel()
    report = nonexistence_probe(kernel, config.build_source(), config.probe_settings(),
                                config.evolve_params(), config.diagnostic_settings())
    assert all(r.converged or r.blew_up for r in report.rungs)
    assert report.verdict == NONEXISTENT
    assert report.matches_expectation
    values = [r.moments[f"{kernel.lam:g}"] for r in report.rungs if not r.blew_up]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_unsettled_rungs_make_the_probe_inconclusive():
    probe = ProbeSettings(x_maxes=(1e2, 1e3, 1e4), deltas=(0.1,), x_min=1e-1, bins_per_decade=4)
    report = nonexistence_probe(sum_power(1.5, 1.0), UNIT, probe, EvolveParams(delta=0.1, max_steps=3))
    assert not any(r.converged for r in report.rungs)
    assert report.verdict == INCONCLUSIVE
    assert not report.matches_expectation


def test_probe_zero_source():
    probe = ProbeSettings(x_maxes=(1e2, 1e3), deltas=(0.1,), x_min=1e-1, bins_per_decade=4)
    report = nonexistence_probe(sum_power(1.5, 1.0), zero_source(), probe, EvolveParams(delta=0.1))
    assert report.verdict == EXISTS
    assert report.zero_solution
    assert report.matches_expectation
    assert report.to_dict()["zero_solution"] is True


def test_integrability_ladder():
    report = integrability_probe(sum_power(0.0, 1.0), UNIT, [1e3, 1e4, 1e5], [0.1, 0.01, 0.001],
                                 1e-2, 6, EvolveParams(delta=0.1))
    assert report.critical_order == pytest.approx(0.5)
    assert report.saturating_order == pytest.approx(0.4)
    assert report.grows
    assert report.saturating_change < report.critical_change
    with pytest.raises(DomainError):
        integrability_probe(sum_power(1.2, 1.0), UNIT, [1e3, 1e4], [0.1], 1e-2, 4, EvolveParams(delta=0.1))


def test_source_is_injected_at_bin_average_rate():
    grid = build_geometric(1e-2, 1e3, 4)
    problem = DiscreteProblem.build(sum_power(0.0, 1.0), UNIT, grid, 0.1)
    assert float(np.sum(problem.source_rates * grid.widths)) == pytest.approx(source_moment(UNIT, 0.0))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
