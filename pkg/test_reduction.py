#!/usr/bin/env python3

import numpy as np
import pytest

from coag_op import TestFunction, build_pair_table, weak_form
from diagnostics import stationarity_residual
from evolution import EvolveParams, solve_through_reduction
from grid import build_geometric, moment
from kernels import product_power
from sources import SourceSpec

UNIT = SourceSpec("indicator", c=1.0, a=1.0, b=2.0)
PRODUCT = product_power(-0.5, 0.25, 1.0)


@pytest.fixture(scope="module")
def reduced():
    grid = build_geometric(1e-2, 1e4, 6)
    return grid, solve_through_reduction(PRODUCT, [0.1, 0.01, 0.001, 0.0001], UNIT, grid, EvolveParams(delta=0.1))


def test_reduced_family_is_solved(reduced):
    grid, result = reduced
    assert result.reduction.theta == pytest.approx(-0.25)
    assert result.family.complete
    assert len(result.original) == len(result.family.entries) == 4
    for entry, f in zip(result.family.entries, result.original):
        np.testing.assert_allclose(f.values, grid.pivots ** 0.25 * entry.phi.values, rtol=1e-15)
        assert np.all(f.values >= 0.0)


def test_weak_forms_coincide(reduced):
    grid, result = reduced
    original = build_pair_table(PRODUCT, grid)
    reduced_table = result.family.last.problem.table
    theta = TestFunction("min(x,10)", lambda x: np.minimum(x, 10.0))
    for entry, f in zip(result.family.entries, result.original):
        a = weak_form(reduced_table, grid, entry.phi.values, theta)
        b = weak_form(original, grid, f.values, theta)
        assert a == pytest.approx(b, rel=1e-12)


def test_back_transformed_state_solves_the_undamped_equation_up_to_efflux(reduced):
    grid, result = reduced
    original = build_pair_table(PRODUCT, grid)
    for entry, f in zip(result.family.entries, result.original):
        source_rates = entry.problem.source_rates
        one = stationarity_residual(original, grid, f.values, source_rates, 0.0,
                                    [TestFunction("one", lambda x: np.ones_like(x))])[0]
        efflux = 2.0 * entry.delta * moment(grid, entry.phi.values, 0.0) / moment(grid, source_rates, 0.0)
        assert one.value == pytest.approx(efflux, rel=1e-3, abs=1e-6)
    assert result.family.last.delta == 0.0001
    assert one.value <= 1e-3


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
