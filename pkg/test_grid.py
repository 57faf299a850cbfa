#!/usr/bin/env python3

import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from coag_errors import DomainError
from grid import (
    Grid,
    SizeDistribution,
    build_from_pivots,
    build_geometric,
    from_edges,
    moment,
    truncated_negative_moment,
)


def test_build_geometric_counts_and_covers_range():
    grid = build_geometric(1e-3, 1e6, 16)
    assert grid.size == 144
    assert grid.x_min == pytest.approx(1e-3)
    assert grid.x_max >= 1e6 * (1 - 1e-12)
    assert grid.ratio == pytest.approx(10 ** (1 / 16), rel=1e-12)
    assert grid.bins_per_decade == pytest.approx(16.0, rel=1e-9)


def test_pivots_are_log_midpoints():
    grid = build_geometric(1.0, 100.0, 2)
    np.testing.assert_allclose(grid.pivots, np.sqrt(grid.edges[:-1] * grid.edges[1:]))
    np.testing.assert_allclose(grid.widths, np.diff(grid.edges))
    assert np.all(grid.pivots > grid.edges[:-1]) and np.all(grid.pivots < grid.edges[1:])


def test_grid_arrays_are_read_only():
    grid = build_geometric(1.0, 10.0, 4)
    with pytest.raises(ValueError):
        grid.pivots[0] = 3.0


@pytest.mark.parametrize("x_min,x_max,bpd", [(0.0, 1.0, 4), (2.0, 1.0, 4), (1.0, 10.0, 0), (1.0, 10.0, 2.5)])
def test_build_geometric_rejects_bad_ranges(x_min, x_max, bpd):
    with pytest.raises(DomainError):
        build_geometric(x_min, x_max, bpd)


def test_from_edges_requires_constant_ratio():
    with pytest.raises(DomainError):
        from_edges([1.0, 2.0, 3.0])
    with pytest.raises(DomainError):
        from_edges([1.0, 2.0, 4.0 * (1.0 + 1e-11)])
    assert from_edges([1.0, 2.0, 4.0 * (1.0 + 1e-14)]).size == 2
    with pytest.raises(DomainError):
        Grid(np.array([1.0]))


def test_build_from_pivots():
    grid = build_from_pivots(2.0, 4.0, 3)
    np.testing.assert_allclose(grid.pivots, [2.0, 8.0, 32.0])


def test_index_of_and_mask():
    grid = build_geometric(1.0, 1000.0, 1)
    assert grid.index_of(5.0) == 0
    assert grid.index_of(50.0) == 1
    assert grid.index_of(1e9) == grid.size - 1
    assert grid.mask_at_least(10.0).tolist() == [False, True, True]


def test_moment_of_single_bin():
    grid = build_geometric(1.0, 100.0, 1)
    phi = np.array([0.0, 2.0])
    assert moment(grid, phi, 0.0) == pytest.approx(2.0 * 90.0)
    assert moment(grid, phi, 1.0) == pytest.approx(2.0 * 90.0 * math.sqrt(1000.0))


def test_moment_rejects_misaligned():
    grid = build_geometric(1.0, 100.0, 1)
    with pytest.raises(DomainError):
        moment(grid, np.ones(3), 0.0)


def test_size_distribution_validation():
    grid = build_geometric(1.0, 100.0, 1)
    assert SizeDistribution.zeros(grid).check(grid).values.tolist() == [0.0, 0.0]
    with pytest.raises(DomainError):
        SizeDistribution(np.array([1.0, -1.0]))
    with pytest.raises(DomainError):
        SizeDistribution(np.array([np.nan]))
    with pytest.raises(DomainError):
        SizeDistribution(np.ones(3)).check(grid)


def test_negative_moment_is_marked_truncated():
    grid = build_geometric(1e-2, 1e2, 4)
    out = truncated_negative_moment(grid, np.ones(grid.size), -0.5)
    assert out["truncated_at"] == pytest.approx(1e-2)
    assert out["value"] > 0.0


phis = st.lists(st.floats(0.0, 1e3, allow_nan=False), min_size=12, max_size=12)


@given(phis, phis, st.floats(-1.0, 2.0), st.floats(0.0, 10.0))
@settings(max_examples=100, deadline=None)
def test_moment_is_linear(a, b, m, c):
    grid = build_geometric(1e-2, 1e4, 2)
    a, b = np.array(a), np.array(b)
    expected = c * moment(grid, a, m) + moment(grid, b, m)
    assert moment(grid, c * a + b, m) == pytest.approx(expected, rel=1e-12, abs=1e-300)


@given(phis, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_moments_above_one_grow_with_order(values, m1, dm):
    grid = build_geometric(1.0, 1e6, 2)
    phi = np.array(values)
    assert moment(grid, phi, m1 + dm) >= moment(grid, phi, m1) * (1 - 1e-12)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
