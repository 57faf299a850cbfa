"""Property suites behind ``coag_cli.py verify``.

Each suite returns a plain dict with a ``pass`` entry. Nothing in the output
depends on timing or on the worker count, so two runs with the same seed
serialize to the same bytes.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Dict

import numpy as np

from coag_op import TestFunction, apply, build_pair_table, weak_identity_gap
from diagnostics import algebraic_checks, apriori_bounds, b3_check, kappa, sub_additivity_gap
from evolution import step
from grid import build_geometric
from kernels import evaluate, product_power, sum_power, verify_hypotheses
from sources import SourceSpec, bin_averages, crude_mass_bound

logger = logging.getLogger(__name__)

SUITES = ("inequalities", "operator", "bounds", "all")
ALGEBRAIC_SAMPLES = 1_000_000
DOUBLE_SUM_SAMPLES = 1000
WEAK_IDENTITY_THETAS = 20
OPERATOR_RTOL = 1e-10
ORACLE_RTOL = 1e-12


def _double_sum_oracle(x, gdx, theta: float, m: float) -> float:
    """Scalar double loop for sum_ij [x^m + y^m - (x+y)^m] (xy)^theta g_i g_j dx_i dx_j."""
    total = 0.0
    for i in range(len(x)):
        for j in range(len(x)):
            chi = x[i] ** m + x[j] ** m - (x[i] + x[j]) ** m
            total += chi * (x[i] * x[j]) ** theta * gdx[i] * gdx[j]
    return total


def inequality_suite(seed: int) -> dict:
    algebraic = algebraic_checks(ALGEBRAIC_SAMPLES, seed)

    rng = np.random.default_rng(seed + 1)
    grid = build_geometric(1.0, 1e4, 4)
    mask = grid.mask_at_least(1.0)
    x = grid.pivots[mask]
    dx = grid.widths[mask]
    worst_ratio = 0.0
    worst_oracle = 0.0
    failures = 0
    for _ in range(DOUBLE_SUM_SAMPLES):
        theta = rng.uniform(0.0, 0.5)
        m = rng.uniform(0.05, 0.95)
        sigma = rng.uniform(0.0, 0.95) * (m + 2.0 * theta) / 2.0
        g = rng.random(grid.size) * (rng.random(grid.size) < 0.7)
        report = b3_check(grid, g, theta, m, sigma)
        worst_ratio = max(worst_ratio, report.ratio)
        failures += int(not report.passed)
        oracle = 0.5 * kappa(theta, m, sigma) * _double_sum_oracle(list(x), list(g[mask] * dx), theta, m)
        if oracle > 0.0:
            worst_oracle = max(worst_oracle, abs(report.rhs - oracle) / oracle)

    double_sum = {"samples": DOUBLE_SUM_SAMPLES, "worst_ratio": worst_ratio, "failures": failures,
                  "worst_oracle_mismatch": worst_oracle,
                  "pass": failures == 0 and worst_oracle <= ORACLE_RTOL}
    return {"algebraic": algebraic.to_dict(), "double_sum": double_sum,
            "pass": algebraic.passed and double_sum["pass"]}


def _operator_cases():
    return (
        ("constant", sum_power(0.0, 1.0)),
        ("sum_0.5", sum_power(0.5, 1.0)),
        ("blended_0.3", sum_power(0.3, 0.8, 1.2)),
        ("sum_1.5", sum_power(1.5, 1.0)),
        ("product", product_power(-0.5, 0.25, 1.0)),
    )


def operator_suite(seed: int) -> dict:
    """Mass bookkeeping, weak identity, positivity and symmetry of the discrete operator."""
    rng = np.random.default_rng(seed + 2)
    grid = build_geometric(1e-2, 1e3, 6)
    cases = {}
    ok = True
    for name, kernel in _operator_cases():
        table = build_pair_table(kernel, grid)
        phi = rng.random(grid.size) * np.power(grid.pivots, -1.5)
        rates = apply(table, grid, phi)

        moved = float(np.sum(grid.pivots * (rates.gain + rates.loss) * grid.widths))
        mass = float(np.sum(grid.pivots * rates.dphi * grid.widths)) + rates.overflow_mass
        mass_gap = abs(mass) / moved

        worst_weak = 0.0
        for k in range(WEAK_IDENTITY_THETAS):
            values = rng.uniform(-1.0, 1.0, grid.size)
            if k % 2:
                # arbitrary symmetric values beyond the domain
                over = rng.uniform(-1.0, 1.0, table.rates.shape)
                over = 0.5 * (over + over.T)
                gap = weak_identity_gap(table, grid, phi, values, over)
            else:
                theta = TestFunction(f"random_{k}", lambda x, v=values: v)
                gap = weak_identity_gap(table, grid, phi, theta)
            worst_weak = max(worst_weak, abs(gap["lhs"] - gap["rhs"]) / gap["scale"])

        source = bin_averages(SourceSpec("indicator", c=1.0, a=1.0, b=2.0), grid)
        positive = all(
            bool(np.all(step(table, grid, source, phi, dt, 1e-2).values >= 0.0))
            for dt in (1e-3, 1.0, 1e6)
        )
        xs = np.power(10.0, rng.uniform(-3.0, 3.0, 200))
        ys = np.power(10.0, rng.uniform(-3.0, 3.0, 200))
        symmetric = bool(np.array_equal(evaluate(kernel, xs, ys), evaluate(kernel, ys, xs)))

        passed = mass_gap <= OPERATOR_RTOL and worst_weak <= OPERATOR_RTOL and positive and symmetric
        cases[name] = {"mass_gap": mass_gap, "worst_weak_identity_gap": worst_weak,
                       "positive": positive, "symmetric": symmetric, "pass": passed}
        ok = ok and passed
    return {"cases": cases, "pass": ok}


def bounds_suite(seed: int) -> dict:
    """Closed-form constants, kernel hypotheses and the crude mass bound."""
    checks: Dict[str, dict] = {}

    k_a = kappa(0.0, 0.5, 0.0)
    k_b = kappa(0.5, 0.5, 0.0)
    expected_a = math.sqrt(2.0) * math.pi ** 2 / 1.5 * 64.0
    expected_b = math.sqrt(2.0) * math.pi ** 2 / 1.5 * 4.0
    checks["kappa"] = {"k_0_half_0": k_a, "k_half_half_0": k_b,
                       "pass": math.isclose(k_a, expected_a, rel_tol=1e-12)
                       and math.isclose(k_b, expected_b, rel_tol=1e-12) and k_b < k_a}

    constants = []
    ok = True
    unit = SourceSpec("indicator", c=1.0, a=1.0, b=2.0)
    for lam, k1, k2 in ((0.0, 1.0, 1.0), (0.3, 0.8, 1.2), (0.5, 1.0, 1.0), (0.7, 1.0, 2.0), (0.95, 1.0, 1.0)):
        c = apriori_bounds(sum_power(lam, k1, k2), unit)
        z0 = c.z0
        ordered = c.C4 < z0 < c.C1 and c.z_delta(0.1) < z0
        constants.append({"lambda": lam, "k1": k1, "k2": k2, "C1": c.C1, "C4": c.C4,
                          "z_delta0": z0, "C3": c.C3, "pass": ordered})
        ok = ok and ordered
    checks["constants"] = {"cases": constants, "pass": ok}

    hypotheses = {}
    ok = True
    for name, kernel in _operator_cases():
        report = verify_hypotheses(kernel, 10_000, seed)
        hypotheses[name] = report.to_dict()
        ok = ok and report.passed
    checks["hypotheses"] = {"cases": hypotheses, "pass": ok}

    crude = [crude_mass_bound(SourceSpec("power_expcut", c=1.0, p=0.5, x_c=10.0), d, 0.5)
             for d in (0.5, 0.1, 0.01)]
    checks["crude_mass"] = {"cases": crude, "pass": all(c["pass"] for c in crude)}

    # the symmetric point gives equality in the lower algebraic bound
    gap = float(sub_additivity_gap(1.0, 1.0, 0.5))
    checks["symmetric_point"] = {"value": gap, "pass": math.isclose(gap, 2.0 - math.sqrt(2.0), rel_tol=1e-14)}

    return {"checks": checks, "pass": all(c["pass"] for c in checks.values())}


SUITE_RUNNERS: Dict[str, Callable[[int], dict]] = {
    "inequalities": inequality_suite,
    "operator": operator_suite,
    "bounds": bounds_suite,
}


def run_suite(name: str, seed: int) -> dict:
    """Run one suite (or ``all``) and return the verify.json payload."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}")
    names = list(SUITE_RUNNERS) if name == "all" else [name]
    results = {}
    for suite in names:
        logger.info("running %s suite (seed %d)", suite, seed)
        results[suite] = SUITE_RUNNERS[suite](seed)
    return {"suite": name, "seed": seed, "results": results,
            "pass": all(r["pass"] for r in results.values())}
