"""Executable checks for stationary states and the inequalities behind them.

Every check returns a small dataclass whose verdict is a pure function of the
numbers it stores, so a saved report can be re-judged without the solver.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from coag_errors import DomainError, InapplicableError, NotSteadyError
from coag_op import DiscreteProblem, PairTable, TestFunction, overflow_term, weak_form
from grid import Grid, SizeDistribution, moment, truncated_negative_moment
from kernels import Kernel
from sources import SourceSpec, source_moment

logger = logging.getLogger(__name__)

DOUBLE_SUM_RTOL = 1e-9
INEQ_RTOL = 1e-12
MIN_TAIL_POINTS = 8


def _values(phi) -> np.ndarray:
    if isinstance(phi, SizeDistribution):
        return phi.values
    return np.asarray(phi, dtype=float)


# ---------------------------------------------------------------- constants

def kappa(theta: float, m: float, sigma: float) -> float:
    """2^(1-m) pi^2 / (3 (1-m)) * 4^((2-m) / (m + 2 theta - 2 sigma))."""
    if not (0.0 <= theta <= 0.5) or not (0.0 < m < 1.0):
        raise DomainError(f"kappa needs theta in [0, 1/2] and m in (0, 1), got theta={theta}, m={m}")
    if not (0.0 <= sigma < (m + 2.0 * theta) / 2.0):
        raise DomainError(f"kappa needs 0 <= sigma < (m + 2 theta)/2, got sigma={sigma}")
    prefactor = 2.0 ** (1.0 - m) * math.pi ** 2 / (3.0 * (1.0 - m))
    return prefactor * 4.0 ** ((2.0 - m) / (m + 2.0 * theta - 2.0 * sigma))


@dataclass(frozen=True)
class AprioriConstants:
    lam: float
    k1: float
    k2: float
    M0_S: float
    Mlam_S: float
    C1: Optional[float]
    C4: float
    C3: Optional[float]
    source: Optional[SourceSpec] = field(default=None, repr=False, compare=False)

    @property
    def applicable(self) -> bool:
        return self.lam < 1.0

    def z_delta(self, delta: float) -> Optional[float]:
        """Lower barrier for M_lam; tends to sqrt(M_lam(S) / (2^(1-lam) k2)) as delta -> 0."""
        if not self.applicable:
            return None
        lam, k2 = self.lam, self.k2
        root = math.sqrt(k2 * self.Mlam_S + 2.0 ** (1.0 + lam) * delta ** 2)
        return (root - 2.0 ** ((1.0 + lam) / 2.0) * delta) / (2.0 ** ((1.0 - lam) / 2.0) * k2)

    @property
    def z0(self) -> Optional[float]:
        return self.z_delta(0.0)

    def C2(self, m: float, mu: float) -> float:
        return kappa(self.lam / 2.0, m, mu) / (2.0 * self.k1)

    def C7(self, mu: float) -> float:
        """Bound on M_mu of the regularized stationary states, 0 < mu < (1+lam)/2."""
        if self.source is None or not self.applicable:
            raise InapplicableError("C7 needs lambda < 1 and the source")
        m = (2.0 * mu + 1.0 - self.lam) / 2.0
        if self.M0_S == 0.0:
            return 0.0
        return self.M0_S / (self.k1 * self.C4) + math.sqrt(self.C2(m, mu) * source_moment(self.source, m))

    def to_dict(self) -> dict:
        return {"C1": self.C1, "C4": self.C4, "C3": self.C3, "z_delta0": self.z0,
                "lambda": self.lam, "k1": self.k1, "k2": self.k2,
                "M0_S": self.M0_S, "Mlambda_S": self.Mlam_S}


def apriori_bounds(kernel: Kernel, source: SourceSpec) -> AprioriConstants:
    """C1, C4, C3 and the z_delta barrier from the kernel constants and the untruncated source."""
    lam = float(getattr(kernel, "lam"))
    k1, k2 = kernel.k1, kernel.k2
    full = source.truncated(None)
    m0 = source_moment(full, 0.0)
    mlam = source_moment(full, lam)
    c4 = math.sqrt(mlam / (4.0 ** (1.0 - lam) * k2))
    c1 = c3 = None
    if lam < 1.0:
        c1 = math.sqrt(2.0 * mlam / ((1.0 - 2.0 ** (lam - 1.0)) * k1))
        try:
            c3 = (2.0 * k2 * mlam) ** ((1.0 + lam) / (1.0 - lam)) * m0 / 2.0
        except OverflowError:
            c3 = math.inf
    else:
        logger.info("lambda=%g >= 1: C1, C3 and z_delta are inapplicable", lam)
    return AprioriConstants(lam=lam, k1=k1, k2=k2, M0_S=m0, Mlam_S=mlam,
                            C1=c1, C4=c4, C3=c3, source=full)


# ---------------------------------------------------------------- sandwiches

@dataclass
class SandwichReport:
    name: str
    lower: float
    value: float
    upper: float
    tol: float
    identity_gap: float
    identity_tol: float
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def sandwich_pass(self) -> bool:
        return self.lower <= self.value * (1.0 + self.tol) and self.value <= self.upper * (1.0 + self.tol)

    @property
    def passed(self) -> bool:
        return self.sandwich_pass and self.identity_gap <= self.identity_tol

    def to_dict(self) -> dict:
        out = {"lower": self.lower, "value": self.value, "upper": self.upper,
               "tol": self.tol, "identity_gap": self.identity_gap,
               "identity_tol": self.identity_tol, "pass": self.passed}
        out.update(self.extra)
        return out


@dataclass
class NumberSandwichReport:
    r_lo: float
    r_hi: float
    tol: float
    identity_gap: float
    identity_tol: float
    r_hi_source: float = math.nan

    @property
    def passed(self) -> bool:
        return (self.r_lo <= 1.0 + self.tol and self.r_hi >= 1.0 - self.tol
                and self.identity_gap <= self.identity_tol)

    def to_dict(self) -> dict:
        return {"r_lo": self.r_lo, "r_hi": self.r_hi, "r_hi_source": self.r_hi_source, "tol": self.tol,
                "identity_gap": self.identity_gap, "identity_tol": self.identity_tol,
                "pass": self.passed}


def _require_steady(problem: DiscreteProblem, phi, steady_tol: float) -> None:
    dphidt, _ = problem.time_derivative(phi)
    residual = problem.weighted_residual(phi, dphidt)
    if residual > 10.0 * steady_tol:
        raise NotSteadyError(f"weighted residual {residual:.3e} exceeds {10.0 * steady_tol:.1e}")


def _ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den


def check_D2a(problem: DiscreteProblem, phi, tol: float = 0.02, identity_tol: float = 1e-6,
              steady_tol: float = 1e-8) -> NumberSandwichReport:
    """k1 M0 M_lam <= M0(S_delta)_eff <= k2 M0 M_lam, plus the theta == 1 identity.

    ``M0(S_delta)_eff = M0(S_delta) - 2 delta M0(phi) - N_over`` is the number
    the coagulation term consumes at a stationary state; it tends to M0(S)
    as delta goes to 0 and the domain grows. ``r_hi_source`` keeps the ratio
    against the bare injected number.

    Raises
    ------
    NotSteadyError
        If phi is not a stationary state of ``problem``.
    """
    _require_steady(problem, phi, steady_tol)
    grid, lam = problem.grid, problem.lam
    values = _values(phi)
    rates = problem.time_derivative(phi)[1]
    m0 = moment(grid, values, 0.0)
    mlam = moment(grid, values, lam)
    m0_source = moment(grid, problem.source_rates, 0.0)
    effective = m0_source - 2.0 * problem.delta * m0 - rates.overflow_number
    product = m0 * mlam
    balance = effective - rates.pair_number
    gap = abs(balance) / m0_source if m0_source > 0.0 else abs(balance)
    return NumberSandwichReport(r_lo=_ratio(problem.kernel.k1 * product, effective),
                                r_hi=_ratio(problem.kernel.k2 * product, effective),
                                tol=tol, identity_gap=gap, identity_tol=identity_tol,
                                r_hi_source=_ratio(problem.kernel.k2 * product, m0_source))


def check_D2b(problem: DiscreteProblem, phi, tol: float = 0.02, balance_tol: float = 1e-4) -> SandwichReport:
    """2^lam M_lam(S_delta)_eff/k2 <= M_lam(phi)^2 <= 2^(1-lam) M_lam(S_delta)_eff / (k1 (2 - 2^lam)).

    ``M_lam(S_delta)_eff`` removes the efflux and the x^lam carried past the
    last edge, which leaves the pair sum of the continuous
    ``x^lam + y^lam - (x+y)^lam`` at a stationary state.

    Raises
    ------
    InapplicableError
        For lambda >= 1.
    """
    lam = problem.lam
    if lam >= 1.0:
        raise InapplicableError("the M_lambda sandwich needs lambda < 1")
    grid, table = problem.grid, problem.table
    values = _values(phi)
    k1, k2 = problem.kernel.k1, problem.kernel.k2
    mlam_source = moment(grid, problem.source_rates, lam)
    mlam = moment(grid, values, lam)

    theta = TestFunction(f"x^{lam:g}", lambda x: np.power(x, lam), overflow="natural")
    carried_out = overflow_term(table, grid, values, theta)
    # -1/2 sum chi K phi phi with the allocated values, plus what left the domain
    consumed = -weak_form(table, grid, values, theta) + carried_out
    balance = mlam_source - 2.0 * problem.delta * mlam - consumed
    gap = abs(balance) / mlam_source if mlam_source > 0.0 else abs(balance)
    effective = mlam_source - 2.0 * problem.delta * mlam - carried_out

    x = grid.pivots
    v = values * grid.widths
    exact_chi = sub_additivity_gap(x[:, None], x[None, :], lam)
    continuous = 0.5 * float(np.sum(exact_chi * table.rates * v[:, None] * v[None, :]))

    lower_factor = 2.0 ** lam / k2
    upper_factor = 2.0 ** (1.0 - lam) / (k1 * (2.0 - 2.0 ** lam))
    return SandwichReport(
        name="d2b",
        lower=lower_factor * effective,
        value=mlam ** 2,
        upper=upper_factor * effective,
        tol=tol,
        identity_gap=gap,
        identity_tol=balance_tol,
        extra={"Mlambda_S_delta": mlam_source,
               "Mlambda_S_delta_effective": effective,
               "Mlambda_S": source_moment(problem.source.truncated(None), lam),
               "lower_source": lower_factor * mlam_source,
               "upper_source": upper_factor * mlam_source,
               "continuous_chi_sum": continuous},
    )


# ---------------------------------------------------------------- residuals

@dataclass
class ResidualEntry:
    theta: str
    value: float
    absolute: bool = False

    def to_dict(self) -> dict:
        return {"theta": self.theta, "value": self.value, "absolute": self.absolute}


def default_battery(lam: float, a_values: Sequence[float] = (1e1, 1e2, 1e3, 1e4)) -> List[TestFunction]:
    battery = [TestFunction("one", lambda x: np.ones_like(x))]
    for a in a_values:
        battery.append(TestFunction(f"min(x,{a:g})/{a:g}", lambda x, a=a: np.minimum(x, a) / a))
    for a in a_values:
        battery.append(TestFunction(
            f"min(x^{lam:g},{a:g}^{lam:g})/{a:g}^{lam:g}",
            lambda x, a=a: np.minimum(np.power(x, lam), a ** lam) / a ** lam))
    for a in a_values:
        battery.append(TestFunction(f"1(0,{a:g})", lambda x, a=a: (x < a).astype(float)))
    return battery


def stationarity_residual(table: PairTable, grid: Grid, phi, source_rates: np.ndarray, delta: float,
                          battery: Optional[Sequence[TestFunction]] = None,
                          lam: float = 0.0) -> List[ResidualEntry]:
    """R(theta) = |1/2 sum chi K phi phi dx dx + sum theta S dx - 2 delta sum theta phi dx| / sum theta S dx."""
    values = _values(phi)
    battery = default_battery(lam) if battery is None else battery
    out = []
    for theta in battery:
        th = theta.values(grid)
        injected = float(np.sum(th * source_rates * grid.widths))
        numerator = abs(weak_form(table, grid, values, theta) + injected
                        - 2.0 * delta * float(np.sum(th * values * grid.widths)))
        if injected == 0.0:
            out.append(ResidualEntry(theta.name, numerator, absolute=True))
        else:
            out.append(ResidualEntry(theta.name, numerator / abs(injected)))
    return out


def min_size_decomposition(table: PairTable, grid: Grid, phi, A: float) -> dict:
    """The three pair sums that balance the injected min(x, A) when phi is stationary.

    ``weak_form`` is minus the weak form of theta = min(x, A) with theta = A
    beyond the domain; it equals ``total`` whenever A is a pivot.
    """
    x = grid.pivots
    v = _values(phi) * grid.widths
    pair = table.rates * v[:, None] * v[None, :]
    xi, xj = x[:, None], x[None, :]
    below_i, below_j = xi < A, xj < A
    t1 = 0.5 * float(np.sum(np.where(below_i & below_j & (xi + xj > A), (xi + xj - A) * pair, 0.0)))
    t2 = float(np.sum(np.where(below_i & ~below_j, xi * pair, 0.0)))
    t3 = 0.5 * A * float(np.sum(np.where(~below_i & ~below_j, pair, 0.0)))
    theta = TestFunction(f"min(x,{A:g})", lambda s: np.minimum(s, A), overflow="natural")
    return {"A": A, "t1": t1, "t2": t2, "t3": t3, "total": t1 + t2 + t3,
            "weak_form": -weak_form(table, grid, phi, theta)}


def min_power_decomposition(table: PairTable, grid: Grid, phi, A: float, lam: float) -> dict:
    """Four pair sums balancing the injected min(x^lam, A^lam), with the exact continuous chi."""
    x = grid.pivots
    v = _values(phi) * grid.widths
    pair = table.rates * v[:, None] * v[None, :]
    xi, xj = x[:, None], x[None, :]
    below_i, below_j = xi < A, xj < A
    s = xi + xj
    al = A ** lam
    t1 = 0.5 * float(np.sum(np.where(below_i & below_j & (s <= A), sub_additivity_gap(xi, xj, lam) * pair, 0.0)))
    t2 = 0.5 * float(np.sum(np.where(below_i & below_j & (s > A),
                                     (np.power(xi, lam) + np.power(xj, lam) - al) * pair, 0.0)))
    t3 = float(np.sum(np.where(below_i & ~below_j, np.power(xi, lam) * pair, 0.0)))
    t4 = 0.5 * al * float(np.sum(np.where(~below_i & ~below_j, pair, 0.0)))
    return {"A": A, "t1": t1, "t2": t2, "t3": t3, "t4": t4, "total": t1 + t2 + t3 + t4}


# ---------------------------------------------------------------- tail

@dataclass
class TailFit:
    slope: float
    stderr: float
    window: Tuple[float, float]
    points: int

    def to_dict(self) -> dict:
        return {"slope": self.slope, "stderr": self.stderr, "window": list(self.window),
                "points": self.points}


def tail_window(grid: Grid, phi, decades: float = 1.5, exclude: float = 0.5) -> Tuple[float, float]:
    """Window of ``decades`` below both the overflow zone and the efflux cut-off.

    The top edge is the lower of ``x_max 10^-exclude`` and a twentieth of the
    mass-weighted mean size M2/M1. It never drops below ``x_min 10^decades``,
    so steep tails still get a window inside the grid.
    """
    values = _values(phi)
    x_hi = grid.x_max * 10.0 ** (-exclude)
    m1 = moment(grid, values, 1.0)
    if m1 > 0.0:
        x_hi = min(x_hi, moment(grid, values, 2.0) / m1 / 20.0)
    x_hi = max(x_hi, min(grid.x_min * 10.0 ** decades, grid.x_max))
    return x_hi * 10.0 ** (-decades), x_hi


def tail_slope(grid: Grid, phi, decades: float = 1.5, exclude: float = 0.5,
               window: Optional[Tuple[float, float]] = None) -> TailFit:
    """Least-squares slope of log phi against log x on the tail window.

    Raises
    ------
    InapplicableError
        If fewer than 8 positive bins fall inside the window.
    """
    values = _values(phi)
    lo, hi = window if window is not None else tail_window(grid, values, decades, exclude)
    x = grid.pivots
    mask = (x >= lo) & (x <= hi) & (values > 0.0)
    points = int(mask.sum())
    if points < MIN_TAIL_POINTS:
        raise InapplicableError(f"only {points} positive bins in the tail window [{lo:.3g}, {hi:.3g}]")
    fit = stats.linregress(np.log(x[mask]), np.log(values[mask]))
    return TailFit(slope=float(fit.slope), stderr=float(fit.stderr), window=(float(lo), float(hi)),
                   points=points)


# ---------------------------------------------------------------- transfer

@dataclass
class TransferEntry:
    weight: str
    lhs: float
    rhs: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.lhs >= self.rhs * (1.0 - self.tol)

    def to_dict(self) -> dict:
        return {"weight": self.weight, "lhs": self.lhs, "rhs": self.rhs, "pass": self.passed}


def default_weights(eps_values: Sequence[float] = (1e-2, 1e-1, 1.0)) -> List[Tuple[str, object]]:
    weights = [(f"1/(x+{eps:g})", lambda x, eps=eps: 1.0 / (x + eps)) for eps in eps_values]
    weights.append(("one", lambda x: np.ones_like(x)))
    return weights


def weighted_transfer_check(k1: float, lam: float, grid: Grid, phi, source_rates: np.ndarray,
                            weight, name: str = "w", tol: float = 0.02) -> TransferEntry:
    """sum w S dx >= k1 M_lam(phi) sum w phi dx for a nonincreasing positive weight.

    Raises
    ------
    DomainError
        If the weight is not positive and nonincreasing on the grid.
    """
    w = np.asarray(weight(grid.pivots) if callable(weight) else weight, dtype=float) * np.ones(grid.size)
    if np.any(w <= 0.0) or np.any(np.diff(w) > 0.0):
        raise DomainError(f"weight {name} must be positive and nonincreasing on the grid")
    values = _values(phi)
    lhs = float(np.sum(w * source_rates * grid.widths))
    rhs = k1 * moment(grid, values, lam) * float(np.sum(w * values * grid.widths))
    return TransferEntry(weight=name, lhs=lhs, rhs=rhs, tol=tol)


# ---------------------------------------------------------------- inequalities

def sub_additivity_gap(x, y, lam: float):
    """x^lam + y^lam - (x+y)^lam without cancellation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    big = np.maximum(x, y)
    small = np.minimum(x, y)
    return np.power(small, lam) - np.power(big, lam) * np.expm1(lam * np.log1p(small / big))


@dataclass
class B3Report:
    lhs: float
    rhs: float
    kappa: float

    @property
    def ratio(self) -> float:
        if self.rhs == 0.0:
            return 0.0 if self.lhs == 0.0 else math.inf
        return self.lhs / self.rhs

    @property
    def passed(self) -> bool:
        return self.ratio <= 1.0 + DOUBLE_SUM_RTOL

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio, "pass": self.passed}


def b3_check(grid: Grid, g, theta: float, m: float, sigma: float) -> B3Report:
    """(sum x^sigma g dx)^2 <= kappa/2 sum_ij [x^m + y^m - (x+y)^m] (xy)^theta g_i g_j dx_i dx_j on x >= 1."""
    k = kappa(theta, m, sigma)
    mask = grid.mask_at_least(1.0)
    x = grid.pivots[mask]
    gv = _values(g)[mask] * grid.widths[mask]
    lhs = float(np.sum(np.power(x, sigma) * gv)) ** 2
    xi, xj = x[:, None], x[None, :]
    weight = sub_additivity_gap(xi, xj, m) * np.power(xi * xj, theta)
    rhs = 0.5 * k * float(np.sum(weight * gv[:, None] * gv[None, :]))
    return B3Report(lhs=lhs, rhs=rhs, kappa=k)


@dataclass
class AlgebraicReport:
    samples: int
    gap_violations: int
    power_sum_violations: int
    worst_gap_lower_slack: float
    worst_gap_upper_slack: float
    worst_power_sum_lower_slack: float
    worst_power_sum_upper_slack: float

    @property
    def passed(self) -> bool:
        return self.gap_violations == 0 and self.power_sum_violations == 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pass"] = self.passed
        return out


def algebraic_checks(sample_count: int, seed: int, chunk: int = 200_000) -> AlgebraicReport:
    """The two-sided bounds on x^lam + y^lam - (x+y)^lam and on (x+y)^lam, lam in [0, 1)."""
    rng = np.random.default_rng(seed)
    gap_bad = sum_bad = 0
    worst = [math.inf] * 4
    done = 0
    while done < sample_count:
        n = min(chunk, sample_count - done)
        lam = rng.uniform(0.0, 1.0, n)
        x = np.power(10.0, rng.uniform(-6.0, 6.0, n))
        y = np.power(10.0, rng.uniform(-6.0, 6.0, n))
        xl, yl = np.power(x, lam), np.power(y, lam)
        # rounding floor: the terms that cancel inside the middle expression
        floor = 1e-15 * (xl + yl)
        middle = sub_additivity_gap(x, y, lam)
        harmonic = np.power(x * y / (x + y), lam)
        gap_lo = 2.0 ** lam * (2.0 - 2.0 ** lam) * harmonic
        sum_l = np.power(x + y, lam)
        sum_lo = 2.0 ** (lam - 1.0) * (xl + yl)

        slacks = (middle - gap_lo, harmonic - middle, sum_l - sum_lo, (xl + yl) - sum_l)
        scales = (np.abs(middle) + np.abs(gap_lo), harmonic + np.abs(middle), sum_l + sum_lo, xl + yl + sum_l)
        for idx, (slack, scale) in enumerate(zip(slacks, scales)):
            worst[idx] = min(worst[idx], float(np.min(slack / scale)))
        bad_gap = (slacks[0] < -(INEQ_RTOL * scales[0] + floor)) | (slacks[1] < -(INEQ_RTOL * scales[1] + floor))
        bad_sum = (slacks[2] < -(INEQ_RTOL * scales[2] + floor)) | (slacks[3] < -(INEQ_RTOL * scales[3] + floor))
        gap_bad += int(bad_gap.sum())
        sum_bad += int(bad_sum.sum())
        done += n
    report = AlgebraicReport(samples=int(sample_count), gap_violations=gap_bad, power_sum_violations=sum_bad,
                             worst_gap_lower_slack=worst[0], worst_gap_upper_slack=worst[1],
                             worst_power_sum_lower_slack=worst[2], worst_power_sum_upper_slack=worst[3])
    if not report.passed:
        logger.warning("algebraic inequality violations: %s", report.to_dict())
    return report


# ---------------------------------------------------------------- invariant set and trajectories

@dataclass
class BoundEntry:
    name: str
    value: float
    bound: float
    kind: str = "upper"
    tol: float = 1e-3

    @property
    def passed(self) -> bool:
        if self.kind == "upper":
            return self.value <= self.bound * (1.0 + self.tol)
        return self.value >= self.bound * (1.0 - self.tol)

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "bound": self.bound,
                "kind": self.kind, "pass": self.passed}


def invariant_set_check(problem: DiscreteProblem, phi, constants: AprioriConstants,
                        orders: Sequence[float] = (0.0, 0.25, 0.5, 0.75),
                        enforce_floor: bool = False) -> List[BoundEntry]:
    """Moment bounds that every regularized stationary state satisfies.

    The C4 floor on M_lambda, and the number bound built on it, only hold once
    delta is small; they are checked when ``enforce_floor`` is set.
    """
    grid, delta, lam = problem.grid, problem.delta, problem.lam
    values = _values(phi)
    full = problem.source.truncated(None)
    entries = []
    for m in orders:
        entries.append(BoundEntry(f"M_{m:g} <= M_{m:g}(S)/(2 delta)", moment(grid, values, m),
                                  source_moment(full, m) / (2.0 * delta)))
    if not constants.applicable:
        return entries

    mlam = moment(grid, values, lam)
    entries.append(BoundEntry("M_lambda <= C1", mlam, constants.C1))
    entries.append(BoundEntry("M_1 <= M_lambda(S)/(2 delta^(2-lambda))", moment(grid, values, 1.0),
                              constants.Mlam_S / (2.0 * delta ** (2.0 - lam))))
    exponent = (4.0 + lam - lam ** 2) / (1.0 - lam)
    try:
        bound = constants.C3 / delta ** exponent
    except OverflowError:
        bound = math.inf
    entries.append(BoundEntry("M_(1+lambda) <= C3/delta^e", moment(grid, values, 1.0 + lam), bound))
    if enforce_floor:
        entries.append(BoundEntry("M_lambda >= C4", mlam, constants.C4, kind="lower"))
        entries.append(BoundEntry("k1 C4 M_0 <= M_0(S)", constants.k1 * constants.C4 * moment(grid, values, 0.0),
                                  constants.M0_S))
    mu = (1.0 + lam) / 4.0
    entries.append(BoundEntry(f"M_{mu:g} <= C7", moment(grid, values, mu), constants.C7(mu)))
    m = (2.0 * mu + 1.0 - lam) / 2.0
    mask = grid.mask_at_least(1.0)
    upper_tail = float(np.sum(np.power(grid.pivots, mu) * values * grid.widths * mask))
    entries.append(BoundEntry(f"(int_1^inf x^{mu:g} phi)^2 <= C2 M_{m:g}(S)", upper_tail ** 2,
                              constants.C2(m, mu) * source_moment(full, m)))
    return entries


@dataclass
class TrajectoryCheck:
    worst_number_balance: float
    number_balance_tol: float
    max_Mlambda: float
    ceiling: Optional[float]
    min_Mlambda_after_transient: Optional[float]
    floor: Optional[float]
    floor_enforced: bool

    @property
    def number_balance_pass(self) -> bool:
        return self.worst_number_balance <= self.number_balance_tol

    @property
    def ceiling_pass(self) -> bool:
        return self.ceiling is None or self.max_Mlambda <= self.ceiling

    @property
    def floor_pass(self) -> bool:
        if not self.floor_enforced or self.floor is None or self.min_Mlambda_after_transient is None:
            return True
        return self.min_Mlambda_after_transient >= self.floor

    @property
    def passed(self) -> bool:
        return self.number_balance_pass and self.ceiling_pass and self.floor_pass

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(number_balance_pass=self.number_balance_pass, ceiling_pass=self.ceiling_pass,
                   floor_pass=self.floor_pass, pass_=self.passed)
        out["pass"] = out.pop("pass_")
        return out


def trajectory_checks(record, constants: AprioriConstants, delta: float,
                      enforce_floor: bool = False, rel_tol: float = 1e-3) -> TrajectoryCheck:
    """Discrete moment inequality, M_lambda ceiling and floor along a recorded trajectory.

    The moment inequality reads dM0/dt + 2 delta M0 + k1 M0 M_lam <= M0(S),
    with dM0/dt the operator rate at each recorded state.
    """
    m0 = np.asarray(record.M0)
    mlam = np.asarray(record.Mlambda)
    rate = np.asarray(record.dM0dt)
    m0_source = constants.M0_S
    lhs = rate + 2.0 * delta * m0 + constants.k1 * m0 * mlam
    scale = m0_source if m0_source > 0.0 else 1.0
    worst = float(np.max((lhs - m0_source) / scale)) if lhs.size else -math.inf

    ceiling = None
    if constants.C1 is not None and mlam.size and mlam[0] <= constants.C1:
        ceiling = constants.C1 * (1.0 + rel_tol)

    floor = None
    min_after = None
    if constants.applicable and mlam.size:
        floor = constants.C4 * (1.0 - rel_tol)
        times = np.asarray(record.t)
        transient = 5.0 / math.sqrt(constants.Mlam_S) if constants.Mlam_S > 0.0 else 0.0
        after = times >= transient
        if np.any(after):
            min_after = float(np.min(mlam[after]))
    return TrajectoryCheck(worst_number_balance=worst, number_balance_tol=1e-6, max_Mlambda=float(np.max(mlam)) if mlam.size else 0.0,
                           ceiling=ceiling, min_Mlambda_after_transient=min_after, floor=floor,
                           floor_enforced=enforce_floor)


# ---------------------------------------------------------------- steady report

DEFAULT_CHECKS = ("d2a", "d2b", "residuals", "transfer", "invariant_set", "trajectory")


@dataclass
class DiagnosticSettings:
    tol: float = 0.02
    residual_tol: float = 1e-4
    identity_tol: float = 1e-6
    balance_tol: float = 1e-4
    battery_A: Tuple[float, ...] = (1e1, 1e2, 1e3, 1e4)
    transfer_eps: Tuple[float, ...] = (1e-2, 1e-1, 1.0)
    tail_decades: float = 1.5
    tail_exclude_decades: float = 0.5
    tail_tol: float = 0.1
    checks: Tuple[str, ...] = DEFAULT_CHECKS
    moment_orders: Tuple[float, ...] = ()
    steady_tol: float = 1e-8


@dataclass
class SteadyReport:
    delta: float
    converged: bool
    residual: float
    checks: Tuple[str, ...]
    moments: Dict[str, float]
    negative_moments: List[dict]
    overflow: Dict[str, float]
    constants: Optional[AprioriConstants]
    d2a: Optional[NumberSandwichReport] = None
    d2b: Optional[SandwichReport] = None
    residuals: List[ResidualEntry] = field(default_factory=list)
    residual_tol: float = 1e-4
    tail: Optional[TailFit] = None
    tail_target: Optional[float] = None
    tail_tol: float = 0.1
    transfer: List[TransferEntry] = field(default_factory=list)
    invariant_set: List[BoundEntry] = field(default_factory=list)
    trajectory: Optional[TrajectoryCheck] = None
    notes: Dict[str, str] = field(default_factory=dict)

    def failures(self) -> List[str]:
        failed = []
        if not self.converged:
            failed.append("converged")
        for name in self.checks:
            if name in self.notes:
                failed.append(f"{name}: {self.notes[name]}")
            elif name == "d2a" and self.d2a is not None and not self.d2a.passed:
                failed.append("d2a")
            elif name == "d2b" and self.d2b is not None and not self.d2b.passed:
                failed.append("d2b")
            elif name == "residuals" and any(r.value > self.residual_tol for r in self.residuals):
                failed.append("residuals")
            elif name == "transfer" and not all(t.passed for t in self.transfer):
                failed.append("transfer")
            elif name == "invariant_set" and not all(b.passed for b in self.invariant_set):
                failed.append("invariant_set")
            elif name == "trajectory" and self.trajectory is not None and not self.trajectory.passed:
                failed.append("trajectory")
            elif name == "tail" and not self.tail_pass:
                failed.append("tail")
        return failed

    @property
    def tail_pass(self) -> bool:
        if self.tail is None:
            return False
        return self.tail_target is None or abs(self.tail.slope - self.tail_target) <= self.tail_tol

    @property
    def passed(self) -> bool:
        return not self.failures()

    def _tail_dict(self) -> Optional[dict]:
        if self.tail is None:
            return None
        out = self.tail.to_dict()
        out.update({"target": self.tail_target, "tol": self.tail_tol, "pass": self.tail_pass})
        return out

    def to_dict(self) -> dict:
        constants = self.constants.to_dict() if self.constants is not None else {}
        if self.constants is not None:
            constants["z_delta"] = self.constants.z_delta(self.delta)
        return {
            "delta": self.delta,
            "converged": self.converged,
            "residual": self.residual,
            "moments": self.moments,
            "negative_moments": self.negative_moments,
            "d2a": self.d2a.to_dict() if self.d2a else None,
            "d2b": self.d2b.to_dict() if self.d2b else None,
            "residuals": [r.to_dict() for r in self.residuals],
            "tail": self._tail_dict(),
            "transfer": [t.to_dict() for t in self.transfer],
            "constants": constants,
            "overflow": self.overflow,
            "invariant_set": [b.to_dict() for b in self.invariant_set],
            "trajectory": self.trajectory.to_dict() if self.trajectory else None,
            "notes": self.notes,
            "failures": self.failures(),
            "pass": self.passed,
        }


def report_moment_orders(lam: float, extra: Sequence[float] = ()) -> List[float]:
    orders = {0.0, lam, 0.5, 1.0, 1.0 + lam, (1.0 + lam) / 2.0}
    if (1.0 + lam) / 2.0 - 0.1 > 0.0:
        orders.add((1.0 + lam) / 2.0 - 0.1)
    orders.update(float(m) for m in extra)
    return sorted(orders)


def build_report(problem: DiscreteProblem, phi, converged: bool = True, residual: Optional[float] = None,
                 record=None, settings: Optional[DiagnosticSettings] = None,
                 enforce_floor: bool = False) -> SteadyReport:
    """Run every enabled check on a (putatively) stationary state."""
    settings = settings or DiagnosticSettings()
    grid, lam, delta = problem.grid, problem.lam, problem.delta
    values = _values(phi)
    dphidt, rates = problem.time_derivative(values)
    if residual is None:
        residual = problem.weighted_residual(values, dphidt)

    constants = None
    try:
        constants = apriori_bounds(problem.kernel, problem.source)
    except Exception as exc:  # divergent source moments
        logger.warning("a-priori constants unavailable: %s", exc)

    report = SteadyReport(
        delta=delta,
        converged=bool(converged),
        residual=float(residual),
        checks=tuple(settings.checks),
        moments={f"{m:g}": moment(grid, values, m) for m in report_moment_orders(lam, settings.moment_orders)},
        negative_moments=[truncated_negative_moment(grid, values, -0.5)],
        overflow={"number": rates.overflow_number, "mass": rates.overflow_mass},
        constants=constants,
        residual_tol=settings.residual_tol,
        tail_target=-(3.0 + lam) / 2.0,
        tail_tol=settings.tail_tol,
    )

    try:
        report.d2a = check_D2a(problem, values, settings.tol, settings.identity_tol, settings.steady_tol)
    except NotSteadyError as exc:
        report.notes["d2a"] = f"refused: {exc}"
    try:
        report.d2b = check_D2b(problem, values, settings.tol, settings.balance_tol)
    except InapplicableError as exc:
        report.notes["d2b"] = f"inapplicable: {exc}"

    battery = default_battery(lam, settings.battery_A)
    report.residuals = stationarity_residual(problem.table, grid, values, problem.source_rates, delta,
                                             battery, lam)
    try:
        report.tail = tail_slope(grid, values, settings.tail_decades, settings.tail_exclude_decades)
    except InapplicableError as exc:
        report.notes.setdefault("tail", f"inapplicable: {exc}")

    for name, weight in default_weights(settings.transfer_eps):
        report.transfer.append(weighted_transfer_check(problem.kernel.k1, lam, grid, values,
                                                       problem.source_rates, weight, name, settings.tol))

    if constants is not None:
        report.invariant_set = invariant_set_check(problem, values, constants, enforce_floor=enforce_floor)
        if record is not None:
            report.trajectory = trajectory_checks(record, constants, delta, enforce_floor)
        if not constants.applicable and "d2b" not in report.notes:
            report.notes["d2b"] = "inapplicable: lambda >= 1"
    elif "invariant_set" in settings.checks:
        report.notes["invariant_set"] = "source moments diverge"

    # the tail note only fails a run when the tail check is enabled
    if "tail" not in settings.checks:
        report.notes.pop("tail", None)
    logger.info("delta=%g report: %s", delta, "pass" if report.passed else report.failures())
    return report
