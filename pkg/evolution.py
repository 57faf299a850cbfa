"""Relaxation of the regularized equation to its stationary state.

The scheme is loss-implicit and gain-explicit::

    phi' = (phi + dt (gain + S_delta)) / (1 + dt (loss_rate + 2 delta))

so every iterate stays non-negative and its fixed points are exactly the
discrete stationary states. Time accuracy plays no role.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from coag_errors import DivergenceError, DomainError, NumericalError
from coag_op import DiscreteProblem, OperatorRates, PairTable, TestFunction, apply, build_pair_table
from diagnostics import (
    DiagnosticSettings,
    SteadyReport,
    apriori_bounds,
    build_report,
    min_size_decomposition,
    stationarity_residual,
)
from grid import Grid, SizeDistribution, build_geometric, moment
from kernels import GeneralKernel, Kernel, Reduction, reduce_general, transform_solution
from sources import SourceSpec, bin_averages

logger = logging.getLogger(__name__)

DT_GROWTH = 1.2
DT_SHRINK = 0.5
DT_FLOOR = 1e-6
# a step that raises the residual by more than this factor is undone
REJECT_RATIO = 2.0
# accepted steps without a new best residual before dt is cut
STALL_STEPS = 50
EXISTS, NONEXISTENT, INCONCLUSIVE = "EXISTS", "NONEXISTENT", "INCONCLUSIVE"


def _values(phi) -> np.ndarray:
    if isinstance(phi, SizeDistribution):
        return phi.values
    return np.asarray(phi, dtype=float)


@dataclass(frozen=True)
class EvolveParams:
    delta: float
    dt_init: float = 1e-2
    dt_max: float = 1e6
    t_max: float = 1e12
    steady_tol: float = 1e-8
    max_steps: int = 200_000
    blowup_factor: float = 1e3
    blowup_moment: Optional[float] = None
    record_every: int = 1
    moment_orders: tuple = ()

    def __post_init__(self) -> None:
        if not (0.0 < self.delta < 1.0):
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.steady_tol > 0.0:
            raise DomainError("steady_tol must be positive")
        if not (0.0 < self.dt_init <= self.dt_max):
            raise DomainError("need 0 < dt_init <= dt_max")
        if self.max_steps < 1 or self.record_every < 1:
            raise DomainError("max_steps and record_every must be >= 1")

    def with_delta(self, delta: float) -> "EvolveParams":
        return replace(self, delta=float(delta))


@dataclass
class TrajectoryRecord:
    """Sampled moments and fluxes along one relaxation run."""

    lam: float
    orders: tuple = ()
    t: List[float] = field(default_factory=list)
    dt: List[float] = field(default_factory=list)
    M0: List[float] = field(default_factory=list)
    Mlambda: List[float] = field(default_factory=list)
    M1: List[float] = field(default_factory=list)
    M1plambda: List[float] = field(default_factory=list)
    extra: Dict[str, List[float]] = field(default_factory=dict)
    overflow_number: List[float] = field(default_factory=list)
    overflow_mass: List[float] = field(default_factory=list)
    dM0dt: List[float] = field(default_factory=list)
    dM0dt_fd: List[float] = field(default_factory=list)
    residual: List[float] = field(default_factory=list)

    def append(self, grid: Grid, phi: np.ndarray, t: float, dt: float, dphidt: np.ndarray,
               rates: OperatorRates, residual: float, fd_rate: float) -> None:
        lam = self.lam
        self.t.append(t)
        self.dt.append(dt)
        self.M0.append(moment(grid, phi, 0.0))
        self.Mlambda.append(moment(grid, phi, lam))
        self.M1.append(moment(grid, phi, 1.0))
        self.M1plambda.append(moment(grid, phi, 1.0 + lam))
        for m in self.orders:
            self.extra.setdefault(f"{m:g}", []).append(moment(grid, phi, m))
        self.overflow_number.append(rates.overflow_number)
        self.overflow_mass.append(rates.overflow_mass)
        self.dM0dt.append(float(np.sum(dphidt * grid.widths)))
        self.dM0dt_fd.append(fd_rate)
        self.residual.append(residual)

    def __len__(self) -> int:
        return len(self.t)

    def rows(self):
        """(t, M0, Mlambda, M1, M1plambda, overflow_mass) per sample."""
        return zip(self.t, self.M0, self.Mlambda, self.M1, self.M1plambda, self.overflow_mass)


@dataclass
class EvolveResult:
    phi: SizeDistribution
    record: TrajectoryRecord
    converged: bool
    steps: int
    residual: float
    t: float
    blew_up: bool = False
    rejected: int = 0

    def __iter__(self):
        return iter((self.phi, self.record, self.converged))


def _source_vector(source, grid: Grid) -> np.ndarray:
    if isinstance(source, SourceSpec):
        return bin_averages(source, grid)
    return np.asarray(source, dtype=float)


def _semi_implicit(values: np.ndarray, rates: OperatorRates, source_rates: np.ndarray,
                   dt: float, delta: float) -> np.ndarray:
    new = (values + dt * (rates.gain + source_rates)) / (1.0 + dt * (rates.loss_rate + 2.0 * delta))
    if not np.all(np.isfinite(new)):
        raise NumericalError(f"non-finite density after a step of dt={dt:g}")
    return new


def step(table: PairTable, grid: Grid, source, phi, dt: float, delta: float) -> SizeDistribution:
    """One semi-implicit step; ``source`` is a SourceSpec (already truncated) or per-bin values.

    Raises
    ------
    DomainError
        For dt <= 0.
    NumericalError
        If the rates or the update are not finite.
    """
    if not dt > 0.0:
        raise DomainError(f"dt must be positive, got {dt}")
    values = _values(phi)
    rates = apply(table, grid, values)
    if not (np.all(np.isfinite(rates.gain)) and np.all(np.isfinite(rates.loss_rate))):
        raise NumericalError("non-finite coagulation rates")
    return SizeDistribution(_semi_implicit(values, rates, _source_vector(source, grid), dt, delta))


def blowup_bound(problem: DiscreteProblem, params: EvolveParams) -> Optional[float]:
    """M_lambda ceiling that aborts a stage, or None when no guard applies."""
    if problem.lam < 1.0:
        try:
            c1 = apriori_bounds(problem.kernel, problem.source).C1
        except DivergenceError:
            return params.blowup_moment
        if c1 is not None and c1 > 0.0:
            return params.blowup_factor * c1
    return params.blowup_moment


def evolve_to_steady(params: EvolveParams, problem: DiscreteProblem, init=None) -> EvolveResult:
    """Step with adaptive dt until the weighted residual drops below ``steady_tol``.

    dt grows after every step that lowers the residual. It is halved when a
    step is rejected (the residual jumps by more than ``REJECT_RATIO``) and
    when ``STALL_STEPS`` accepted steps pass without a new best residual.
    Rejected attempts count towards ``max_steps``.

    The problem is rebuilt for ``params.delta`` if its delta differs. Hitting
    ``max_steps`` or ``t_max`` returns ``converged=False``; a moment above the
    blow-up bound stops the run with ``blew_up=True``.
    """
    if problem.delta != params.delta:
        problem = problem.with_delta(params.delta)
    grid, delta = problem.grid, problem.delta
    values = np.zeros(grid.size) if init is None else _values(init).copy()
    if values.size != grid.size:
        raise DomainError("initial distribution and grid are not aligned")
    guard = blowup_bound(problem, params)
    record = TrajectoryRecord(lam=problem.lam, orders=tuple(params.moment_orders))

    dt = params.dt_init
    dt_min = params.dt_init * DT_FLOOR
    t = 0.0
    dphidt, rates = problem.time_derivative(values)
    residual = problem.weighted_residual(values, dphidt)
    record.append(grid, values, t, 0.0, dphidt, rates, residual, float("nan"))

    converged = residual < params.steady_tol
    blew_up = False
    steps = 0
    rejected = 0
    best, since_best = residual, 0
    while not converged and steps < params.max_steps and t < params.t_max:
        steps += 1
        candidate = _semi_implicit(values, rates, problem.source_rates, dt, delta)
        new_dphidt, new_rates = problem.time_derivative(candidate)
        if not np.all(np.isfinite(new_dphidt)):
            raise NumericalError(f"non-finite rates at step {steps}")
        new_residual = problem.weighted_residual(candidate, new_dphidt)
        if new_residual > REJECT_RATIO * residual and dt > dt_min:
            rejected += 1
            dt = max(dt * DT_SHRINK, dt_min)
            continue

        m0_before = float(np.sum(values * grid.widths))
        dt_used = dt
        t += dt
        if new_residual < residual:
            dt = min(dt * DT_GROWTH, params.dt_max)
        values, dphidt, rates, residual = candidate, new_dphidt, new_rates, new_residual
        if residual < best:
            best, since_best = residual, 0
        else:
            since_best += 1
            if since_best >= STALL_STEPS:
                dt = max(dt * DT_SHRINK, dt_min)
                since_best = 0
        converged = residual < params.steady_tol

        mlam = moment(grid, values, problem.lam)
        if guard is not None and mlam > guard:
            blew_up = True
        if converged or blew_up or steps % params.record_every == 0:
            fd = (float(np.sum(values * grid.widths)) - m0_before) / dt_used
            record.append(grid, values, t, dt_used, dphidt, rates, residual, fd)
        logger.debug("step %d t=%.3e dt=%.3e residual=%.3e", steps, t, dt_used, residual)
        if blew_up:
            logger.warning("delta=%g: M_lambda=%.3e exceeds the blow-up bound %.3e", delta, mlam, guard)
            break

    if not converged and not blew_up:
        logger.warning("delta=%g: no steady state after %d steps (%d rejected, residual %.3e)",
                       delta, steps, rejected, residual)
    return EvolveResult(phi=SizeDistribution(values), record=record, converged=converged,
                        steps=steps, residual=residual, t=t, blew_up=blew_up, rejected=rejected)


# ---------------------------------------------------------------- continuation

@dataclass
class FamilyEntry:
    delta: float
    phi: SizeDistribution
    report: SteadyReport
    result: EvolveResult
    problem: DiscreteProblem = field(repr=False)

    def summary(self) -> dict:
        grid, lam = self.problem.grid, self.problem.lam
        values = self.phi.values
        return {
            "delta": self.delta,
            "converged": self.result.converged,
            "blew_up": self.result.blew_up,
            "steps": self.result.steps,
            "residual": self.result.residual,
            "M0": moment(grid, values, 0.0),
            "Mlambda": moment(grid, values, lam),
            "M1": moment(grid, values, 1.0),
            "overflow_mass": self.report.overflow["mass"],
            "pass": self.report.passed,
        }


@dataclass
class SteadyFamily:
    """Stationary states for strictly decreasing deltas, with flags for early stops."""

    entries: List[FamilyEntry] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    @property
    def deltas(self) -> List[float]:
        return [e.delta for e in self.entries]

    @property
    def last(self) -> FamilyEntry:
        return self.entries[-1]

    @property
    def complete(self) -> bool:
        return not self.flags

    @property
    def passed(self) -> bool:
        return self.complete and all(e.report.passed for e in self.entries)

    def to_dict(self) -> dict:
        return {"entries": [e.summary() for e in self.entries], "flags": list(self.flags),
                "pass": self.passed}


def check_deltas(deltas: Sequence[float]) -> List[float]:
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise DomainError("at least one delta is needed")
    if any(not (0.0 < d < 1.0) for d in deltas):
        raise DomainError("deltas must lie in (0, 1)")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise DomainError("deltas must be strictly decreasing")
    return deltas


def delta_continuation(deltas: Sequence[float], kernel: Kernel, source: SourceSpec, grid: Grid,
                       params: EvolveParams, settings: Optional[DiagnosticSettings] = None,
                       table: Optional[PairTable] = None) -> SteadyFamily:
    """Solve at the largest delta from phi == 0, then warm-start each smaller delta."""
    deltas = check_deltas(deltas)
    table = table if table is not None else build_pair_table(kernel, grid)
    family = SteadyFamily()
    phi = None
    for index, delta in enumerate(deltas):
        problem = DiscreteProblem.build(kernel, source, grid, delta, table=table)
        result = evolve_to_steady(params.with_delta(delta), problem, phi)
        # the floor is only claimed once delta is small and the start is warm
        enforce_floor = index >= max(1, len(deltas) - 2)
        report = build_report(problem, result.phi, result.converged, result.residual, result.record,
                              settings, enforce_floor=enforce_floor)
        family.entries.append(FamilyEntry(delta=delta, phi=result.phi, report=report,
                                          result=result, problem=problem))
        logger.info("delta=%g: converged=%s steps=%d M_lambda=%.6g", delta, result.converged,
                    result.steps, moment(grid, result.phi.values, problem.lam))
        if result.blew_up:
            family.flags.append(f"blow-up at delta={delta:g}")
            break
        if not result.converged:
            family.flags.append(f"not converged at delta={delta:g}")
            break
        phi = result.phi
    for flag in family.flags:
        logger.warning("continuation stopped: %s", flag)
    return family


@dataclass
class ReducedFamily:
    """Family solved for the reduced kernel, with the states mapped back to the original kernel."""

    reduction: Reduction
    family: SteadyFamily
    original: List[SizeDistribution]


def solve_through_reduction(kernel: GeneralKernel, deltas: Sequence[float], source: SourceSpec,
                            grid: Grid, params: EvolveParams,
                            settings: Optional[DiagnosticSettings] = None) -> ReducedFamily:
    """Continuation with (x y)^(-theta) K, then f = x^(-theta) phi for every delta."""
    reduction = reduce_general(kernel)
    family = delta_continuation(deltas, reduction.reduced_kernel, source, grid, params, settings)
    original = [transform_solution(e.phi, grid, -reduction.theta) for e in family.entries]
    return ReducedFamily(reduction=reduction, family=family, original=original)


# ---------------------------------------------------------------- domain ladder

@dataclass
class LadderRung:
    x_max: float
    bins: int
    delta: float
    moments: Dict[str, float]
    converged: bool
    blew_up: bool
    decomposition: dict
    min_residual: float

    def to_dict(self) -> dict:
        return {"x_max": self.x_max, "bins": self.bins, "delta": self.delta, "moments": self.moments,
                "converged": self.converged, "blew_up": self.blew_up, "decomposition": self.decomposition,
                "min_residual": self.min_residual}


def domain_ladder(kernel: Kernel, source: SourceSpec, x_maxes: Sequence[float], deltas: Sequence[float],
                  x_min: float, bins_per_decade: int, params: EvolveParams,
                  orders: Sequence[float] = (), settings: Optional[DiagnosticSettings] = None) -> List[LadderRung]:
    """Run a delta continuation on each grid of an increasing x_max ladder.

    Each rung keeps the moments of the state at the smallest delta reached,
    and the min{x, A} decomposition with A the pivot two decades below x_max.
    """
    x_maxes = [float(x) for x in x_maxes]
    if any(b <= a for a, b in zip(x_maxes, x_maxes[1:])):
        raise DomainError("the x_max ladder must be strictly increasing")
    lam = float(getattr(kernel, "lam"))
    orders = sorted({lam, *map(float, orders)})
    rungs = []
    for x_max in x_maxes:
        grid = build_geometric(x_min, x_max, bins_per_decade)
        family = delta_continuation(deltas, kernel, source, grid, params, settings)
        entry = family.last
        values = entry.phi.values
        a = float(grid.pivots[grid.index_of(x_max / 100.0)])
        split = min_size_decomposition(entry.problem.table, grid, values, a)
        theta = TestFunction(f"min(x,{a:g})/{a:g}", lambda x, a=a: np.minimum(x, a) / a)
        residual = stationarity_residual(entry.problem.table, grid, values, entry.problem.source_rates,
                                         entry.delta, [theta], lam)[0]
        rung = LadderRung(
            x_max=x_max,
            bins=grid.size,
            delta=entry.delta,
            moments={f"{m:g}": moment(grid, values, m) for m in orders},
            converged=entry.result.converged,
            blew_up=entry.result.blew_up,
            decomposition=split,
            min_residual=residual.value,
        )
        logger.info("ladder rung x_max=%g: %s", x_max, rung.moments)
        rungs.append(rung)
    return rungs


def classify_ladder(x_maxes: Sequence[float], values: Sequence[float], growth_factor: float = 5.0) -> str:
    """Verdict on the existence of a stationary state from M_lambda along the ladder."""
    x = np.log10(np.asarray(x_maxes, dtype=float))
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return INCONCLUSIVE
    if np.all(v == 0.0):
        return EXISTS
    top = x >= x[-1] - 2.0 - 1e-9
    window = v[top]
    if window.size >= 2 and np.all(np.isfinite(window)) and window.max() > 0.0:
        if (window.max() - window.min()) / window.max() <= 0.1:
            return EXISTS

    decades = np.diff(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_decade = np.power(v[1:] / v[:-1], 1.0 / decades)
    if np.all(per_decade >= growth_factor):
        return NONEXISTENT
    increments = np.diff(v) / decades
    if v.size >= 3 and np.all(increments > 0.0) and increments[-1] >= 0.8 * increments[0]:
        return NONEXISTENT
    return INCONCLUSIVE


@dataclass(frozen=True)
class ProbeSettings:
    x_maxes: tuple = (1e3, 1e4, 1e5, 1e6)
    deltas: tuple = (1e-1, 1e-2)
    x_min: float = 1e-2
    bins_per_decade: int = 6
    growth_factor: float = 5.0


@dataclass
class ProbeReport:
    lam: float
    verdict: str
    rungs: List[LadderRung]
    zero_solution: bool = False
    growth_factor: float = 5.0

    @property
    def expected(self) -> str:
        # phi == 0 is stationary for every kernel when nothing is injected
        if self.zero_solution:
            return EXISTS
        return NONEXISTENT if self.lam >= 1.0 else EXISTS

    @property
    def matches_expectation(self) -> bool:
        return self.verdict == self.expected

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "verdict": self.verdict, "expected": self.expected,
                "zero_solution": self.zero_solution, "growth_factor": self.growth_factor,
                "rungs": [r.to_dict() for r in self.rungs]}


def nonexistence_probe(kernel: Kernel, source: SourceSpec, probe: ProbeSettings, params: EvolveParams,
                       settings: Optional[DiagnosticSettings] = None) -> ProbeReport:
    """Track M_lambda at the smallest delta while x_max grows and classify the trend."""
    lam = float(getattr(kernel, "lam"))
    rungs = domain_ladder(kernel, source, probe.x_maxes, probe.deltas, probe.x_min,
                          probe.bins_per_decade, params, settings=settings)
    key = f"{lam:g}"
    values = [math.inf if r.blew_up else r.moments[key] for r in rungs]
    zero = source.family == "zero" and all(v == 0.0 for v in values)
    unsettled = [r.x_max for r in rungs if not (r.converged or r.blew_up)]
    if zero:
        verdict = EXISTS
    elif unsettled:
        logger.warning("probe at lambda=%g: no steady state on x_max=%s", lam, unsettled)
        verdict = INCONCLUSIVE
    else:
        verdict = classify_ladder([r.x_max for r in rungs], values, probe.growth_factor)
    if verdict == INCONCLUSIVE:
        logger.warning("probe at lambda=%g is inconclusive: %s", lam, values)
    return ProbeReport(lam=lam, verdict=verdict, rungs=rungs, zero_solution=zero,
                       growth_factor=probe.growth_factor)


@dataclass
class IntegrabilityReport:
    lam: float
    saturating_order: float
    critical_order: float
    x_maxes: List[float]
    saturating: List[float]
    critical: List[float]
    saturation_tol: float = 0.05

    @staticmethod
    def _last_change(values: List[float]) -> float:
        a, b = values[-2], values[-1]
        return abs(b - a) / abs(a) if a != 0.0 else math.inf

    @property
    def saturating_change(self) -> float:
        return self._last_change(self.saturating)

    @property
    def critical_change(self) -> float:
        return self._last_change(self.critical)

    @property
    def saturates(self) -> bool:
        return self.saturating_change <= self.saturation_tol

    @property
    def grows(self) -> bool:
        return all(b > a for a, b in zip(self.critical, self.critical[1:]))

    @property
    def passed(self) -> bool:
        return self.saturates and self.grows

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "saturating_order": self.saturating_order,
                "critical_order": self.critical_order, "x_maxes": self.x_maxes,
                "saturating": self.saturating, "critical": self.critical,
                "saturating_change": self.saturating_change, "critical_change": self.critical_change,
                "saturates": self.saturates, "grows": self.grows, "pass": self.passed}


def integrability_probe(kernel: Kernel, source: SourceSpec, x_maxes: Sequence[float],
                        deltas: Sequence[float], x_min: float, bins_per_decade: int,
                        params: EvolveParams, settings: Optional[DiagnosticSettings] = None) -> IntegrabilityReport:
    """M_mu saturates for mu = (1+lam)/2 - 0.1 while M_(1+lam)/2 keeps growing with x_max."""
    lam = float(getattr(kernel, "lam"))
    if lam >= 1.0:
        raise DomainError("the integrability ladder needs lambda < 1")
    if len(x_maxes) < 2:
        raise DomainError("the integrability ladder needs at least two rungs")
    critical = (1.0 + lam) / 2.0
    saturating = critical - 0.1
    rungs = domain_ladder(kernel, source, x_maxes, deltas, x_min, bins_per_decade, params,
                          orders=(saturating, critical), settings=settings)
    return IntegrabilityReport(
        lam=lam,
        saturating_order=saturating,
        critical_order=critical,
        x_maxes=[r.x_max for r in rungs],
        saturating=[r.moments[f"{saturating:g}"] for r in rungs],
        critical=[r.moments[f"{critical:g}"] for r in rungs],
    )
