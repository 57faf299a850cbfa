"""Coagulation kernels.

Two algebraic families are supported:

``SumPowerKernel``
    k1 (x^lam + y^lam) <= K(x, y) <= k2 (x^lam + y^lam)
``GeneralKernel``
    K bracketed by k1, k2 times x^(gamma+alpha) y^(-alpha) + x^(-alpha) y^(gamma+alpha)

A general kernel is brought back to the sum family by the weight
``(x y)^(-theta)`` with ``theta = min(gamma + alpha, -alpha)``; a stationary
``f`` for ``K`` gives the stationary ``x^theta f`` for the reduced kernel.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from coag_errors import DomainError
from grid import Grid, SizeDistribution

logger = logging.getLogger(__name__)

RateFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

SAMPLE_LOG10_RANGE = (-6.0, 6.0)
CHECK_RTOL = 1e-12


def _check_sizes(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(~(x > 0.0)) or np.any(~(y > 0.0)):
        raise DomainError("kernel sizes must be strictly positive")
    return x, y


def sum_base(x, y, lam: float):
    return np.power(x, lam) + np.power(y, lam)


def product_base(x, y, gamma: float, alpha: float):
    return np.power(x, gamma + alpha) * np.power(y, -alpha) + np.power(x, -alpha) * np.power(y, gamma + alpha)


@dataclass(frozen=True)
class SumPowerKernel:
    """K(x,y) = k (x^lam + y^lam) for ``exact_sum``; a declared evaluator for ``custom``."""

    lam: float
    k1: float
    k2: float
    shape: str = "exact_sum"
    rate_fn: Optional[RateFn] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.lam < 0.0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")
        if not (0.0 < self.k1 <= self.k2):
            raise DomainError(f"need 0 < k1 <= k2, got k1={self.k1}, k2={self.k2}")
        if self.shape == "exact_sum":
            if self.k1 != self.k2:
                raise DomainError("exact_sum kernels have k1 == k2")
        elif self.shape == "custom":
            if self.rate_fn is None:
                raise DomainError("custom kernels need an evaluator")
        else:
            raise DomainError(f"unknown kernel shape {self.shape!r}")

    def base(self, x, y):
        return sum_base(x, y, self.lam)

    def rates(self, x, y):
        """Vectorized K without domain checks; used by the pair table."""
        if self.shape == "exact_sum":
            return self.k1 * sum_base(x, y, self.lam)
        # symmetrized so that K(x,y) == K(y,x) bit for bit
        return 0.5 * (self.rate_fn(x, y) + self.rate_fn(y, x))


@dataclass(frozen=True)
class GeneralKernel:
    """Two-parameter kernel k (x^(g+a) y^(-a) + x^(-a) y^(g+a)), or a custom evaluator."""

    gamma: float
    alpha: float
    k1: float
    k2: float
    rate_fn: Optional[RateFn] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not (0.0 < self.k1 <= self.k2):
            raise DomainError(f"need 0 < k1 <= k2, got k1={self.k1}, k2={self.k2}")
        if self.rate_fn is None and self.k1 != self.k2:
            raise DomainError("the exact product form has k1 == k2; pass an evaluator otherwise")

    def base(self, x, y):
        return product_base(x, y, self.gamma, self.alpha)

    def rates(self, x, y):
        if self.rate_fn is None:
            return self.k1 * product_base(x, y, self.gamma, self.alpha)
        return 0.5 * (self.rate_fn(x, y) + self.rate_fn(y, x))


Kernel = Union[SumPowerKernel, GeneralKernel]


def evaluate(kernel: Kernel, x, y):
    """K(x, y) for scalars or arrays; symmetric bit for bit.

    Raises
    ------
    DomainError
        If any size is not strictly positive.
    """
    x, y = _check_sizes(x, y)
    out = kernel.rates(x, y)
    if np.ndim(out) == 0:
        return float(out)
    return out


def blended_rate_fn(base_fn: Callable, k1: float, k2: float) -> RateFn:
    """Evaluator moving from k1 (small particles) to k2 (large) times the base form."""

    def rate(x, y):
        s = x + y
        return base_fn(x, y) * (k1 + (k2 - k1) * (s / (1.0 + s)))

    return rate


def sum_power(lam: float, k1: float, k2: Optional[float] = None) -> SumPowerKernel:
    k2 = k1 if k2 is None else k2
    if k1 == k2:
        return SumPowerKernel(lam=lam, k1=k1, k2=k2)
    fn = blended_rate_fn(lambda x, y: sum_base(x, y, lam), k1, k2)
    return SumPowerKernel(lam=lam, k1=k1, k2=k2, shape="custom", rate_fn=fn)


def product_power(gamma: float, alpha: float, k1: float, k2: Optional[float] = None) -> GeneralKernel:
    k2 = k1 if k2 is None else k2
    if k1 == k2:
        return GeneralKernel(gamma=gamma, alpha=alpha, k1=k1, k2=k2)
    fn = blended_rate_fn(lambda x, y: product_base(x, y, gamma, alpha), k1, k2)
    return GeneralKernel(gamma=gamma, alpha=alpha, k1=k1, k2=k2, rate_fn=fn)


def kernel_from_config(cfg: dict) -> Kernel:
    """Build a kernel from an already validated ``kernel`` config section."""
    if "k" in cfg:
        k1 = k2 = float(cfg["k"])
    else:
        k1, k2 = float(cfg["k1"]), float(cfg["k2"])
    if cfg["type"] == "sum_power":
        return sum_power(float(cfg["lambda"]), k1, k2)
    return product_power(float(cfg["gamma"]), float(cfg["alpha"]), k1, k2)


@dataclass(frozen=True)
class Reduction:
    theta: float
    reduced_lambda: float
    reduced_kernel: SumPowerKernel


def reduce_general(kernel: GeneralKernel) -> Reduction:
    """theta = min(gamma+alpha, -alpha); reduced kernel (x y)^(-theta) K of degree |gamma + 2 alpha|."""
    theta = min(kernel.gamma + kernel.alpha, -kernel.alpha)
    reduced_lambda = abs(kernel.gamma + 2.0 * kernel.alpha)

    def reduced(x, y):
        return np.power(x * y, -theta) * kernel.rates(x, y)

    reduced_kernel = SumPowerKernel(
        lam=reduced_lambda, k1=kernel.k1, k2=kernel.k2, shape="custom", rate_fn=reduced
    )
    logger.debug("reduced (gamma=%g, alpha=%g) to lambda=%g with theta=%g",
                 kernel.gamma, kernel.alpha, reduced_lambda, theta)
    return Reduction(theta=theta, reduced_lambda=reduced_lambda, reduced_kernel=reduced_kernel)


def transform_solution(phi, grid: Grid, theta: float) -> SizeDistribution:
    """Bin-wise x_i^theta * phi_i."""
    values = phi.values if isinstance(phi, SizeDistribution) else np.asarray(phi, dtype=float)
    if values.size != grid.size:
        raise DomainError("distribution and grid are not aligned")
    if theta == 0.0:
        return SizeDistribution(values.copy())
    return SizeDistribution(np.power(grid.pivots, theta) * values)


def monotonicity_gap(kernel: Kernel, x, y):
    """Relative excess (K(x-y, y) - K(x, y)) / K(x, y) for 0 < y < x; <= 0 means the condition holds."""
    x, y = _check_sizes(x, y)
    if np.any(y >= x):
        raise DomainError("monotonicity is checked for 0 < y < x")
    k_xy = kernel.rates(x, y)
    k_shift = kernel.rates(x - y, y)
    return (k_shift - k_xy) / k_xy


@dataclass
class HypothesisReport:
    samples: int
    min_lower_ratio: float
    max_upper_ratio: float
    worst_monotonicity: float
    worst_transformed_monotonicity: Optional[float] = None

    @property
    def sandwich_pass(self) -> bool:
        return self.min_lower_ratio >= 1.0 - CHECK_RTOL and self.max_upper_ratio <= 1.0 + CHECK_RTOL

    @property
    def monotonicity_pass(self) -> bool:
        return self.worst_monotonicity <= CHECK_RTOL

    @property
    def transformed_pass(self) -> Optional[bool]:
        if self.worst_transformed_monotonicity is None:
            return None
        return self.worst_transformed_monotonicity <= CHECK_RTOL

    @property
    def passed(self) -> bool:
        # general kernels only need monotonicity after the (x y)^(-theta) reduction
        if self.worst_transformed_monotonicity is not None:
            return self.sandwich_pass and bool(self.transformed_pass)
        return self.sandwich_pass and self.monotonicity_pass

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "min_lower_ratio": self.min_lower_ratio,
            "max_upper_ratio": self.max_upper_ratio,
            "worst_monotonicity": self.worst_monotonicity,
            "worst_transformed_monotonicity": self.worst_transformed_monotonicity,
            "sandwich_pass": self.sandwich_pass,
            "monotonicity_pass": self.monotonicity_pass,
            "transformed_pass": self.transformed_pass,
            "pass": self.passed,
        }


def verify_hypotheses(kernel: Kernel, sample_count: int, seed: int) -> HypothesisReport:
    """Sample the bound sandwich and the monotonicity condition log-uniformly on [1e-6, 1e6]^2."""
    if sample_count < 1:
        raise DomainError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = SAMPLE_LOG10_RANGE
    x = np.power(10.0, rng.uniform(lo, hi, sample_count))
    y = np.power(10.0, rng.uniform(lo, hi, sample_count))

    k_xy = kernel.rates(x, y)
    base = kernel.base(x, y)
    lower = k_xy / (kernel.k1 * base)
    upper = k_xy / (kernel.k2 * base)

    # monotonicity needs 0 < y < x
    xm = np.power(10.0, rng.uniform(lo, hi, sample_count))
    ym = xm * np.power(10.0, rng.uniform(-6.0, 0.0, sample_count))
    ym = np.minimum(ym, np.nextafter(xm, 0.0))
    gaps = monotonicity_gap(kernel, xm, ym)

    transformed = None
    if isinstance(kernel, GeneralKernel):
        theta = reduce_general(kernel).theta
        w_shift = np.power(xm - ym, -theta) * kernel.rates(xm - ym, ym)
        w_full = np.power(xm, -theta) * kernel.rates(xm, ym)
        transformed = float(np.max((w_shift - w_full) / w_full))

    report = HypothesisReport(
        samples=int(sample_count),
        min_lower_ratio=float(np.min(lower)),
        max_upper_ratio=float(np.max(upper)),
        worst_monotonicity=float(np.max(gaps)),
        worst_transformed_monotonicity=transformed,
    )
    if not report.passed:
        logger.warning("kernel hypotheses fail on samples: %s", report.to_dict())
    return report
