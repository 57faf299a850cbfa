"""Discrete coagulation operator on a geometric grid (fixed-pivot allocation).

A pair of bins (i, j) coalesces at rate ``R_ij = 1/2 K_ij phi_i phi_j dx_i dx_j``
(number per unit time, both orderings counted). The product of size
``s = x_i + x_j`` is split between the neighbouring pivots ``x_k <= s < x_k+1``
so that number and mass are both conserved. Pairs whose sum lies above the
last pivot leave the domain and are booked as overflow.

With this allocation the discrete weak identity

    sum_i theta_i dphi_i dx_i = weak_form(theta) - sum_overflow R_ij theta_over_ij

holds exactly for every per-bin theta.

The pair loop runs over fixed blocks of rows. Workers evaluate blocks, and the
partial sums are added in block order, so the result does not depend on the
worker count.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from coag_errors import DomainError
from grid import Grid, SizeDistribution
from kernels import Kernel
from sources import SourceSpec, bin_averages

logger = logging.getLogger(__name__)

BLOCK_ROWS = 32
SNAP_RTOL = 1e-13


@lru_cache(maxsize=None)
def _executor(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="coag")


def default_workers() -> int:
    """Worker count from COAGSTAT_THREADS (default 1)."""
    try:
        return max(1, int(os.getenv("COAGSTAT_THREADS", "1")))
    except ValueError:
        logger.warning("ignoring non-integer COAGSTAT_THREADS=%r", os.getenv("COAGSTAT_THREADS"))
        return 1


@dataclass(frozen=True)
class _Block:
    rows: slice
    inside: np.ndarray      # bool mask over the block's pairs
    target: np.ndarray      # k for the inside pairs, row-major
    w_lo: np.ndarray
    w_hi: np.ndarray


@dataclass(frozen=True)
class PairTable:
    """Precomputed pair data: rates K_ij, targets, splitting weights, overflow marks."""

    rates: np.ndarray
    sums: np.ndarray
    target: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    overflow: np.ndarray
    blocks: Tuple[_Block, ...] = field(repr=False)
    workers: int = 1

    @property
    def size(self) -> int:
        return int(self.rates.shape[0])

    def with_workers(self, workers: int) -> "PairTable":
        return PairTable(self.rates, self.sums, self.target, self.w_lo, self.w_hi,
                         self.overflow, self.blocks, max(1, int(workers)))

    def map_blocks(self, fn: Callable[[_Block], object]) -> List[object]:
        if self.workers <= 1 or len(self.blocks) <= 1:
            return [fn(block) for block in self.blocks]
        return list(_executor(self.workers).map(fn, self.blocks))


def build_pair_table(kernel: Kernel, grid: Grid, workers: Optional[int] = None) -> PairTable:
    """Allocation table for every ordered pair of bins; symmetric in (i, j)."""
    x = grid.pivots
    n = grid.size
    xi = x[:, None]
    xj = x[None, :]
    rates = np.asarray(kernel.rates(np.broadcast_to(xi, (n, n)), np.broadcast_to(xj, (n, n))), dtype=float)
    if np.any(~np.isfinite(rates)) or np.any(rates < 0.0):
        raise DomainError("kernel rates on the grid must be finite and non-negative")
    sums = xi + xj

    overflow = sums > x[-1] * (1.0 + SNAP_RTOL)
    k = np.searchsorted(x, sums * (1.0 + SNAP_RTOL), side="right") - 1
    k = np.clip(k, 0, max(n - 2, 0))
    target = np.where(overflow, -1, k)

    w_lo = np.zeros((n, n))
    w_hi = np.zeros((n, n))
    if n >= 2:
        inside = ~overflow
        x_lo = x[k]
        x_hi = x[np.minimum(k + 1, n - 1)]
        w = np.clip((x_hi - sums) / (x_hi - x_lo), 0.0, 1.0)
        w_lo = np.where(inside, w, 0.0)
        w_hi = np.where(inside, 1.0 - w, 0.0)

    blocks = []
    for r0 in range(0, n, BLOCK_ROWS):
        rows = slice(r0, min(r0 + BLOCK_ROWS, n))
        inside = ~overflow[rows]
        blocks.append(_Block(rows=rows, inside=inside, target=target[rows][inside],
                             w_lo=w_lo[rows][inside], w_hi=w_hi[rows][inside]))

    for arr in (rates, sums, target, w_lo, w_hi, overflow):
        arr.setflags(write=False)
    logger.debug("pair table: %d bins, %d overflow pairs", n, int(overflow.sum()))
    return PairTable(rates=rates, sums=sums, target=target, w_lo=w_lo, w_hi=w_hi,
                     overflow=overflow, blocks=tuple(blocks),
                     workers=default_workers() if workers is None else max(1, int(workers)))


def _values(phi) -> np.ndarray:
    if isinstance(phi, SizeDistribution):
        return phi.values
    return np.asarray(phi, dtype=float)


@dataclass
class OperatorRates:
    """Result of :func:`apply`. ``dphi = gain - loss`` per bin."""

    dphi: np.ndarray
    gain: np.ndarray
    loss: np.ndarray
    loss_rate: np.ndarray
    overflow_number: float
    overflow_mass: float
    pair_number: float  # 1/2 sum_ij K phi phi dx dx over all pairs

    def __iter__(self):
        return iter((self.dphi, self.overflow_number, self.overflow_mass))


def apply(table: PairTable, grid: Grid, phi) -> OperatorRates:
    """Evaluate the coagulation operator C phi on the grid."""
    values = _values(phi)
    n = grid.size
    v = values * grid.widths

    def block_terms(block: _Block):
        kb = table.rates[block.rows]
        loss_rate = np.sum(kb * v[None, :], axis=1)
        pair = 0.5 * kb * v[block.rows, None] * v[None, :]
        inner = pair[block.inside]
        gain = np.bincount(block.target, weights=inner * block.w_lo, minlength=n)
        if block.target.size:
            gain = gain + np.bincount(block.target + 1, weights=inner * block.w_hi, minlength=n)[:n]
        outer = ~block.inside
        over_number = float(np.sum(pair[outer]))
        over_mass = float(np.sum((pair * table.sums[block.rows])[outer]))
        return loss_rate, gain, over_number, over_mass, float(np.sum(pair))

    parts = table.map_blocks(block_terms)

    loss_rate = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
    gain_number = np.zeros(n)
    over_number = 0.0
    over_mass = 0.0
    pair_number = 0.0
    for _, gain, on, om, pn in parts:
        gain_number = gain_number + gain
        over_number += on
        over_mass += om
        pair_number += pn

    gain_density = gain_number / grid.widths
    loss = values * loss_rate
    return OperatorRates(
        dphi=gain_density - loss,
        gain=gain_density,
        loss=loss,
        loss_rate=loss_rate,
        overflow_number=over_number,
        overflow_mass=over_mass,
        pair_number=pair_number,
    )


@dataclass(frozen=True)
class TestFunction:
    """Test function theta with its value on overflow pairs.

    ``overflow="killed"`` gives theta = 0 beyond the domain; ``"natural"``
    evaluates theta at x_i + x_j.
    """

    __test__ = False  # not a pytest class

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    overflow: str = "killed"

    def values(self, grid: Grid) -> np.ndarray:
        return np.asarray(self.fn(grid.pivots), dtype=float) * np.ones(grid.size)

    def overflow_values(self, table: PairTable):
        if self.overflow == "killed":
            return 0.0
        if self.overflow == "natural":
            return np.asarray(self.fn(table.sums), dtype=float) * np.ones_like(table.sums)
        raise DomainError(f"unknown overflow rule {self.overflow!r}")


ThetaLike = Union[TestFunction, np.ndarray]


def _theta_arrays(table: PairTable, grid: Grid, theta: ThetaLike, theta_overflow):
    if isinstance(theta, TestFunction):
        return theta.values(grid), theta.overflow_values(table)
    values = np.asarray(theta, dtype=float)
    if values.size != grid.size:
        raise DomainError("test function and grid are not aligned")
    return values, (0.0 if theta_overflow is None else theta_overflow)


def weak_form(table: PairTable, grid: Grid, phi, theta: ThetaLike, theta_overflow=None) -> float:
    """1/2 sum_ij chi_theta(i, j) K_ij phi_i phi_j dx_i dx_j.

    theta at x_i + x_j is the split value w_lo theta_k + w_hi theta_k+1 for
    allocated pairs and the declared boundary value for overflow pairs.
    """
    th, th_over = _theta_arrays(table, grid, theta, theta_overflow)
    v = _values(phi) * grid.widths
    over = np.broadcast_to(np.asarray(th_over, dtype=float), table.rates.shape)
    n = grid.size
    th_next = np.append(th[1:], 0.0) if n else th

    def block_sum(block: _Block) -> float:
        pair = 0.5 * table.rates[block.rows] * v[block.rows, None] * v[None, :]
        merged = np.array(over[block.rows], dtype=float)
        merged[block.inside] = block.w_lo * th[block.target] + block.w_hi * th_next[block.target]
        chi = merged - th[block.rows, None] - th[None, :]
        return float(np.sum(chi * pair))

    total = 0.0
    for part in table.map_blocks(block_sum):
        total += part
    return total


def overflow_term(table: PairTable, grid: Grid, phi, theta: ThetaLike, theta_overflow=None) -> float:
    """sum over overflow pairs of R_ij theta_over_ij."""
    _, th_over = _theta_arrays(table, grid, theta, theta_overflow)
    v = _values(phi) * grid.widths
    pair = 0.5 * table.rates * v[:, None] * v[None, :]
    over = np.broadcast_to(np.asarray(th_over, dtype=float), table.rates.shape)
    return float(np.sum((pair * over)[table.overflow]))


def weak_identity_gap(table: PairTable, grid: Grid, phi, theta: ThetaLike, theta_overflow=None) -> dict:
    """Both sides of the discrete weak identity and a scale for relative comparison."""
    th, _ = _theta_arrays(table, grid, theta, theta_overflow)
    rates = apply(table, grid, phi)
    lhs = float(np.sum(th * rates.dphi * grid.widths))
    rhs = weak_form(table, grid, phi, theta, theta_overflow) - overflow_term(table, grid, phi, theta, theta_overflow)
    scale = float(np.sum(np.abs(th) * (rates.gain + rates.loss) * grid.widths)) + abs(rhs)
    return {"lhs": lhs, "rhs": rhs, "scale": scale}


@dataclass(frozen=True)
class DiscreteProblem:
    """Everything one regularized steady problem needs: grid, table, S_delta on the grid, delta."""

    kernel: Kernel
    source: SourceSpec
    grid: Grid
    table: PairTable
    delta: float
    source_rates: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, kernel: Kernel, source: SourceSpec, grid: Grid, delta: float,
              table: Optional[PairTable] = None, workers: Optional[int] = None) -> "DiscreteProblem":
        if not (0.0 < delta < 1.0):
            raise DomainError(f"delta must lie in (0, 1), got {delta}")
        truncated = source.truncated(delta)
        table = table if table is not None else build_pair_table(kernel, grid, workers)
        return cls(kernel=kernel, source=truncated, grid=grid, table=table, delta=float(delta),
                   source_rates=bin_averages(truncated, grid))

    def with_delta(self, delta: float) -> "DiscreteProblem":
        return DiscreteProblem.build(self.kernel, self.source, self.grid, delta, table=self.table)

    @property
    def lam(self) -> float:
        if not hasattr(self.kernel, "lam"):
            raise DomainError("general kernels are solved through their reduction")
        return float(self.kernel.lam)

    def time_derivative(self, phi) -> Tuple[np.ndarray, OperatorRates]:
        """dphi/dt of the regularized equation: C phi + S_delta - 2 delta phi."""
        rates = apply(self.table, self.grid, phi)
        values = _values(phi)
        return rates.dphi + self.source_rates - 2.0 * self.delta * values, rates

    def weighted_residual(self, phi, dphidt: np.ndarray) -> float:
        """max_i |dphi_i/dt| (1 + x_i^lam) dx_i / (M_0 + M_lam + eps)."""
        values = _values(phi)
        weight = (1.0 + np.power(self.grid.pivots, self.lam)) * self.grid.widths
        m0 = float(np.sum(values * self.grid.widths))
        mlam = float(np.sum(np.power(self.grid.pivots, self.lam) * values * self.grid.widths))
        if dphidt.size == 0:
            return 0.0
        return float(np.max(np.abs(dphidt) * weight)) / (m0 + mlam + np.finfo(float).eps)
