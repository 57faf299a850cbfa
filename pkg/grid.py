"""Geometric size mesh and discrete moments.

Bins are logarithmically spaced; each bin is represented by its log-midpoint
(pivot) ``x_i = sqrt(e_i * e_{i+1})``. Moments are midpoint sums
``sum_i x_i**m * phi_i * dx_i``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from coag_errors import DomainError

logger = logging.getLogger(__name__)

RATIO_RTOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Immutable geometric grid. Build with :func:`build_geometric` or :func:`from_edges`."""

    edges: np.ndarray
    pivots: np.ndarray = field(init=False)
    widths: np.ndarray = field(init=False)
    ratio: float = field(init=False)

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2:
            raise DomainError("a grid needs at least two edges")
        if not np.all(np.isfinite(edges)) or edges[0] <= 0.0:
            raise DomainError("grid edges must be finite and positive")
        if np.any(np.diff(edges) <= 0.0):
            raise DomainError("grid edges must be strictly increasing")
        ratios = edges[1:] / edges[:-1]
        ratio = float(ratios[0])
        if np.any(np.abs(ratios / ratio - 1.0) > RATIO_RTOL):
            raise DomainError("grid edges must have a constant ratio")

        edges.setflags(write=False)
        pivots = np.sqrt(edges[:-1] * edges[1:])
        widths = np.diff(edges)
        pivots.setflags(write=False)
        widths.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "pivots", pivots)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "ratio", ratio)

    @property
    def size(self) -> int:
        return int(self.pivots.size)

    @property
    def x_min(self) -> float:
        return float(self.edges[0])

    @property
    def x_max(self) -> float:
        return float(self.edges[-1])

    @property
    def bins_per_decade(self) -> float:
        return 1.0 / math.log10(self.ratio)

    def mask_at_least(self, x: float) -> np.ndarray:
        """Boolean mask of bins whose pivot is >= x."""
        return self.pivots >= x

    def index_of(self, x: float) -> int:
        """Index of the bin containing x (clipped to the grid)."""
        idx = int(np.searchsorted(self.edges, x, side="right")) - 1
        return min(max(idx, 0), self.size - 1)


def build_geometric(x_min: float, x_max: float, bins_per_decade: int) -> Grid:
    """Grid covering [x_min, x_max] with ``ceil(bpd * log10(x_max/x_min))`` bins.

    Edges are ``x_min * 10**(i/bpd)``, so the last edge is >= x_max and the
    ratio is exactly ``10**(1/bpd)`` up to rounding.

    Raises
    ------
    DomainError
        If the range is empty or not positive, or bins_per_decade < 1.
    """
    if not (0.0 < x_min < x_max) or not math.isfinite(x_max):
        raise DomainError(f"invalid grid range [{x_min}, {x_max}]")
    if int(bins_per_decade) != bins_per_decade or bins_per_decade < 1:
        raise DomainError(f"bins_per_decade must be an integer >= 1, got {bins_per_decade}")
    bpd = int(bins_per_decade)
    decades = math.log10(x_max / x_min)
    # x_max/x_min is rarely an exact power of ten in floating point
    n_bins = max(1, math.ceil(bpd * decades - 1e-9))
    exponents = np.arange(n_bins + 1, dtype=float) / bpd
    edges = x_min * np.power(10.0, exponents)
    logger.debug("geometric grid: %d bins on [%g, %g]", n_bins, edges[0], edges[-1])
    return Grid(edges)


def build_from_pivots(x0: float, ratio: float, n_bins: int) -> Grid:
    """Grid whose first pivot is x0 and whose pivots grow by ``ratio``."""
    if x0 <= 0.0 or ratio <= 1.0 or n_bins < 1:
        raise DomainError("need x0 > 0, ratio > 1 and at least one bin")
    half = math.sqrt(ratio)
    edges = (x0 / half) * np.power(ratio, np.arange(n_bins + 1, dtype=float))
    return Grid(edges)


def from_edges(edges) -> Grid:
    return Grid(np.asarray(edges, dtype=float))


@dataclass(frozen=True)
class SizeDistribution:
    """Number density per unit size at each pivot of a grid."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise DomainError("a size distribution is one-dimensional")
        if np.any(np.isnan(values)):
            raise DomainError("size distribution contains NaN")
        if np.any(values < 0.0):
            raise DomainError("size distribution must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid) -> "SizeDistribution":
        return cls(np.zeros(grid.size))

    def check(self, grid: Grid) -> "SizeDistribution":
        if self.values.size != grid.size:
            raise DomainError(
                f"distribution has {self.values.size} values but the grid has {grid.size} bins"
            )
        return self


def _values(phi) -> np.ndarray:
    if isinstance(phi, SizeDistribution):
        return phi.values
    return np.asarray(phi, dtype=float)


def moment(grid: Grid, phi, m: float) -> float:
    """Discrete moment ``sum_i x_i**m * phi_i * dx_i``."""
    values = _values(phi)
    if values.size != grid.size:
        raise DomainError("distribution and grid are not aligned")
    return float(np.sum(np.power(grid.pivots, m) * values * grid.widths))


def truncated_negative_moment(grid: Grid, phi, m: float) -> dict:
    """Moment of negative order, which only covers sizes down to x_min."""
    return {
        "order": float(m),
        "value": moment(grid, phi, m),
        "truncated_at": grid.x_min,
    }
