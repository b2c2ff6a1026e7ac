"""Grids, probability weights, Gaussian densities and trapezoid quadrature.

Everything here is pure and deterministic: uniform source grids carrying
renormalized Gaussian probability weights, uniform channel grids carrying
trapezoid integration weights, and 1D/2D quadrature helpers built on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation

# Channel grids must extend this many noise standard deviations beyond the
# encoder range; evaluation refuses to extrapolate closer than COVERAGE_MARGIN.
GRID_MARGIN_SIGMA = 5.0
COVERAGE_MARGIN_SIGMA = 4.0

DEFAULT_SOURCE_POINTS = 401
DEFAULT_SOURCE_HALF_RANGE = 5.0
DEFAULT_CHANNEL_POINTS = 129


@dataclass(frozen=True)
class SourceGrid:
    """Uniform amplitude grid with a probability weight per point."""

    points: np.ndarray
    weights: np.ndarray
    half_range: float

    @property
    def n(self) -> int:
        return self.points.size

    def second_moment(self) -> float:
        return float(np.dot(self.weights, self.points**2))


@dataclass(frozen=True)
class ChannelGrid:
    """Uniform channel-output grid with trapezoid quadrature weights."""

    points: np.ndarray
    quad_weights: np.ndarray

    @property
    def n(self) -> int:
        return self.points.size

    @property
    def lo(self) -> float:
        return float(self.points[0])

    @property
    def hi(self) -> float:
        return float(self.points[-1])


def build_source_grid(n_points: int, half_range: float, variance: float) -> SourceGrid:
    """Uniform grid over [-half_range*sigma, +half_range*sigma] with weights
    proportional to the Gaussian density, renormalized to sum to one.

    n_points must be odd (>= 3) so that 0 is a grid point.
    """
    if n_points < 3 or n_points % 2 == 0:
        raise ConfigurationError(f"source grid needs an odd point count >= 3, got {n_points}")
    if half_range <= 0:
        raise ConfigurationError(f"half_range must be positive, got {half_range}")
    if variance <= 0:
        raise ConfigurationError(f"variance must be positive, got {variance}")
    sigma = np.sqrt(variance)
    points = np.linspace(-half_range * sigma, half_range * sigma, n_points)
    points[n_points // 2] = 0.0
    weights = gaussian_density(points, variance)
    weights = weights / weights.sum()
    return SourceGrid(points=points, weights=weights, half_range=float(half_range))


def gaussian_density(u, variance: float):
    """Density of a zero-mean normal with the given variance, evaluated at u."""
    if variance <= 0:
        raise ConfigurationError(f"variance must be positive, got {variance}")
    u = np.asarray(u, dtype=float)
    return np.exp(-(u**2) / (2.0 * variance)) / np.sqrt(2.0 * np.pi * variance)


def build_channel_grid(lo: float, hi: float, n_points: int) -> ChannelGrid:
    """Uniform grid on [lo, hi] with trapezoid weights (h at interior, h/2 at ends)."""
    if n_points < 3:
        raise ConfigurationError(f"channel grid needs >= 3 points, got {n_points}")
    if not hi > lo:
        raise ConfigurationError(f"channel grid needs hi > lo, got [{lo}, {hi}]")
    points = np.linspace(lo, hi, n_points)
    h = (hi - lo) / (n_points - 1)
    quad_weights = np.full(n_points, h)
    quad_weights[0] = quad_weights[-1] = h / 2.0
    return ChannelGrid(points=points, quad_weights=quad_weights)


def channel_grid_for_range(max_abs_value: float, noise_variance: float,
                           n_points: int = DEFAULT_CHANNEL_POINTS) -> ChannelGrid:
    """Channel grid spanning +-(max|g| + 5 sigma_N), the rule used before every
    evaluation so decoder tables are never extrapolated."""
    sigma = float(np.sqrt(noise_variance))
    half = float(max_abs_value) + GRID_MARGIN_SIGMA * sigma
    return build_channel_grid(-half, half, n_points)


def covers(grid: ChannelGrid, max_abs_value: float, noise_variance: float) -> bool:
    """True when every point of the encoder range keeps a 4 sigma_N margin
    to both grid edges."""
    sigma = float(np.sqrt(noise_variance))
    margin = COVERAGE_MARGIN_SIGMA * sigma
    return (-max_abs_value >= grid.lo + margin) and (max_abs_value <= grid.hi - margin)


def integrate_1d(values, grid: ChannelGrid) -> float:
    values = np.asarray(values, dtype=float)
    if values.shape != grid.points.shape:
        raise ContractViolation(
            f"integrate_1d: {values.shape} values on a {grid.points.shape} grid")
    return float(np.dot(values, grid.quad_weights))


def integrate_2d(values, g1: ChannelGrid, g2: ChannelGrid) -> float:
    values = np.asarray(values, dtype=float)
    if values.shape != (g1.n, g2.n):
        raise ContractViolation(
            f"integrate_2d: {values.shape} table on a ({g1.n}, {g2.n}) product grid")
    return float(g1.quad_weights @ values @ g2.quad_weights)
