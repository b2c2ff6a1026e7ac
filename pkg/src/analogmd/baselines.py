"""Reference schemes the optimizer must beat or match.

For the scalar setting the reference is linear encoding, whose distortions
have closed forms for a Gaussian source on AWGN channels

    d_i = sigma^2 sigma_Ni^2 / (p_i + sigma_Ni^2),
    d0  = sigma^2 / (1 + p1/sigma_N1^2 + p2/sigma_N2^2).

For the paired-symbol setting the reference transmits the two orthonormal
combinations (x1+x2)/sqrt(2) and (x1-x2)/sqrt(2), one per channel.  Both
reference schemes are evaluated twice, in closed form and through the
numerical pipeline, and the two must agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ConsistencyError
from .numerics import (
    DEFAULT_CHANNEL_POINTS,
    DEFAULT_SOURCE_HALF_RANGE,
    DEFAULT_SOURCE_POINTS,
    SourceGrid,
    build_source_grid,
)
from .system import (
    Metrics,
    Mode,
    ScalarMapping,
    SystemConfig,
    evaluate_with_optimal_decoders,
)

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
LAMBDA_BRACKET = (1e-6, 1e3)
LAMBDA_BISECT_ITERS = 40
POWER_MATCH_TOL = 0.01


def linear_distortions(cfg: SystemConfig, p1: float, p2: float) -> tuple[float, float, float]:
    """Closed-form (d0, d1, d2) of linear encoding at design powers (p1, p2)."""
    s2 = cfg.source_variance
    n1, n2 = cfg.noise_variance_1, cfg.noise_variance_2
    d1 = s2 * n1 / (p1 + n1)
    d2 = s2 * n2 / (p2 + n2)
    d0 = s2 / (1.0 + p1 / n1 + p2 / n2)
    return d0, d1, d2


def linear_closed_form(cfg: SystemConfig, p1: float, p2: float) -> Metrics:
    d0, d1, d2 = linear_distortions(cfg, p1, p2)
    return Metrics.from_distortions(d0=d0, d1=d1, d2=d2, p1=p1, p2=p2, cfg=cfg)


def _golden_scalar_min(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol * (1.0 + abs(a) + abs(b)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def linear_power_for_lambda(cfg: SystemConfig) -> tuple[float, float]:
    """Design powers minimizing the closed-form linear cost at cfg.lam.

    Searched in log power per channel (coordinate descent, two passes are
    enough for this smooth objective)."""
    if cfg.lam <= 0:
        raise ConfigurationError("linear_power_for_lambda needs lambda > 0")

    def cost(p1, p2):
        d0, d1, d2 = linear_distortions(cfg, p1, p2)
        eps = cfg.epsilon
        return (1.0 - eps) * d0 + eps * (d1 + d2) + cfg.lam * (p1 + p2)

    lo, hi = math.log(1e-9), math.log(1e9)
    p1 = p2 = 1.0
    for _ in range(4):
        p1 = math.exp(_golden_scalar_min(lambda t: cost(math.exp(t), p2), lo, hi))
        p2 = math.exp(_golden_scalar_min(lambda t: cost(p1, math.exp(t)), lo, hi))
    return p1, p2


def measured_linear_power(cfg: SystemConfig, grid: SourceGrid, p: float) -> float:
    """Grid-measured power of g(x) = sqrt(p) x / sigma_X."""
    return p * grid.second_moment() / cfg.source_variance


def lambda_for_power_target(cfg: SystemConfig, grid: SourceGrid,
                            power_of_lambda=None) -> float:
    """Bisect lambda until the measured power of the lambda-optimal reference
    scheme matches cfg.power_target within 1 percent.

    power_of_lambda maps lambda to the measured max(P1, P2); the default is
    the linear scheme's.  Falls back to the best-found endpoint if the bracket
    does not contain the target."""
    if cfg.power_target is None:
        raise ConfigurationError("lambda_for_power_target needs cfg.power_target")
    target = cfg.power_target

    if power_of_lambda is None:
        def power_of_lambda(lam: float) -> float:
            p1, p2 = linear_power_for_lambda(cfg.with_lam(lam))
            return max(measured_linear_power(cfg, grid, p1),
                       measured_linear_power(cfg, grid, p2))

    lo, hi = LAMBDA_BRACKET
    p_lo, p_hi = power_of_lambda(lo), power_of_lambda(hi)
    if not (p_hi <= target <= p_lo):
        # Power decreases in lambda; pick whichever endpoint comes closer.
        return lo if abs(p_lo - target) <= abs(p_hi - target) else hi
    best = (abs(p_lo - target), lo)
    for _ in range(LAMBDA_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        p_mid = power_of_lambda(mid)
        if abs(p_mid - target) < best[0]:
            best = (abs(p_mid - target), mid)
        if abs(p_mid - target) <= POWER_MATCH_TOL * target:
            return mid
        if p_mid > target:
            lo = mid
        else:
            hi = mid
    return best[1]


def resolve_lambda(cfg: SystemConfig, grid: SourceGrid,
                   power_of_lambda=None) -> SystemConfig:
    """When a power target is set, replace lambda by the bisected value."""
    if cfg.power_target is None:
        return cfg
    lam = lambda_for_power_target(cfg, grid, power_of_lambda)
    return cfg.with_lam(lam)


def linear_coefficients(cfg: SystemConfig, grid: SourceGrid) -> tuple[float, float]:
    """Slopes of the linear scheme at the resolved design powers."""
    if cfg.power_target is not None:
        p1 = p2 = cfg.power_target
    else:
        p1, p2 = linear_power_for_lambda(cfg)
    sigma = math.sqrt(cfg.source_variance)
    return math.sqrt(p1) / sigma, math.sqrt(p2) / sigma


@dataclass(frozen=True)
class LinearSchemeResult:
    mapping: ScalarMapping
    metrics: Metrics
    closed_form: Metrics


def linear_scheme(cfg: SystemConfig, p1: float, p2: float,
                  grid: SourceGrid | None = None,
                  n_channel_points: int = DEFAULT_CHANNEL_POINTS) -> LinearSchemeResult:
    """Linear encoding g_i(x) = sqrt(p_i) x / sigma_X, evaluated both in closed
    form and through the numerical pipeline.  A disagreement beyond 5e-3
    relative on any distortion marks a quadrature misconfiguration."""
    if cfg.mode is not Mode.ONE_TO_ONE:
        raise ConfigurationError("linear_scheme applies to the one-to-one mode")
    if p1 <= 0 or p2 <= 0:
        raise ConfigurationError("linear_scheme needs positive powers")
    if grid is None:
        grid = build_source_grid(DEFAULT_SOURCE_POINTS, DEFAULT_SOURCE_HALF_RANGE,
                                 cfg.source_variance)
    sigma = math.sqrt(cfg.source_variance)
    mapping = ScalarMapping(grid=grid,
                            g1_values=math.sqrt(p1) / sigma * grid.points,
                            g2_values=math.sqrt(p2) / sigma * grid.points)
    metrics = evaluate_with_optimal_decoders(mapping, cfg, n_channel_points)
    closed = linear_closed_form(cfg, p1, p2)
    for name, num, ref in (("d0", metrics.d0, closed.d0),
                           ("d1", metrics.d1, closed.d1),
                           ("d2", metrics.d2, closed.d2)):
        rel = abs(num - ref) / ref
        if rel > 5e-3:
            raise ConsistencyError(
                f"linear scheme: numerical {name}={num} vs closed form {ref} "
                f"({rel:.2e} relative)")
    return LinearSchemeResult(mapping=mapping, metrics=metrics, closed_form=closed)


# ---------------------------------------------------------------------------
# Paired-symbol reference: orthonormal projections, one per channel.


def projection_distortions(cfg: SystemConfig, p: float) -> tuple[float, float, float]:
    """Closed-form per-symbol (d0, d1, d2) of the projection scheme at design
    power p per channel.  Channel i observes one orthonormal combination; the
    other combination is invisible to the side decoder."""
    s2 = cfg.source_variance
    v1 = s2 * cfg.noise_variance_1 / (p + cfg.noise_variance_1)
    v2 = s2 * cfg.noise_variance_2 / (p + cfg.noise_variance_2)
    d0 = 0.5 * (v1 + v2)
    d1 = 0.5 * (v1 + s2)
    d2 = 0.5 * (v2 + s2)
    return d0, d1, d2


def projection_power_for_lambda(cfg: SystemConfig) -> float:
    if cfg.lam <= 0:
        raise ConfigurationError("projection_power_for_lambda needs lambda > 0")

    def cost(p):
        d0, d1, d2 = projection_distortions(cfg, p)
        eps = cfg.epsilon
        return (1.0 - eps) * d0 + eps * (d1 + d2) + cfg.lam * 2.0 * p

    return math.exp(_golden_scalar_min(lambda t: cost(math.exp(t)),
                                       math.log(1e-9), math.log(1e9)))


def projection_coefficient(cfg: SystemConfig, p: float) -> float:
    """c such that g1 = c (x1 + x2), g2 = c (x1 - x2) has design power p."""
    return math.sqrt(p / (2.0 * cfg.source_variance))


def projection_baseline_2to1(cfg: SystemConfig, p: float,
                             source_points: int | None = None,
                             half_range: float | None = None,
                             n_channel_points: int | None = None):
    """Projection reference for the paired-symbol mode, evaluated numerically.

    Returns (mapping, metrics).  The mapping sends the sum combination on
    channel 1 and the difference on channel 2, scaled to design power p."""
    from . import md2to1

    if cfg.mode is not Mode.TWO_TO_ONE:
        raise ConfigurationError("projection_baseline_2to1 applies to the 2:1 mode")
    grid2d = md2to1.build_source_2d_grid(
        source_points or md2to1.DEFAULT_SOURCE_POINTS_2D,
        half_range or md2to1.DEFAULT_HALF_RANGE_2D,
        cfg.source_variance)
    c = projection_coefficient(cfg, p)
    x1 = grid2d.axis.points[:, None]
    x2 = grid2d.axis.points[None, :]
    mapping = md2to1.VectorMapping(grid=grid2d,
                                   g1_values=c * (x1 + x2),
                                   g2_values=c * (x1 - x2))
    metrics = md2to1.evaluate_with_optimal_decoders_2to1(
        mapping, cfg, n_channel_points or md2to1.DEFAULT_CHANNEL_POINTS_2D)
    return mapping, metrics
