"""System configuration, grid-sampled encoder pairs, and cost evaluation.

The channel model is two parallel AWGN channels that each fail independently
with probability epsilon.  The figure of merit combines the central-decoder
MSE d0 (both channels up) with the side-decoder MSEs d1, d2:

    d_total = (1 - epsilon) * d0 + epsilon * (d1 + d2)
    j_cost  = d_total + lambda * (p1 + p2)

where p_i is the mean transmitted power on channel i.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation, EvaluationError
from .numerics import (
    ChannelGrid,
    SourceGrid,
    channel_grid_for_range,
    covers,
    gaussian_density,
)


class Mode(enum.Enum):
    ONE_TO_ONE = "1to1"
    TWO_TO_ONE = "2to1"


@dataclass(frozen=True)
class SystemConfig:
    source_variance: float = 1.0
    noise_variance_1: float = 1.0
    noise_variance_2: float = 1.0
    epsilon: float = 0.01
    lam: float = 0.0
    mode: Mode = Mode.ONE_TO_ONE
    power_target: float | None = None

    def __post_init__(self):
        if self.source_variance <= 0:
            raise ConfigurationError(f"source_variance must be positive, got {self.source_variance}")
        if self.noise_variance_1 <= 0 or self.noise_variance_2 <= 0:
            raise ConfigurationError("noise variances must be positive")
        if not 0.0 <= self.epsilon <= 0.5:
            raise ConfigurationError(
                f"epsilon must lie in [0, 0.5], got {self.epsilon}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be nonnegative, got {self.lam}")
        if self.power_target is not None and self.power_target <= 0:
            raise ConfigurationError(f"power_target must be positive, got {self.power_target}")

    def with_lam(self, lam: float) -> "SystemConfig":
        return SystemConfig(self.source_variance, self.noise_variance_1,
                            self.noise_variance_2, self.epsilon, lam,
                            self.mode, self.power_target)


@dataclass
class ScalarMapping:
    """Encoder pair sampled on a source grid: g_i(x_k) for each grid point."""

    grid: SourceGrid
    g1_values: np.ndarray
    g2_values: np.ndarray

    def __post_init__(self):
        self.g1_values = np.asarray(self.g1_values, dtype=float)
        self.g2_values = np.asarray(self.g2_values, dtype=float)
        n = self.grid.n
        if self.g1_values.shape != (n,) or self.g2_values.shape != (n,):
            raise ContractViolation("mapping value arrays must match the source grid")
        if not (np.all(np.isfinite(self.g1_values)) and np.all(np.isfinite(self.g2_values))):
            raise ContractViolation("mapping values must be finite")

    def max_abs(self, channel: int) -> float:
        values = self.g1_values if channel == 1 else self.g2_values
        return float(np.max(np.abs(values))) if values.size else 0.0


@dataclass(frozen=True)
class Metrics:
    d0: float
    d1: float
    d2: float
    p1: float
    p2: float
    d_total: float
    j_cost: float
    snr_db: float
    epsilon: float
    lam: float

    @staticmethod
    def from_distortions(d0: float, d1: float, d2: float, p1: float, p2: float,
                         cfg: SystemConfig) -> "Metrics":
        d_total = (1.0 - cfg.epsilon) * d0 + cfg.epsilon * (d1 + d2)
        j_cost = d_total + cfg.lam * (p1 + p2)
        snr_db = 10.0 * math.log10(cfg.source_variance / d_total)
        return Metrics(d0=d0, d1=d1, d2=d2, p1=p1, p2=p2, d_total=d_total,
                       j_cost=j_cost, snr_db=snr_db, epsilon=cfg.epsilon, lam=cfg.lam)


def transmission_power(mapping: ScalarMapping) -> tuple[float, float]:
    """Mean squared channel amplitude per channel: sum_k p_k g_i(x_k)^2."""
    p = mapping.grid.weights
    return (float(np.dot(p, mapping.g1_values**2)),
            float(np.dot(p, mapping.g2_values**2)))


def channel_grids_for(mapping: ScalarMapping, cfg: SystemConfig,
                      n_points: int | None = None) -> tuple[ChannelGrid, ChannelGrid]:
    """Fresh channel grids spanning the mapping range plus the 5 sigma margin."""
    from .numerics import DEFAULT_CHANNEL_POINTS
    n = DEFAULT_CHANNEL_POINTS if n_points is None else n_points
    return (channel_grid_for_range(mapping.max_abs(1), cfg.noise_variance_1, n),
            channel_grid_for_range(mapping.max_abs(2), cfg.noise_variance_2, n))


def _check_coverage(mapping: ScalarMapping, decoders, cfg: SystemConfig) -> None:
    if not covers(decoders.grid1, mapping.max_abs(1), cfg.noise_variance_1):
        raise EvaluationError(
            "channel-1 grid does not cover the mapping range with a 4 sigma margin")
    if not covers(decoders.grid2, mapping.max_abs(2), cfg.noise_variance_2):
        raise EvaluationError(
            "channel-2 grid does not cover the mapping range with a 4 sigma margin")


def evaluate_system(mapping: ScalarMapping, decoders, cfg: SystemConfig) -> Metrics:
    """Distortions, powers and cost of an encoder pair under given decoder tables.

    Side distortions integrate (x_k - w_i(y))^2 against the channel transition
    density; the central distortion integrates against the product density on
    the channel-output plane.  All integrals use the decoder tables' grids.
    """
    _check_coverage(mapping, decoders, cfg)
    x = mapping.grid.points
    p = mapping.grid.weights
    g1, g2 = decoders.grid1, decoders.grid2

    # A_i[k, j] = quad_weight_j * density(y_j - g_i(x_k)); rows integrate to ~1.
    # Sub-normal tail values are flushed to 0: they are far below quadrature
    # accuracy and would drag every product onto the x86 denormal slow path.
    a1 = gaussian_density(g1.points[None, :] - mapping.g1_values[:, None],
                          cfg.noise_variance_1) * g1.quad_weights[None, :]
    a2 = gaussian_density(g2.points[None, :] - mapping.g2_values[:, None],
                          cfg.noise_variance_2) * g2.quad_weights[None, :]
    a1[a1 < 1e-139] = 0.0
    a2[a2 < 1e-139] = 0.0

    d1 = _side_distortion(x, p, a1, decoders.w1)
    d2 = _side_distortion(x, p, a2, decoders.w2)

    w0 = decoders.w0
    s0 = w0 * w0
    mass1 = a1.sum(axis=1)
    mass2 = a2.sum(axis=1)
    # Per-point bilinear forms through the central table, batched as two gemms.
    t_lin = a1 @ w0           # (n_src, n2)
    t_sq = a1 @ s0
    cross = np.einsum("kj,kj->k", t_lin, a2)
    sq = np.einsum("kj,kj->k", t_sq, a2)
    d0 = float(np.dot(p, x * x * mass1 * mass2 - 2.0 * x * cross + sq))

    p1, p2 = transmission_power(mapping)
    return Metrics.from_distortions(d0=d0, d1=d1, d2=d2, p1=p1, p2=p2, cfg=cfg)


def _side_distortion(x, p, a, w) -> float:
    mass = a.sum(axis=1)
    first = a @ w
    second = a @ (w * w)
    return float(np.dot(p, x * x * mass - 2.0 * x * first + second))


def evaluate_with_optimal_decoders(mapping: ScalarMapping, cfg: SystemConfig,
                                   n_channel_points: int | None = None) -> Metrics:
    """Rebuild channel grids from the mapping range, derive MMSE decoder tables,
    and evaluate.  This is the standard evaluation path used everywhere."""
    from .decoders import optimal_decoders
    grids = channel_grids_for(mapping, cfg, n_channel_points)
    dec = optimal_decoders(mapping, cfg, grids)
    return evaluate_system(mapping, dec, cfg)


# ---------------------------------------------------------------------------
# File formats: mapping (csv `x,g1,g2`) and metrics (key-value text).

METRICS_KEYS = ("d0", "d1", "d2", "p1", "p2", "d_total", "j_cost", "snr_db",
                "epsilon", "lambda")


def format_mapping(mapping: ScalarMapping) -> str:
    lines = ["x,g1,g2"]
    for x, v1, v2 in zip(mapping.grid.points, mapping.g1_values, mapping.g2_values):
        lines.append(f"{x:.17g},{v1:.17g},{v2:.17g}")
    return "\n".join(lines) + "\n"


def parse_mapping(text: str, grid: SourceGrid) -> ScalarMapping:
    """Parse the `x,g1,g2` format; the x column must match the given grid."""
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != "x,g1,g2":
        raise ConfigurationError("mapping file: line 1: expected header 'x,g1,g2'")
    if len(lines) - 1 != grid.n:
        raise ConfigurationError(
            f"mapping file: {len(lines) - 1} rows for a {grid.n}-point grid")
    g1 = np.empty(grid.n)
    g2 = np.empty(grid.n)
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise ConfigurationError(f"mapping file: line {i}: expected 3 comma-separated values")
        try:
            x, v1, v2 = (float(s) for s in parts)
        except ValueError as exc:
            raise ConfigurationError(f"mapping file: line {i}: {exc}") from None
        k = i - 2
        if abs(x - grid.points[k]) > 1e-9 * (1.0 + abs(grid.points[k])):
            raise ConfigurationError(
                f"mapping file: line {i}: x={x} does not match grid point {grid.points[k]}")
        g1[k], g2[k] = v1, v2
    return ScalarMapping(grid=grid, g1_values=g1, g2_values=g2)


def format_metrics(metrics: Metrics) -> str:
    values = {
        "d0": metrics.d0, "d1": metrics.d1, "d2": metrics.d2,
        "p1": metrics.p1, "p2": metrics.p2, "d_total": metrics.d_total,
        "j_cost": metrics.j_cost, "snr_db": metrics.snr_db,
        "epsilon": metrics.epsilon, "lambda": metrics.lam,
    }
    return "".join(f"{key} = {values[key]:.17g}\n" for key in METRICS_KEYS)


def parse_metrics(text: str) -> Metrics:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"metrics file: line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in METRICS_KEYS:
            raise ConfigurationError(f"metrics file: line {lineno}: unknown key '{key}'")
        try:
            values[key] = float(raw.strip())
        except ValueError:
            raise ConfigurationError(f"metrics file: line {lineno}: bad number '{raw.strip()}'") from None
    missing = [k for k in METRICS_KEYS if k not in values]
    if missing:
        raise ConfigurationError(f"metrics file: missing keys {missing}")
    return Metrics(d0=values["d0"], d1=values["d1"], d2=values["d2"],
                   p1=values["p1"], p2=values["p2"], d_total=values["d_total"],
                   j_cost=values["j_cost"], snr_db=values["snr_db"],
                   epsilon=values["epsilon"], lam=values["lambda"])
