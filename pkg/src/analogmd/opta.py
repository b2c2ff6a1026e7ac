"""Information-theoretic distortion bounds for the two-description Gaussian
problem, and the minimum weighted cost over the achievable region.

With powers p_i and bandwidth ratios beta_i, the side distortions satisfy
sigma^2 >= d_i >= sigma^2 (1+p_i)^(-beta_i).  Given feasible (d1, d2), the best
central distortion is nu = sigma^2 (1+p1)^(-beta1) (1+p2)^(-beta2) when
d1 + d2 is large enough, and nu * phi otherwise, where phi >= 1 is the
excess factor determined by how tightly the side distortions squeeze the
joint description.  All internal algebra is carried out on distortions
normalized by sigma^2, which keeps the expressions scale-invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigurationError, DomainError

_SLACK = 1e-12
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class OptaQuery:
    p1: float
    p2: float
    beta1: float = 1.0
    beta2: float = 1.0
    sigma2: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        if self.p1 <= 0 or self.p2 <= 0:
            raise ConfigurationError("powers must be positive")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ConfigurationError("bandwidth ratios must be positive")
        if self.sigma2 <= 0:
            raise ConfigurationError("sigma2 must be positive")
        if not 0.0 <= self.epsilon <= 0.5:
            raise ConfigurationError(f"epsilon must lie in [0, 0.5], got {self.epsilon}")

    @property
    def nu_normalized(self) -> float:
        return (1.0 + self.p1) ** (-self.beta1) * (1.0 + self.p2) ** (-self.beta2)


@dataclass(frozen=True)
class OptaPoint:
    d1: float
    d2: float
    d0: float
    nu: float
    phi: float
    d_total: float
    snr_db: float


def opta_side_bound(p: float, beta: float, sigma2: float = 1.0) -> float:
    """Lower bound on one side distortion: sigma^2 (1+p)^(-beta)."""
    if p < 0 or beta <= 0 or sigma2 <= 0:
        raise ConfigurationError("opta_side_bound needs p >= 0, beta > 0, sigma2 > 0")
    return sigma2 * (1.0 + p) ** (-beta)


def _clamped_sqrt(arg: float, what: str) -> float:
    if arg < -_SLACK:
        raise DomainError(f"{what}: square-root argument {arg} below feasibility")
    return math.sqrt(max(arg, 0.0))


def opta_central(d1: float, d2: float, q: OptaQuery) -> tuple[float, float, float]:
    """Best central distortion for feasible side distortions (d1, d2).

    Returns (d0, nu, phi); phi is reported as 1 in the high-sum regime where
    the central bound nu is reachable outright.
    """
    s2 = q.sigma2
    lb1 = opta_side_bound(q.p1, q.beta1, s2)
    lb2 = opta_side_bound(q.p2, q.beta2, s2)
    if not (lb1 - _SLACK <= d1 <= s2 + _SLACK) or not (lb2 - _SLACK <= d2 <= s2 + _SLACK):
        raise DomainError(
            f"side distortions ({d1}, {d2}) outside feasible bounds "
            f"[{lb1}, {s2}] x [{lb2}, {s2}]")
    nu_hat = q.nu_normalized
    nu = s2 * nu_hat
    e1, e2 = d1 / s2, d2 / s2
    if e1 * e2 < nu_hat - _SLACK:
        raise DomainError(f"product {e1 * e2} below the joint feasibility floor {nu_hat}")
    if e1 + e2 > 1.0 + nu_hat:
        return nu, nu, 1.0
    root = (_clamped_sqrt((1.0 - e1) * (1.0 - e2), "opta_central")
            - _clamped_sqrt(e1 * e2 - nu_hat, "opta_central"))
    den = 1.0 - root * root
    if den <= 0.0:
        raise DomainError(
            f"degenerate excess factor at (d1={d1}, d2={d2}, nu={nu}): denominator {den}")
    phi = 1.0 / den
    return nu * phi, nu, phi


def _cost(d1: float, d2: float, q: OptaQuery) -> float:
    d0, _, _ = opta_central(d1, d2, q)
    return (1.0 - q.epsilon) * d0 + q.epsilon * (d1 + d2)


def _golden_min(f, lo: float, hi: float, tol: float) -> tuple[float, float]:
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
    return (c, fc) if fc <= fd else (d, fd)


def _log_spaced(lo: float, hi: float, n: int) -> list[float]:
    ratio = (hi / lo) ** (1.0 / (n - 1))
    pts = [lo * ratio**i for i in range(n)]
    pts[-1] = hi
    return pts


def opta_min_cost(q: OptaQuery, grid_points: int = 200) -> OptaPoint:
    """Minimize (1-eps) d0(d1,d2) + eps (d1+d2) over the feasible rectangle.

    Coarse log-spaced grid search followed by coordinate-wise golden-section
    refinement; symmetric queries additionally run a diagonal search and the
    better of the two results wins.
    """
    s2 = q.sigma2
    lb1 = opta_side_bound(q.p1, q.beta1, s2)
    lb2 = opta_side_bound(q.p2, q.beta2, s2)
    grid1 = _log_spaced(lb1, s2, grid_points)
    grid2 = _log_spaced(lb2, s2, grid_points)

    best = (math.inf, lb1, lb2)
    for d1 in grid1:
        for d2 in grid2:
            c = _cost(d1, d2, q)
            if c < best[0]:
                best = (c, d1, d2)
    best_cost, best_d1, best_d2 = best

    def bracket(grid, value):
        i = min(range(len(grid)), key=lambda j: abs(grid[j] - value))
        return grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]

    for _ in range(60):
        lo, hi = bracket(grid1, best_d1)
        d1, _c = _golden_min(lambda v: _cost(v, best_d2, q), lo, hi, 1e-13)
        if _c < best_cost:
            best_cost, best_d1 = _c, d1
        lo, hi = bracket(grid2, best_d2)
        d2, _c = _golden_min(lambda v: _cost(best_d1, v, q), lo, hi, 1e-13)
        if _c < best_cost - 1e-10 * (1.0 + abs(best_cost)):
            best_cost, best_d2 = _c, d2
        elif _c < best_cost:
            best_cost, best_d2 = _c, d2
            break
        else:
            break

    symmetric = (q.p1 == q.p2 and q.beta1 == q.beta2)
    if symmetric:
        d_diag, c_diag = _golden_min(lambda v: _cost(v, v, q), lb1, s2, 1e-14)
        # The diagonal wins ties: the off-diagonal 2D result is never better for
        # a symmetric objective, and a flat optimum should report d1 == d2.
        if c_diag <= best_cost * (1.0 + 1e-12) + 1e-300:
            best_cost, best_d1, best_d2 = c_diag, d_diag, d_diag

    d0, nu, phi = opta_central(best_d1, best_d2, q)
    d_total = (1.0 - q.epsilon) * d0 + q.epsilon * (best_d1 + best_d2)
    snr_db = 10.0 * math.log10(s2 / d_total)
    return OptaPoint(d1=best_d1, d2=best_d2, d0=d0, nu=nu, phi=phi,
                     d_total=d_total, snr_db=snr_db)
