"""MMSE decoder tables for deterministic and randomized encoders.

The side tables hold the conditional-mean estimate per channel-output grid
point; the central table holds it on the product grid.  Posterior weights are
accumulated with straight matrix products for speed; any grid node whose raw
denominator falls below a safe floor (possible at high power, where squared
distances push densities past the double-precision range) is recomputed in
the log domain with max-subtraction.  Only a node where nothing contributes
at all falls back to the prior mean 0 and increments a diagnostics counter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numerics import ChannelGrid
from .system import ScalarMapping, SystemConfig

# Below DEN_RESCUE the gemm denominator is considered unreliable and the node
# is recomputed with max-subtraction.
DEN_RESCUE = 1e-280


@dataclass
class DecoderTable:
    """Side tables w1, w2 and central table w0 with their channel grids."""

    w1: np.ndarray
    w2: np.ndarray
    w0: np.ndarray
    grid1: ChannelGrid
    grid2: ChannelGrid
    fallback_count: int = 0


def _log_norm_const(variance: float) -> float:
    return -0.5 * float(np.log(2.0 * np.pi * variance))


def _likelihoods(y: np.ndarray, u: np.ndarray, variance: float) -> np.ndarray:
    """Density matrix phi(y_j - u_r), atom-major: shape (n_atoms, n_grid).

    Sub-normal values are flushed to exact 0; they carry no probability mass
    worth keeping and would poison every downstream product with the x86
    denormal slow path.  Nodes that lose all mass this way are exactly the
    ones the log-domain rescue recomputes."""
    z = u[:, None] - y[None, :]
    np.square(z, out=z)
    z *= -1.0 / (2.0 * variance)
    z += _log_norm_const(variance)
    tiny = z < -320.0
    np.exp(z, out=z)
    z[tiny] = 0.0
    return z


def _rescue_rows(lw: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, int]:
    """Posterior means from log-weight rows via max-subtraction.

    Rows whose largest log weight is -inf (nothing contributes at all) fall
    back to the prior mean 0 and are counted."""
    m = lw.max(axis=1)
    dead = ~np.isfinite(m)
    shifted = lw - np.where(dead, 0.0, m)[:, None]
    tiny = shifted < -320.0
    e = np.exp(shifted, out=shifted)
    e[tiny] = 0.0
    den = e.sum(axis=1)
    den[dead] = 1.0
    out = (e @ targets) / den[:, None]
    out[dead] = 0.0
    return out, int(dead.sum())


def _side_posterior(lik: np.ndarray, weights: np.ndarray, targets: np.ndarray,
                    log_w: np.ndarray, u: np.ndarray, y: np.ndarray,
                    variance: float, rescue: bool) -> tuple[np.ndarray, int]:
    den = weights @ lik
    num = (weights[:, None] * targets).T @ lik
    table = np.zeros((lik.shape[1], targets.shape[1]))
    ok = den >= DEN_RESCUE
    table[ok] = (num[:, ok] / den[ok]).T
    fallbacks = 0
    flagged = np.flatnonzero(~ok)
    if flagged.size and rescue:
        z = y[flagged, None] - u[None, :]
        lw = log_w[None, :] + z * z / (-2.0 * variance) + _log_norm_const(variance)
        table[flagged], fallbacks = _rescue_rows(lw, targets)
    return table, fallbacks


def _central_posterior(lik1: np.ndarray, lik2: np.ndarray, weights: np.ndarray,
                       targets: np.ndarray, log_w: np.ndarray,
                       u1: np.ndarray, u2: np.ndarray,
                       y1: np.ndarray, y2: np.ndarray,
                       nv1: float, nv2: float, rescue: bool) -> tuple[np.ndarray, int]:
    wl1 = lik1 * weights[:, None]
    den = wl1.T @ lik2
    d = targets.shape[1]
    table = np.zeros((lik1.shape[1], lik2.shape[1], d))
    ok = den >= DEN_RESCUE
    safe_den = np.where(ok, den, 1.0)
    for c in range(d):
        num_c = (wl1 * targets[:, c, None]).T @ lik2
        table[:, :, c] = np.where(ok, num_c / safe_den, 0.0)
    fallbacks = 0
    if not ok.all() and rescue:
        jj, ll = np.nonzero(~ok)
        z1 = y1[:, None] - u1[None, :]
        l1 = log_w[None, :] + z1 * z1 / (-2.0 * nv1) + _log_norm_const(nv1)
        z2 = y2[:, None] - u2[None, :]
        l2 = z2 * z2 / (-2.0 * nv2) + _log_norm_const(nv2)
        chunk = max(1, int(2.0e6 / max(len(weights), 1)))
        for start in range(0, jj.size, chunk):
            sl = slice(start, min(start + chunk, jj.size))
            lw = l1[jj[sl]] + l2[ll[sl]]
            vals, dead = _rescue_rows(lw, targets)
            table[jj[sl], ll[sl]] = vals
            fallbacks += dead
    return table, fallbacks


def posterior_tables(u1: np.ndarray, u2: np.ndarray, weights: np.ndarray,
                     targets: np.ndarray, cfg: SystemConfig,
                     grids: tuple[ChannelGrid, ChannelGrid],
                     lik1: np.ndarray | None = None,
                     lik2: np.ndarray | None = None,
                     rescue: bool = True):
    """Conditional-mean tables for a weighted atom set.

    Each atom r carries channel values (u1_r, u2_r), a probability weight and a
    target vector (the source coordinates to estimate, one or two components).
    Returns (w1, w2, w0, fallback_count) where w_i has shape (n_i, d) and w0
    has shape (n1, n2, d).  lik_i may pass precomputed atom-major density
    matrices of shape (n_atoms, n_i) to avoid rebuilding them.

    rescue=False skips the log-domain recomputation at nodes whose raw
    denominator underflowed and leaves the prior mean 0 there instead.  Such a
    node carries less than DEN_RESCUE of likelihood mass, so the substitution
    is invisible to any integral against the tables; it is meant for the
    optimizer's inner loop, never for reported evaluations.
    """
    u1 = np.asarray(u1, dtype=float).ravel()
    u2 = np.asarray(u2, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if not (u1.shape == u2.shape == weights.shape == (targets.shape[0],)):
        raise ContractViolation("posterior_tables: atom array lengths disagree")
    g1, g2 = grids
    if lik1 is None:
        lik1 = _likelihoods(g1.points, u1, cfg.noise_variance_1)
    if lik2 is None:
        lik2 = _likelihoods(g2.points, u2, cfg.noise_variance_2)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    w1, f1 = _side_posterior(lik1, weights, targets, log_w, u1, g1.points,
                             cfg.noise_variance_1, rescue)
    w2, f2 = _side_posterior(lik2, weights, targets, log_w, u2, g2.points,
                             cfg.noise_variance_2, rescue)
    w0, f0 = _central_posterior(lik1, lik2, weights, targets, log_w, u1, u2,
                                g1.points, g2.points,
                                cfg.noise_variance_1, cfg.noise_variance_2, rescue)
    return w1, w2, w0, f1 + f2 + f0


def optimal_decoders(mapping: ScalarMapping, cfg: SystemConfig,
                     grids: tuple[ChannelGrid, ChannelGrid]) -> DecoderTable:
    """MMSE tables for a deterministic encoder pair sampled on the source grid."""
    w1, w2, w0, fallbacks = posterior_tables(
        mapping.g1_values, mapping.g2_values, mapping.grid.weights,
        mapping.grid.points, cfg, grids)
    return DecoderTable(w1=w1[:, 0], w2=w2[:, 0], w0=w0[:, :, 0],
                        grid1=grids[0], grid2=grids[1], fallback_count=fallbacks)


def randomized_decoders(models, assoc, cfg: SystemConfig,
                        grids: tuple[ChannelGrid, ChannelGrid]) -> DecoderTable:
    """MMSE tables when the encoder draws a local model m with probability
    q(m|k) at source point k.  The central table uses the joint mixture: the
    same model drives both channels."""
    grid = assoc.grid
    u1, u2 = models.channel_values(grid.points)
    n, m = assoc.q.shape
    weights = (grid.weights[:, None] * assoc.q).ravel()
    targets = np.repeat(grid.points, m)
    w1, w2, w0, fallbacks = posterior_tables(
        u1.ravel(), u2.ravel(), weights, targets, cfg, grids)
    return DecoderTable(w1=w1[:, 0], w2=w2[:, 0], w0=w0[:, :, 0],
                        grid1=grids[0], grid2=grids[1], fallback_count=fallbacks)


def logdomain_posterior_tables(u1, u2, weights, targets, cfg: SystemConfig,
                               grids: tuple[ChannelGrid, ChannelGrid]):
    """Reference implementation: every node accumulated in the log domain with
    max-subtraction.  Slow; kept as an oracle for the fast path."""
    u1 = np.asarray(u1, dtype=float).ravel()
    u2 = np.asarray(u2, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    g1, g2 = grids
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    c1 = _log_norm_const(cfg.noise_variance_1)
    c2 = _log_norm_const(cfg.noise_variance_2)
    z1 = g1.points[:, None] - u1[None, :]
    z2 = g2.points[:, None] - u2[None, :]
    l1 = z1 * z1 / (-2.0 * cfg.noise_variance_1) + c1 + log_w[None, :]
    l2 = z2 * z2 / (-2.0 * cfg.noise_variance_2) + c2 + log_w[None, :]
    d = targets.shape[1]
    fallbacks = 0

    def node(lw):
        nonlocal fallbacks
        m = lw.max()
        if not np.isfinite(m):
            fallbacks += 1
            return np.zeros(d)
        e = np.exp(lw - m)
        return (e @ targets) / e.sum()

    w1 = np.stack([node(l1[j]) for j in range(g1.n)])
    w2 = np.stack([node(l2[j]) for j in range(g2.n)])
    l2_raw = l2 - log_w[None, :]
    w0 = np.zeros((g1.n, g2.n, d))
    for j in range(g1.n):
        for l in range(g2.n):
            w0[j, l] = node(l1[j] + l2_raw[l])
    return w1, w2, w0, fallbacks
