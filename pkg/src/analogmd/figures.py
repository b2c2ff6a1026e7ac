"""Figure rendering for the report path.

Every CLI run that produces delimited output can also drop PNG figures next
to it: encoder curves, the channel-space locus, annealing traces, sweep
curves, and encoder surfaces for the paired-symbol mode.  All functions
return the written path.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .md2to1 import VectorMapping
from .system import ScalarMapping


def _finish(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_mapping(mapping: ScalarMapping, path: str, title: str = "Encoder mappings") -> str:
    """Both encoder curves against the source amplitude."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    x = mapping.grid.points
    ax.plot(x, mapping.g1_values, label="g1", lw=1.6)
    ax.plot(x, mapping.g2_values, label="g2", lw=1.6, ls="--")
    ax.set_xlabel("source amplitude x")
    ax.set_ylabel("channel amplitude")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    return _finish(fig, path)


def plot_channel_space(mapping: ScalarMapping, path: str) -> str:
    """Locus (g1(x), g2(x)): how the encoder fills the channel plane."""
    fig, ax = plt.subplots(figsize=(5.2, 5.2))
    pts = ax.scatter(mapping.g1_values, mapping.g2_values, c=mapping.grid.points,
                     cmap="viridis", s=8)
    fig.colorbar(pts, ax=ax, label="source amplitude x")
    ax.set_xlabel("channel 1 amplitude g1(x)")
    ax.set_ylabel("channel 2 amplitude g2(x)")
    ax.set_title("Channel-space locus")
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_trace(trace, path: str) -> str:
    """Free energy / cost / entropy against the cooling step."""
    fig, axes = plt.subplots(3, 1, figsize=(6.4, 7.2), sharex=True)
    steps = np.arange(len(trace.temperature))
    axes[0].semilogy(steps, trace.temperature, lw=1.4)
    axes[0].set_ylabel("temperature")
    axes[1].plot(steps, trace.free_energy, label="free energy", lw=1.4)
    axes[1].plot(steps, trace.cost_j, label="soft cost", lw=1.2, ls="--")
    axes[1].plot(steps, trace.hardened_j, label="hardened cost", lw=1.2, ls=":")
    axes[1].set_ylabel("cost")
    axes[1].legend(fontsize=8)
    axes[2].plot(steps, trace.entropy, lw=1.4)
    axes[2].set_ylabel("entropy")
    axes[2].set_xlabel("cooling step")
    for ax in axes:
        ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_sweep(rows: list[dict], path: str) -> str:
    """SNR against failure probability for the bound, the linear reference and
    the optimized mappings; epsilon decreases to the right."""
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    eps = np.array([r["epsilon"] for r in rows])
    order = np.argsort(-eps)
    eps = eps[order]
    for key, label, style in (("snr_opta", "bound", "k-"),
                              ("snr_linear", "linear", "b--s"),
                              ("snr_optimized", "optimized", "r-o")):
        vals = np.array([rows[i][key] for i in order])
        ax.plot(-np.log10(eps), vals, style, label=label, ms=4, lw=1.5)
    ax.set_xlabel("-log10(failure probability)")
    ax.set_ylabel("SNR [dB]")
    ax.set_title("Distortion SNR vs channel failure probability")
    ax.grid(alpha=0.3)
    ax.legend()
    return _finish(fig, path)


def plot_mapping_2d(mapping: VectorMapping, path: str) -> str:
    """Encoder surfaces as heat maps over the source plane."""
    fig, axes = plt.subplots(1, 2, figsize=(9.6, 4.2))
    x = mapping.grid.axis.points
    extent = (x[0], x[-1], x[0], x[-1])
    for ax, values, name in ((axes[0], mapping.g1_values, "g1"),
                             (axes[1], mapping.g2_values, "g2")):
        im = ax.imshow(values.T, origin="lower", extent=extent, aspect="equal",
                       cmap="RdBu_r")
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        ax.set_title(f"{name}(x1, x2)")
    return _finish(fig, path)


def render_optimize_report(out_dir: str, mapping, metrics, trace) -> list[str]:
    paths = []
    if isinstance(mapping, ScalarMapping):
        paths.append(plot_mapping(mapping, os.path.join(out_dir, "mapping.png")))
        paths.append(plot_channel_space(mapping, os.path.join(out_dir, "channel_space.png")))
    else:
        paths.append(plot_mapping_2d(mapping, os.path.join(out_dir, "mapping.png")))
    if trace is not None and trace.temperature:
        paths.append(plot_trace(trace, os.path.join(out_dir, "trace.png")))
    return paths
