"""Optional figures rendered from the same tables the CLI writes as CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_sweep", "plot_dist", "plot_feasibility", "plot_training"]


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(eps, lam, u_c, p_above, path, label="") -> Path:
    fig, ax = plt.subplots(1, 3, figsize=(12, 3.5))
    ax[0].plot(eps, lam, marker=".", label=label)
    ax[0].set(xlabel="epsilon", ylabel="lambda*")
    ax[1].plot(eps, u_c, marker=".")
    ax[1].set(xlabel="epsilon", ylabel="concavified value")
    ax[2].plot(eps, p_above, marker=".")
    ax[2].plot(eps, 1 - np.asarray(eps), ls=":", color="grey")
    ax[2].set(xlabel="epsilon", ylabel="P(X >= L)")
    return _save(fig, path)


def plot_dist(bins_left, bins_right, freq, atoms: dict, lam: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    left = np.asarray(bins_left)
    width = np.asarray(bins_right) - left
    ax.bar(left, freq, width=width, align="edge", alpha=0.7)
    for x, p in atoms.items():
        if p > 0:
            ax.axvline(x, color="red", lw=2, label=f"P(X={x:g})={p:.3f}")
    ax.set_xscale("log")
    ax.set(xlabel="terminal wealth", ylabel="frequency", title=f"lambda={lam:g}")
    if any(p > 0 for p in atoms.values()):
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_feasibility(curves: dict, epsilon: float, path) -> Path:
    fig, ax = plt.subplots(1, 2, figsize=(10, 3.5))
    for x0, (lam, h, full) in curves.items():
        ax[0].plot(lam, h, label=f"x0={x0:g}")
        ax[1].plot(lam, full, label=f"x0={x0:g}")
    ax[0].axhline(1 - epsilon, color="grey", ls=":")
    ax[0].set(xlabel="lambda", ylabel="P(X >= L)")
    ax[1].set(xlabel="lambda", ylabel="full value")
    ax[0].legend(fontsize=8)
    return _save(fig, path)


def plot_training(steps, losses, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(steps, losses)
    ax.set(xlabel="step", ylabel="loss")
    return _save(fig, path)
