"""Static figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.tri import Triangulation  # noqa: E402

# no software/version stamp so reruns give identical files
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_history(history: Sequence[tuple[int, float, float]], path) -> None:
    """Training loss and validation RNE per epoch."""
    epochs = [h[0] for h in history]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].semilogy(epochs, [h[1] for h in history], marker="o", ms=3)
    ax[0].set_xlabel("epoch")
    ax[0].set_ylabel("train loss")
    ax[1].plot(epochs, [h[2] for h in history], marker="o", ms=3, color="C1")
    ax[1].set_xlabel("epoch")
    ax[1].set_ylabel("validation RNE")
    fig.tight_layout()
    _save(fig, path)


def plot_report(mse: np.ndarray, rne: np.ndarray, corr: np.ndarray, path, dt: float | None = None) -> None:
    """Per-step MSE, RNE and correlation curves of a rollout."""
    t = np.arange(len(mse)) * (dt or 1.0)
    fig, ax = plt.subplots(1, 3, figsize=(12, 3.5))
    ax[0].semilogy(t, np.maximum(mse, 1e-300))
    ax[0].set_ylabel("MSE")
    ax[1].plot(t, rne, color="C1")
    ax[1].set_ylabel("RNE")
    ax[2].plot(t, corr, color="C2")
    ax[2].set_ylabel("correlation")
    ax[2].set_ylim(min(0.0, float(np.nanmin(corr)) if np.isfinite(corr).any() else 0.0), 1.02)
    for a in ax:
        a.set_xlabel("time" if dt else "step")
    fig.tight_layout()
    _save(fig, path)


def plot_snapshot(nodes: np.ndarray, cells: np.ndarray, values: np.ndarray, path, title: str = "") -> None:
    """One panel per channel of a nodal field on the triangle mesh."""
    values = np.asarray(values).reshape(len(nodes), -1)
    m = values.shape[1]
    tri = Triangulation(nodes[:, 0], nodes[:, 1], cells)
    fig, ax = plt.subplots(1, m, figsize=(4.2 * m, 3.6), squeeze=False)
    for c in range(m):
        pc = ax[0, c].tripcolor(tri, values[:, c], shading="gouraud", cmap="RdBu_r")
        ax[0, c].set_aspect("equal")
        ax[0, c].set_title(f"{title} channel {c}".strip())
        fig.colorbar(pc, ax=ax[0, c], shrink=0.8)
    fig.tight_layout()
    _save(fig, path)


def plot_laplace_errors(rne_by_sample: dict[str, np.ndarray], path) -> None:
    """Histogram of per-sample RNE for each method."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, vals in rne_by_sample.items():
        ax.hist(vals, bins=30, alpha=0.6, label=label)
    ax.set_xlabel("per-sample RNE")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
