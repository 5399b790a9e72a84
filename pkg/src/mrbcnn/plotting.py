"""Figures for evaluation and training reports (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def new(width: float = 3.4, height: float = 2.6):
    with matplotlib.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(STYLE):
        # pin the metadata so repeated renders produce identical bytes
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_recall_curves(curves: Mapping[str, tuple[Sequence[int], Sequence[float]]], path, title: str = "") -> Path:
    """Recall@K against K, one line per label (percent on the y axis)."""
    fig, ax = new()
    with matplotlib.rc_context(STYLE):
        for label, (ks, rec) in curves.items():
            ax.plot(np.asarray(ks), 100 * np.asarray(rec), marker="o", markersize=2.5, linewidth=1.2, label=label)
        ax.set_xlabel("K")
        ax.set_ylabel("Recall@K (%)")
        ax.set_ylim(0, 101)
        ax.grid(alpha=0.3, linewidth=0.5)
        if title:
            ax.set_title(title)
        if len(curves) > 1:
            ax.legend(frameon=False, loc="lower right")
    return save(fig, path)


def plot_training_log(iters: Sequence[int], losses: Sequence[float], path, val: Sequence[tuple[int, float]] = ()) -> Path:
    fig, ax = new()
    with matplotlib.rc_context(STYLE):
        ax.plot(iters, losses, linewidth=0.8, color="tab:blue")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        if val:
            ax2 = ax.twinx()
            vi, vr = zip(*val)
            ax2.plot(vi, vr, marker="s", markersize=3, color="tab:orange", linewidth=1)
            ax2.set_ylabel("val recall@1")
            ax2.set_ylim(0, 1.01)
    return save(fig, path)
