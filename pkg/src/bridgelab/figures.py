"""Matplotlib figure rendering for reports.

Everything renders headless to files: signed subtraction maps on a
symmetric diverging scale, side-by-side case panels, metric distributions,
and training curves.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport, subtraction_map


def save_subtraction_map(path: str | Path, a: np.ndarray, b: np.ndarray) -> None:
    """a - b on a symmetric diverging color scale centered at zero."""
    diff = subtraction_map(a, b)
    lim = float(np.max(np.abs(diff))) or 1e-12
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(diff, cmap="RdBu_r", vmin=-lim, vmax=lim)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)


def save_side_by_side(
    path: str | Path, panels: list[tuple[str, np.ndarray]], vmin: float = 0.0, vmax: float = 1.0
) -> None:
    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3.2))
    if n == 1:
        axes = [axes]
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img, cmap="gray", vmin=vmin, vmax=vmax)
        ax.set_title(title, fontsize=9)
        ax.set_axis_off()
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)


def save_metrics_summary(path: str | Path, report: MetricsReport, title: str = "") -> None:
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    for ax, name in zip(axes, ("rmse", "ssim", "dice")):
        vals = [getattr(r, name) for r in report.rows]
        ax.hist(vals, bins=16, color="#4878d0", edgecolor="white")
        ax.set_title(f"{name}  mean={np.mean(vals):.4f}", fontsize=9)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_history_curve(path: str | Path, history: list[tuple[int, float]]) -> None:
    epochs = [e for e, _ in history]
    losses = [l for _, l in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, losses, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
