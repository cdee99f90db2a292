"""Matplotlib renderings written next to the delimited report output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import DisplacementField, Image
from .evaluation import render_grid


def save_dice_figure(dice_by_metric: dict[str, list[float]], path,
                     title: str = "Registration accuracy") -> None:
    """Box plot of per-pair post-registration Dice for each metric."""
    names = list(dice_by_metric)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.6))
    ax.boxplot([dice_by_metric[n] for n in names], tick_labels=names)
    ax.set_ylabel("mean Dice")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_convergence_figure(traces: dict[str, list[float]], path,
                            xlabel: str = "epoch") -> None:
    """Loss curves per metric on a shared axis."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for name, totals in traces.items():
        ax.plot(np.arange(len(totals)), totals, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("total loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_grid_figure(field: DisplacementField, path, spacing: int = 8,
                     background: Image | None = None) -> None:
    """Morphed grid-lines, optionally over a grayscale background image."""
    grid = render_grid(field, spacing).plane(0)
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    if background is not None:
        ax.imshow(background.plane(0), cmap="gray")
        masked = np.ma.masked_where(grid < 0.5, grid)
        ax.imshow(masked, cmap="autumn", alpha=0.8)
    else:
        ax.imshow(grid, cmap="gray")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
