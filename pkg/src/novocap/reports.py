"""Figure rendering for the delimited reports.

Every report path writes plain text first; these helpers render the matching
matplotlib figure next to it. Uses the Agg backend so no display is needed.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import ScoreReport


def render_loss_curve(curve, path) -> None:
    """Line plot of per-epoch mean loss (train and, when present, val)."""
    epochs = [row[0] for row in curve]
    train = [row[1] for row in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, train, marker="o", markersize=3, label="train")
    if any(row[2] is not None for row in curve):
        ax.plot(epochs, [row[2] for row in curve], marker="s", markersize=3, label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss (nats/token)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_subset_scores(report: ScoreReport, path) -> None:
    """Bar chart of mean CIDEr-D per subset."""
    names = [row[0] for row in report.subsets]
    means = [row[2] for row in report.subsets]
    counts = [row[1] for row in report.subsets]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(names, means, color="steelblue")
    for bar, count in zip(bars, counts):
        ax.text(
            bar.get_x() + bar.get_width() / 2,
            bar.get_height(),
            f"n={count}",
            ha="center",
            va="bottom",
            fontsize=8,
        )
    ax.set_ylabel("mean CIDEr-D")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
