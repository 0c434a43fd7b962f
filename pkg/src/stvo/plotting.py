"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import StvoError
from .evaluate import ate, camera_centers


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_trajectory(est, gt=None, path="trajectory.png", title="trajectory (x-z)"):
    """Top-down view of camera centres; the estimate is similarity-aligned to
    ``gt`` when there are enough associations."""
    plt = _pyplot()
    pe = camera_centers(est)
    label = "estimate"
    if gt is not None:
        try:
            res = ate(est, gt)
            pe = res.scale * pe @ res.rotation.T + res.translation
            label = f"estimate (aligned, rmse {res.rmse:.2e})"
        except StvoError:
            pass
    fig, ax = plt.subplots(figsize=(5, 4))
    if gt is not None:
        pg = camera_centers(gt)
        ax.plot(pg[:, 0], pg[:, 2], "-", color="0.6", label="ground truth")
    ax.plot(pe[:, 0], pe[:, 2], "o-", ms=3, label=label)
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_title(title)
    ax.axis("equal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_costs(reports, path="ba_cost.png"):
    """Final weighted cost of every bundle-adjustment call, log scale."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    costs = [r["report"].accepted_costs[-1] for r in reports if r["report"].accepted_costs]
    if costs:
        ax.semilogy(np.arange(len(costs)), np.maximum(costs, 1e-300), ".-", ms=2)
    ax.set_xlabel("bundle adjustment call")
    ax.set_ylabel("weighted cost")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
