"""Matplotlib figures for evaluation reports and training curves.

Figures are rendered with the Agg backend inside a local rc context, so
importing this module never changes global matplotlib state.
"""

from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "axes.linewidth": 0.6,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "image.cmap": "viridis",
    "figure.dpi": 100,
    "savefig.dpi": 150,
}
# strip volatile PNG metadata so equal inputs give equal files
PNG_METADATA = {"Software": None}


def _grid(report, attr):
    contents = list(dict.fromkeys(r.content_id for r in report.rows))
    styles = list(dict.fromkeys(r.style_id for r in report.rows))
    grid = np.full((len(contents), len(styles)), np.nan)
    for r in report.rows:
        v = getattr(r, attr)
        if r.ok and math.isfinite(v):
            grid[contents.index(r.content_id), styles.index(r.style_id)] = v
    return grid, contents, styles


def _heatmap(ax, grid, rows, cols, title):
    im = ax.imshow(grid, aspect="auto")
    ax.set_xticks(range(len(cols)), cols, rotation=45, ha="right")
    ax.set_yticks(range(len(rows)), rows)
    ax.set_xlabel("style")
    ax.set_ylabel("content")
    ax.set_title(title)
    for (i, j), v in np.ndenumerate(grid):
        ax.text(j, i, "fail" if np.isnan(v) else f"{v:.3g}", ha="center", va="center",
                color="white", fontsize=6)
    ax.figure.colorbar(im, ax=ax, fraction=0.046, pad=0.04)


def render_report_figure(report, path) -> None:
    """Style-loss and LPIPS heatmaps over the content x style grid."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.4), constrained_layout=True)
        for ax, (attr, title) in zip(axes, [("style_loss", "style loss"), ("lpips", "LPIPS to content")]):
            grid, rows, cols = _grid(report, attr)
            _heatmap(ax, grid, rows, cols, title)
        agg = report.aggregates
        fig.suptitle(
            f"mean style loss {agg['mean_style_loss']:.4g}   mean LPIPS {agg['mean_lpips']:.4g}   "
            f"(reconstruction LPIPS {agg['mean_recon_lpips']:.4g})",
            fontsize=8,
        )
        fig.savefig(path, metadata=PNG_METADATA)
        plt.close(fig)


def render_loss_curve(history: Sequence[float], path, window: int = 20) -> None:
    """Per-step loss with its trailing moving average."""
    from .styletune import moving_average

    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3), constrained_layout=True)
        steps = np.arange(1, len(history) + 1)
        ax.plot(steps, history, lw=0.5, alpha=0.5, label="loss")
        if len(history) >= window:
            ax.plot(steps[window - 1:], moving_average(history, window), lw=1.2,
                    label=f"{window}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel("noise MSE")
        ax.legend(frameon=False)
        fig.savefig(path, metadata=PNG_METADATA)
        plt.close(fig)
