"""Figure rendering for evaluation artifacts.

All figures are written as SVG with no embedded creation date and a fixed
hash salt, so re-running a command reproduces byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import EmbeddingProjection, MetricsReport

__all__ = ["save_svg", "coverage_figure", "error_vs_context_figure", "embedding_figure"]

plt.rcParams["svg.hashsalt"] = "windndp"

_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def save_svg(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def coverage_figure(report: MetricsReport):
    """Nominal vs observed central-interval coverage, one line per
    context size."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([0, 1], [0, 1], color="0.6", linestyle="--", linewidth=1, label="ideal")
    for i, cs in enumerate(report.context_sizes):
        levels, observed = report.coverage_curve(cs)
        ax.plot(levels, observed, marker="o", markersize=3,
                color=_COLORS[i % len(_COLORS)], label=f"context {cs}")
    ax.set_xlabel("nominal coverage")
    ax.set_ylabel("observed coverage")
    ax.set_title(f"{report.model}: interval calibration")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return fig


def error_vs_context_figure(reports: list[MetricsReport], metric: str = "mae"):
    """Mean ± std of a per-sample metric against context size, one line
    per model."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, report in enumerate(reports):
        sizes = report.context_sizes
        means = [report.aggregate(cs)[f"{metric}_mean"] for cs in sizes]
        stds = [report.aggregate(cs)[f"{metric}_std"] for cs in sizes]
        ax.errorbar(sizes, means, yerr=stds, marker="o", capsize=3,
                    color=_COLORS[i % len(_COLORS)], label=report.model)
    ax.set_xlabel("context size")
    ax.set_ylabel(metric.upper())
    ax.set_title(f"{metric.upper()} vs context size")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def embedding_figure(projection: EmbeddingProjection, title: str = "task embeddings"):
    """Projected embedding scatter with per-task 68% ellipses."""
    from matplotlib.patches import Ellipse

    fig, ax = plt.subplots(figsize=(5, 4))
    pts = projection.points
    if pts.shape[1] == 1:  # degenerate fallback: strip plot
        pts = np.c_[pts[:, 0], np.zeros(len(pts))]
    tasks = list(dict.fromkeys(projection.labels))
    for i, task in enumerate(tasks):
        sel = np.array([lab == task for lab in projection.labels])
        color = _COLORS[i % len(_COLORS)]
        ax.scatter(pts[sel, 0], pts[sel, 1], s=12, color=color, alpha=0.7, label=task)
        ell = projection.ellipses[task]
        if not projection.degenerate and np.all(np.isfinite(ell["axis_lengths"])):
            ax.add_patch(
                Ellipse(
                    xy=ell["center"],
                    width=2 * ell["axis_lengths"][0],
                    height=2 * ell["axis_lengths"][1],
                    angle=np.degrees(ell["angle"]),
                    facecolor="none",
                    edgecolor=color,
                    linewidth=1,
                )
            )
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2" if projection.points.shape[1] == 2 else "")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig
