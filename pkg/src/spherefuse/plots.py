"""Metric-vs-parameter figure rendering for sweep and evaluation reports.

Figures are written next to the CSV tables; the Agg backend keeps this
usable in headless runs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evalkit import METRIC_COLUMNS, METRIC_HEADERS

FIG_SIZE = (4.5, 3.2)
DPI = 150


def plot_metric_vs_parameter(table: list[dict], metric: str, parameter: str, out_path) -> Path | None:
    """Line plot of one metric's group means against the swept parameter.

    Returns the written path, or None when the metric is absent from
    every group (nothing to plot).
    """
    points = [(entry["group"], entry[metric]) for entry in table if entry.get(metric) is not None]
    if not points:
        return None
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    if all(isinstance(x, (int, float)) for x in xs):
        ax.plot(xs, ys, marker="o", lw=1.5)
    else:
        ax.plot(range(len(xs)), ys, marker="o", lw=1.5)
        ax.set_xticks(range(len(xs)))
        ax.set_xticklabels([str(x) for x in xs], rotation=20, ha="right")
    ax.set_xlabel(parameter)
    ax.set_ylabel(METRIC_HEADERS.get(metric, metric))
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def render_parameter_plots(table: list[dict], parameter: str, out_dir) -> list[Path]:
    """One figure per metric that has data; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in METRIC_COLUMNS:
        path = plot_metric_vs_parameter(table, metric, parameter, out_dir / f"{metric}_vs_{parameter}.png")
        if path is not None:
            written.append(path)
    return written
