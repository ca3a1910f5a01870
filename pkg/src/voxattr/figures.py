"""Report figures: matrix heatmaps, benchmark bars, anomaly-score histograms.

Rendering is strictly file-based (Agg backend); nothing here opens a window.
These plots accompany the delimited outputs of the report commands and are
optional: the numeric artifacts never depend on them.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .aggregate import ExplanationMatrix
from .metrics import METRIC_COLUMNS, MetricReport
from .outliers import OutlierResult


def matrix_heatmap(matrix: ExplanationMatrix, path: str, title: str | None = None) -> None:
    """Importance matrix as a heatmap; NaN cells are hatched out."""
    rows = len(matrix.row_labels)
    cols = len(matrix.col_labels)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * cols + 2), max(3.0, 0.5 * rows + 1.5)))
    masked = np.ma.masked_invalid(matrix.values)
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad(color="#d0d0d0")
    im = ax.imshow(masked, cmap=cmap, vmin=0.0, vmax=max(1.0, float(np.nanmax(matrix.values) if np.isfinite(matrix.values).any() else 1.0)), aspect="auto")
    ax.set_xticks(range(cols), labels=matrix.col_labels, rotation=45, ha="right")
    ax.set_yticks(range(rows), labels=matrix.row_labels)
    ax.set_xlabel("RoI")
    ax.set_ylabel("explained class")
    if title is None:
        title = f"{matrix.scope} importance ({matrix.sign_mode.value})"
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="mass share")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def benchmark_bars(report: MetricReport, path: str) -> None:
    """One panel per metric, one bar per method, std as error bars."""
    aggregate = report.aggregate()
    methods = list(aggregate.keys())
    fig, axes = plt.subplots(1, len(METRIC_COLUMNS), figsize=(4 * len(METRIC_COLUMNS), 3.5))
    for ax, column in zip(np.atleast_1d(axes), METRIC_COLUMNS):
        means = [aggregate[m][column][0] for m in methods]
        stds = [aggregate[m][column][1] for m in methods]
        ax.bar(range(len(methods)), means, yerr=stds, capsize=3, color="#4878a8")
        ax.set_xticks(range(len(methods)), labels=methods, rotation=45, ha="right")
        ax.set_title(column)
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle(f"attribution benchmark ({report.dataset})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def score_histogram(result: OutlierResult, path: str, bins: int = 20) -> None:
    """Distribution of anomaly scores across all scored (input, class) rows."""
    scores = [r.anomaly_score for r in result.scores]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if scores:
        ax.hist(scores, bins=bins, range=(0.0, 1.0), color="#a85448", edgecolor="white")
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("rows")
    ax.set_title(f"anomaly scores ({len(scores)} rows)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
