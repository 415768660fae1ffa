"""Figure rendering for evaluation reports.

Figures are written to files next to the delimited report output; no
interactive backend is required.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import EvalReport


def save_report_figure(report: EvalReport, path: str | Path) -> Path:
    """Bar chart of top-1/top-3 accuracy per setting with std error bars."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    settings = [row.setting for row in report.rows]
    x = np.arange(len(settings))
    width = 0.38

    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(settings) + 2), 3.6))
    ax.bar(x - width / 2, [r.top1_mean for r in report.rows], width,
           yerr=[r.top1_std for r in report.rows], capsize=3, label="Top-1")
    ax.bar(x + width / 2, [r.top3_mean for r in report.rows], width,
           yerr=[r.top3_std for r in report.rows], capsize=3, label="Top-3")
    ax.set_xticks(x)
    ax.set_xticklabels(settings)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(report.experiment_id)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_training_curve(loss_values, path: str | Path) -> Path:
    """Per-step training loss curve from a fine-tuning log."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(len(loss_values)), loss_values, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("batch loss (sum)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
