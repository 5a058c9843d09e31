"""Figure rendering for cross-validation reports.

Written next to report.csv by the training path: per-fold loss curves and a
bar chart of the artery/vein/average metrics with cross-fold error bars.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import METRIC_NAMES, REPORT_ROWS, FoldReport


def render_loss_curves(histories, out_path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for fold, history in enumerate(histories):
        if not history.losses:
            continue
        steps, losses = zip(*history.losses)
        ax.plot(steps, losses, label=f"fold {fold}", linewidth=1.0)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("training loss")
    ax.set_title("Training loss per fold")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_metrics_summary(report: FoldReport, out_path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    x = np.arange(len(METRIC_NAMES))
    width = 0.25
    for i, row in enumerate(REPORT_ROWS):
        means = [report.rows[row][m][0] for m in METRIC_NAMES]
        stds = [report.rows[row][m][1] for m in METRIC_NAMES]
        ax.bar(x + (i - 1) * width, means, width, yerr=stds, capsize=3, label=row)
    ax.set_xticks(x, METRIC_NAMES)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.set_title(f"Cross-validation metrics ({report.num_folds} folds)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_figures(report: FoldReport, histories, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        render_loss_curves(histories, out_dir / "loss_curves.png"),
        render_metrics_summary(report, out_dir / "metrics_summary.png"),
    ]
