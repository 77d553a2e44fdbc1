"""Matplotlib figure rendering for the report-producing CLI paths.

Figures are written to files next to the delimited output; nothing here is
interactive.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from evdet.engine import FlopReport


def save_pr_curves(path, curves: dict[int, tuple[np.ndarray, np.ndarray]], iou_thresh: float) -> None:
    """One precision-recall curve per class at a fixed IoU threshold."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for cls, (recall, precision) in sorted(curves.items()):
        if len(recall):
            ax.step(recall, precision, where="post", label=f"class {cls}")
        else:
            ax.plot([], [], label=f"class {cls} (no data)")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.0)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"Precision-recall @ IoU {iou_thresh:.2f}")
    ax.legend(loc="lower left")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_flops_figure(path, report: FlopReport) -> None:
    """Per-layer dense vs executed FLOPs as paired bars (log scale)."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    idx = np.arange(len(report.layers))
    dense = [l.dense_flops for l in report.layers]
    executed = [l.executed_flops for l in report.layers]
    ax.bar(idx - 0.2, dense, width=0.4, label="dense")
    ax.bar(idx + 0.2, executed, width=0.4, label="executed")
    ax.set_yscale("symlog")
    ax.set_xticks(idx)
    ax.set_xticklabels([f"{l.index}\n{l.kind}" for l in report.layers], fontsize=7)
    ax.set_ylabel("FLOPs")
    ax.set_title(f"FLOPs per layer (executed/dense = {report.ratio:.4f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
