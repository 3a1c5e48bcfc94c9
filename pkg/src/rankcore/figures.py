"""Figure rendering for the report path.

Renders the consistency report as grouped bar charts (one figure per task,
one panel per depth k) and the training trace as loss/perturbation curves.
Figures are a convenience companion to the JSON/CSV outputs; nothing reads
them back.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["save_report_figures", "save_trace_figure"]


def save_report_figures(report: dict[str, Any], out_dir: str | Path) -> list[Path]:
    """One PNG per task: mean nDCG with std error bars, methods grouped by ratio."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for task, task_report in sorted(report.get("tasks", {}).items()):
        methods = task_report.get("methods", {})
        if not methods:
            continue
        ks = [str(k) for k in task_report.get("ks", [])]
        fig, axes = plt.subplots(1, len(ks), figsize=(4.2 * len(ks), 3.4), squeeze=False)
        method_names = sorted(methods)
        for ax, k in zip(axes[0], ks):
            ratios = sorted(
                {r for m in method_names for r in methods[m].get(k, {})},
                key=lambda s: float(s) if s != "full" else 2.0,
            )
            width = 0.8 / max(len(method_names), 1)
            for mi, method in enumerate(method_names):
                xs, means, stds = [], [], []
                for ri, ratio in enumerate(ratios):
                    cell = methods[method].get(k, {}).get(ratio)
                    if cell is None:
                        continue
                    xs.append(ri + mi * width)
                    means.append(cell["mean"])
                    stds.append(cell["std"])
                if xs:
                    ax.bar(xs, means, width=width, yerr=stds, capsize=2, label=method)
            ax.set_xticks([i + 0.4 - width / 2 for i in range(len(ratios))])
            ax.set_xticklabels(ratios)
            ax.set_ylim(0.0, 1.05)
            ax.set_xlabel("ratio")
            ax.set_ylabel(f"nDCG@{k}")
            ax.set_title(f"{task}, k={k}")
        axes[0][-1].legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{task}_ndcg.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def save_trace_figure(rows: Sequence[Any], path: str | Path) -> Path:
    """Two panels: contrastive loss and mean structure perturbation per epoch."""
    path = Path(path)
    epochs = [r.epoch for r in rows]
    losses = [r.loss for r in rows]
    perturbations = [r.mean_perturbation for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.4, 3.2))
    ax1.plot(epochs, losses)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("contrastive loss")
    ax2.plot(epochs, perturbations, color="tab:orange")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("mean perturbation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
