"""Figure rendering for diagnosis runs.

Everything draws through the Agg backend and writes straight to files, so
rendering works on headless machines.
"""

from __future__ import annotations

from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import DiagnosisReport


def save_confusion_heatmap(report: DiagnosisReport, path: str) -> None:
    conf = report.confusion.astype(np.float64)
    row_sums = conf.sum(axis=1, keepdims=True)
    shares = np.divide(conf, row_sums, out=np.zeros_like(conf), where=row_sums > 0)
    fig, ax = plt.subplots(figsize=(7, 6))
    image = ax.imshow(shares, cmap="viridis", vmin=0.0, vmax=1.0)
    ticks = np.arange(len(report.class_ids))
    ax.set_xticks(ticks, [str(c) for c in report.class_ids], rotation=90)
    ax.set_yticks(ticks, [str(c) for c in report.class_ids])
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_title("confusion (row-normalized)")
    fig.colorbar(image, ax=ax, fraction=0.046)
    if len(report.class_ids) <= 10:
        for i in range(conf.shape[0]):
            for j in range(conf.shape[1]):
                if report.confusion[i, j]:
                    ax.text(j, i, str(int(report.confusion[i, j])),
                            ha="center", va="center", color="white", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_accuracy_bars(report: DiagnosisReport, seen_ids: Sequence[int],
                       path: str) -> None:
    seen = set(int(c) for c in seen_ids)
    ids = [c for c in report.class_ids if c in report.acc_per_class]
    values = [report.acc_per_class[c] for c in ids]
    colors = ["tab:blue" if c in seen else "tab:orange" for c in ids]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(ids)), 4))
    ax.bar(range(len(ids)), values, color=colors)
    ax.set_xticks(range(len(ids)), [str(c) for c in ids])
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("class")
    ax.set_ylabel("accuracy")
    ax.set_title(
        f"per-class accuracy  (seen {report.acc_s:.3f} / unseen {report.acc_u:.3f} "
        f"/ harmonic {report.har:.3f})")
    ax.axhline(report.acc_s, color="tab:blue", linestyle=":", linewidth=1)
    if report.acc_u > 0:
        ax.axhline(report.acc_u, color="tab:orange", linestyle=":", linewidth=1)
    handles = [plt.Rectangle((0, 0), 1, 1, color="tab:blue"),
               plt.Rectangle((0, 0), 1, 1, color="tab:orange")]
    ax.legend(handles, ["seen", "unseen"], loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves(curves: Dict[str, List[float]], path: str,
                     title: str = "training loss") -> None:
    """One line per named loss series, indexed by epoch."""
    fig, ax = plt.subplots(figsize=(7, 4))
    drawn = False
    for name in sorted(curves):
        values = curves[name]
        if len(values):
            ax.plot(range(1, len(values) + 1), values, label=name)
            drawn = True
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if drawn:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_projection_scatter(z: np.ndarray, labels: np.ndarray, path: str) -> None:
    """First two knowledge-space coordinates, colored by class label."""
    z = np.atleast_2d(z)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(6, 5))
    if z.shape[0]:
        # a single-attribute space is plotted against the sample index
        xs = z[:, 0]
        ys = z[:, 1] if z.shape[1] > 1 else np.arange(z.shape[0])
        for cid in np.unique(labels):
            mask = labels == cid
            ax.scatter(xs[mask], ys[mask], s=12, label=str(int(cid)))
        ax.legend(title="class", fontsize=8)
    ax.set_xlabel("z_1")
    ax.set_ylabel("z_2" if z.shape[1] > 1 else "sample index")
    ax.set_title("knowledge-space projections")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
