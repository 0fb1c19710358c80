"""Figure rendering for evaluation reports and saliency overlays."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalReport  # noqa: E402

FIG_DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=FIG_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_roc_curves(report: EvalReport, path, title: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for name, roc, auc in zip(report.class_names, report.roc, report.auroc):
        if roc is None:
            continue
        ax.plot(roc[0], roc[1], lw=1.5, label=f"{name} (AUROC {auc:.4f})")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="0.6")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title or f"ROC curves (mean AUROC {report.mean_auroc:.4f})")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_confusion_matrix(report: EvalReport, path, normalize: bool = False) -> Path:
    cm = report.confusion.astype(float)
    if normalize:
        cm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    n = len(report.class_names)
    fig, ax = plt.subplots(figsize=(1.3 * n + 2, 1.3 * n + 1.5))
    im = ax.imshow(cm, cmap="Blues")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xticks(range(n), report.class_names, rotation=30, ha="right")
    ax.set_yticks(range(n), report.class_names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    thresh = cm.max() / 2 if cm.size else 0
    for i in range(n):
        for j in range(n):
            txt = f"{cm[i, j]:.2f}" if normalize else str(int(cm[i, j]))
            ax.text(j, i, txt, ha="center", va="center", color="white" if cm[i, j] > thresh else "black")
    ax.set_title(f"Confusion matrix (accuracy {report.accuracy:.3f})")
    return _save(fig, path)


def saliency_overlay(gray: np.ndarray, saliency: np.ndarray, path, title: str = "", alpha: float = 0.5) -> Path:
    """Min-max scaled saliency blended over the grayscale image; red is high."""
    s = saliency.astype(float)
    span = s.max() - s.min()
    s = (s - s.min()) / span if span > 0 else np.zeros_like(s)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(gray, cmap="gray")
    ax.imshow(s, cmap="jet", alpha=alpha, vmin=0, vmax=1)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)
