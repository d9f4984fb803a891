"""Figure rendering for reports; every figure is written next to its CSV."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def confusion_figure(matrix: np.ndarray, classes: list[str], per_class: np.ndarray, path,
                     title: str = "") -> Path:
    """Row-normalised confusion matrix with per-class accuracy on the y labels."""
    m = np.asarray(matrix, dtype=float)
    rows = m.sum(axis=1, keepdims=True)
    norm = np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)
    k = len(classes)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.45 * k, 1.0 + 0.45 * k))
        ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
        ax.set_xticks(range(k), classes, rotation=60, ha="right")
        ylabels = [f"{c} ({a:.1%})" if np.isfinite(a) else f"{c} (n/a)" for c, a in zip(classes, per_class)]
        ax.set_yticks(range(k), ylabels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("ground truth")
        if k <= 15:
            for i in range(k):
                for j in range(k):
                    if m[i, j]:
                        ax.text(j, i, int(m[i, j]), ha="center", va="center", fontsize=7,
                                color="white" if norm[i, j] > 0.5 else "black")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def loss_figure(iterations, losses, path, accuracy=None, window: int = 50) -> Path:
    it = np.asarray(iterations)
    loss = np.asarray(losses, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(it, loss, color="0.75", lw=0.6, label="batch loss")
        if len(loss) >= window:
            smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax.plot(it[window - 1:], smooth, color="C0", lw=1.2, label=f"mean of {window}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        if accuracy is not None:
            ax2 = ax.twinx()
            ax2.plot(*accuracy, color="C1", marker="o", ms=3, lw=1, label="validation accuracy")
            ax2.set_ylabel("patch accuracy")
            ax2.set_ylim(0, 1)
        ax.legend(loc="upper right")
        return _save(fig, path)


def width_accuracy_figure(bins: list[tuple[int, int]], accuracy, counts, path) -> Path:
    labels = [f"{lo}-{hi}" for lo, hi in bins]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(range(len(bins)), accuracy, marker="o")
        ax.set_xticks(range(len(bins)), labels, rotation=45, ha="right")
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("line width after preprocessing (px)")
        ax.set_ylabel("accuracy")
        for i, n in enumerate(counts):
            ax.annotate(str(n), (i, accuracy[i]), textcoords="offset points", xytext=(0, 5),
                        ha="center", fontsize=7, color="0.4")
        return _save(fig, path)
