"""PNG figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], path) -> Path:
    """Training loss and validation accuracy per epoch, learning rate drops marked."""
    ep = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(ep, [h["train_loss"] for h in history], "o-", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [h["val_acc"] for h in history], "s-", color="tab:orange", label="val acc")
    ax2.set_ylim(0, 1)
    ax2.set_ylabel("accuracy")
    for a, b in zip(history, history[1:]):
        if b["lr"] < a["lr"]:
            ax.axvline(b["epoch"] - 0.5, color="gray", ls=":")
    ax.legend(loc="upper left")
    ax2.legend(loc="upper right")
    return _save(fig, path)


def plot_ablation(rows, path) -> Path:
    """Test accuracy per configuration, annotated with its parameter count."""
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) + 2), 3.5))
    names = [r.name for r in rows]
    acc = [r.accuracy for r in rows]
    bars = ax.bar(range(len(rows)), acc, color="tab:blue")
    for b, r in zip(bars, rows):
        ax.annotate(f"{r.params / 1e3:.1f}k", (b.get_x() + b.get_width() / 2, b.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("test accuracy")
    return _save(fig, path)


def plot_confusion(labels: np.ndarray, predicted: np.ndarray, classes: int, path) -> Path:
    m = np.zeros((classes, classes), dtype=int)
    np.add.at(m, (labels, predicted), 1)
    fig, ax = plt.subplots(figsize=(3.5, 3.2))
    ax.imshow(m, cmap="Blues")
    for i in range(classes):
        for j in range(classes):
            ax.text(j, i, str(m[i, j]), ha="center", va="center", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    return _save(fig, path)


def plot_params(reports, path) -> Path:
    """Parameter count (millions) per fusion configuration."""
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(reports) + 2), 3.5))
    ax.bar(range(len(reports)), [r.millions for r in reports], color="tab:green")
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels([r.label or "softmax" for r in reports], rotation=30, ha="right",
                       fontsize=8)
    ax.set_ylabel("parameters (M)")
    return _save(fig, path)


def save_clip_strip(rgb: np.ndarray, flow: np.ndarray, path) -> Path:
    """RGB frames over their first horizontal flow field, one column per chunk."""
    t = rgb.shape[0]
    fig, axes = plt.subplots(2, t, figsize=(1.6 * t, 3.4), squeeze=False)
    for k in range(t):
        axes[0, k].imshow(np.clip(rgb[k] + 0.5, 0, 1))
        axes[1, k].imshow(flow[k, ..., 0], cmap="coolwarm", vmin=-4, vmax=4)
        for a in axes[:, k]:
            a.axis("off")
    return _save(fig, path)
