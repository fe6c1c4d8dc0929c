"""Matplotlib figures written next to the CSV/Markdown outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], path, title: str = "") -> Path:
    """Training loss and test accuracy against epoch."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(epochs, [100 * h["test_accuracy"] for h in history], color="tab:blue", marker="o", ms=2, label="test accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy (%)", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h["train_loss"] for h in history], color="tab:orange", label="train loss")
    ax2.set_ylabel("train loss", color="tab:orange")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_sweep(results, path, title: str = "") -> Path:
    """Mean test accuracy against training-set percentage, one line per model, seed spread as bars."""
    fig, ax = plt.subplots(figsize=(6.4, 4))
    models = list(dict.fromkeys(r.model for r in results))
    for m in models:
        points = sorted({r.p for r in results if r.model == m and r.ok})
        if not points:
            continue
        accs = [[100 * r.final_accuracy for r in results if r.model == m and r.p == p and r.ok] for p in points]
        mean = [np.mean(a) for a in accs]
        err = [np.std(a, ddof=1) if len(a) > 1 else 0.0 for a in accs]
        ax.errorbar(points, mean, yerr=err, marker="o", ms=4, capsize=3, label=m,
                    linestyle="--" if not m.startswith("x-") else "-")
    ax.set_xscale("log")
    ax.set_xlabel("training data used, p (%)")
    ax.set_ylabel("test accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    return _save(fig, path)


def save_rgb_png(image: np.ndarray, path) -> Path:
    """Write an [H, W, 3] image with values in [0, 1] as PNG."""
    plt.imsave(Path(path), np.clip(image, 0, 1))
    return Path(path)
