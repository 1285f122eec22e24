"""Matplotlib figure rendering for reports.

Figures are written to files next to their CSV counterparts; everything
uses the Agg backend so no display is required.
"""

from __future__ import annotations

from pathlib import Path

import os
import tempfile

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import BenchRow, class_averages
from .model import ConvLayer, ResponseModel
from .training import TrainLog


def _save_atomic(fig, path: str | Path, dpi: int = 150) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fig.savefig(fh, format=path.suffix.lstrip(".") or "png", dpi=dpi)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)


def save_repeatability_figure(rows: list[BenchRow], path: str | Path) -> None:
    """Mean repeatability vs. point budget, one panel per transform class."""
    averages = class_averages(rows)
    classes = sorted({r.transform_class for r in rows})
    models = sorted({r.model for r in rows})
    budgets = sorted({r.budget for r in rows})

    fig, axes = plt.subplots(
        1, len(classes), figsize=(3.2 * len(classes), 3.2), sharey=True, squeeze=False
    )
    for ax, cls in zip(axes[0], classes):
        for model in models:
            ys = [averages.get((model, cls, b), np.nan) for b in budgets]
            ax.plot(budgets, ys, marker="o", label=model)
        ax.set_title(cls)
        ax.set_xlabel("points")
        ax.set_ylim(0.0, 1.0)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("repeatability")
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    _save_atomic(fig, path)


def save_filter_figure(model: ResponseModel, path: str | Path, max_filters: int = 32) -> None:
    """First-layer convolution filters as image tiles."""
    conv = next((l for l in model.layers if isinstance(l, ConvLayer)), None)
    if conv is None:
        raise ValueError("model has no convolutional layer to draw")
    filters = conv.weight.reshape(-1, conv.fsize, conv.fsize)[:max_filters]
    n = filters.shape[0]
    cols = min(8, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.4 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(filters[i], cmap="gray")
    fig.tight_layout()
    _save_atomic(fig, path)


def save_training_curves(log: TrainLog, path: str | Path) -> None:
    """Mean hinge loss and misrank fractions per epoch."""
    epochs = [r.epoch for r in log.records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(epochs, [r.mean_loss for r in log.records], color="tab:blue")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean hinge loss")
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, [r.misrank for r in log.records], label="train", color="tab:orange")
    heldout = [r.heldout_misrank for r in log.records]
    if not all(np.isnan(heldout)):
        ax2.plot(epochs, heldout, label="held-out", color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("misrank fraction")
    ax2.legend(fontsize=8)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    _save_atomic(fig, path)
