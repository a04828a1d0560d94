"""Matplotlib renderers for the analysis and report artifacts.

Everything draws on the Agg backend straight to files; these are side-by-side
visualizations of the delimited exports, not a data interchange format.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def similarity_heatmap(matrix, labels, path, title="Embedding |cosine| similarity"):
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    fig.colorbar(im, ax=ax)
    ticks = np.arange(len(labels))
    show = len(labels) <= 30  # past that, tick labels just smear together
    ax.set_xticks(ticks if show else ticks[:: max(1, len(labels) // 30)])
    ax.set_yticks(ticks if show else ticks[:: max(1, len(labels) // 30)])
    if show:
        ax.set_xticklabels(labels, rotation=90, fontsize=7)
        ax.set_yticklabels(labels, fontsize=7)
    ax.set_title(title)
    return _save(fig, path)


def gate_heatmap(table, variate_labels, path):
    """Per-variate softmax gate weights, one row per variate."""
    table = np.asarray(table)
    fig, ax = plt.subplots(figsize=(max(4, table.shape[1] * 0.6), max(3, table.shape[0] * 0.4)))
    im = ax.imshow(table, vmin=0.0, vmax=1.0, cmap="magma", aspect="auto")
    fig.colorbar(im, ax=ax)
    ax.set_yticks(np.arange(len(variate_labels)))
    ax.set_yticklabels(variate_labels, fontsize=8)
    ax.set_xticks(np.arange(table.shape[1]))
    ax.set_xlabel("expert")
    ax.set_title("Gate weights")
    return _save(fig, path)


def magnitude_map(matrix, path, title="Mixed projection magnitude"):
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(matrix, cmap="inferno", aspect="auto")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("input feature (last column: bias)")
    ax.set_ylabel("horizon step")
    ax.set_title(title)
    return _save(fig, path)


def training_curves(train_history, val_history, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(1, len(train_history) + 1)
    ax.plot(epochs, train_history, marker="o", label="train loss")
    ax.plot(epochs, val_history, marker="s", label="validation MSE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("Training progress")
    return _save(fig, path)


def grid_heatmap(k_values, p_values, val_matrix, path, chosen=None):
    """Validation MSE over the (k, p) grid; NaN cells are failures."""
    val_matrix = np.asarray(val_matrix, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(val_matrix, cmap="cividis", aspect="auto")
    fig.colorbar(im, ax=ax)
    ax.set_xticks(np.arange(len(p_values)))
    ax.set_xticklabels([str(p) for p in p_values])
    ax.set_yticks(np.arange(len(k_values)))
    ax.set_yticklabels([str(k) for k in k_values])
    ax.set_xlabel("p")
    ax.set_ylabel("k")
    if chosen is not None:
        ki = list(k_values).index(chosen[0])
        pi = list(p_values).index(chosen[1])
        ax.scatter([pi], [ki], marker="*", s=200, c="red")
    ax.set_title("Grid search validation MSE")
    return _save(fig, path)
