"""Matplotlib renderings saved next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_loss_curves(history, path) -> None:
    """Training/validation curves from per-epoch stats."""
    epochs = [h.epoch for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [h.train_loss for h in history], label="train loss")
    ax1.plot(epochs, [h.val_loss for h in history], label="val loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("masked reconstruction loss")
    ax1.legend()
    ax2.plot(epochs, [h.val_nmse for h in history], color="tab:red")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation NMSE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_heatmap(values: np.ndarray, row_labels, col_labels, path,
                   title: str = "", value_fmt: str = "{:.2f}") -> None:
    """Annotated heatmap; rows are codebook sizes, columns train fractions."""
    fig, ax = plt.subplots(figsize=(1.2 * len(col_labels) + 2, 0.6 * len(row_labels) + 2))
    im = ax.imshow(values, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(col_labels)), [str(c) for c in col_labels])
    ax.set_yticks(range(len(row_labels)), [str(r) for r in row_labels])
    ax.set_xlabel("train fraction")
    ax.set_ylabel("codebook size")
    if title:
        ax.set_title(title)
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            if np.isfinite(values[i, j]):
                ax.text(j, i, value_fmt.format(values[i, j]),
                        ha="center", va="center", color="white", fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_f1_lines(fractions, series: dict, path, title: str = "") -> None:
    """Macro-F1 versus train fraction, one line per feature kind."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in series.items():
        ax.plot(fractions, values, marker="o", label=label)
    ax.set_xlabel("train fraction")
    ax.set_ylabel("macro-F1")
    ax.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_attention_grid(maps: np.ndarray, path) -> None:
    """Layers-by-heads grid of attention maps for one channel."""
    layers, heads = maps.shape[0], maps.shape[1]
    fig, axes = plt.subplots(layers, heads,
                             figsize=(1.4 * heads, 1.4 * layers), squeeze=False)
    for li in range(layers):
        for hi in range(heads):
            ax = axes[li][hi]
            ax.imshow(maps[li, hi], cmap="magma")
            ax.set_xticks([])
            ax.set_yticks([])
            if hi == 0:
                ax.set_ylabel(f"L{li}", fontsize=7)
            if li == layers - 1:
                ax.set_xlabel(f"H{hi}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
