"""Figure rendering for evaluation reports and training logs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def plot_pr_curve(curves, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    ax.plot(curves["recall"], curves["precision"], color="crimson", lw=1.6)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3, lw=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_fmeasure_curve(curves, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    ax.plot(curves["threshold"], curves["fmeasure"], color="crimson", lw=1.6)
    ax.set_xlabel("Threshold")
    ax.set_ylabel("F-measure")
    ax.set_xlim(0, 255)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3, lw=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_training_log(epochs, train_loss, val_mae, path) -> Path:
    path = Path(path)
    fig, ax1 = plt.subplots(figsize=(5.2, 3.6))
    ax1.plot(epochs, train_loss, color="steelblue", lw=1.6, label="train loss")
    ax1.set_xlabel("Epoch")
    ax1.set_ylabel("Loss", color="steelblue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, val_mae, color="crimson", lw=1.6, label="val MAE")
    ax2.set_ylabel("Validation MAE", color="crimson")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
