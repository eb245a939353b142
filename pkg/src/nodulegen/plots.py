"""Matplotlib renderings of run and sweep reports, written to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analyzer import FEATURE_NAMES, SeedStats
from .voxel import VoxelGrid, montage_slices


def save_loss_curve(history, path) -> Path:
    """Per-iteration minibatch MSE on a log scale."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.arange(1, len(history) + 1), history, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("minibatch MSE")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_latent_scatter(points: np.ndarray, path, dims=(0, 1),
                        variances=None) -> Path:
    """Seed positions in two latent dimensions; axes fixed to [-1, 1]."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(points[:, 0], points[:, 1], s=18, alpha=0.8)
    ax.axhline(0.0, color="gray", lw=0.5)
    ax.axvline(0.0, color="gray", lw=0.5)
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(-1.05, 1.05)
    ax.set_xlabel(f"latent dim {dims[0]}")
    ax.set_ylabel(f"latent dim {dims[1]}")
    title = "seed positions in latent space"
    if variances is not None:
        title += f" (var {variances[0]:.3f}, {variances[1]:.3f})"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_feature_comparison(stats: SeedStats, accepted_features: np.ndarray,
                            path) -> Path:
    """Accepted-set feature means/stds normalized by the seed statistics."""
    path = Path(path)
    accepted_features = np.atleast_2d(accepted_features)
    mean_norm = accepted_features.mean(axis=0) / stats.mu
    std_norm = accepted_features.std(axis=0) / stats.sigma
    x = np.arange(len(FEATURE_NAMES))
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.bar(x - 0.2, mean_norm, width=0.4, label="mean / seed mean")
    ax.bar(x + 0.2, std_norm, width=0.4, label="std / seed std")
    ax.axhline(1.0, color="k", lw=0.8, ls="--")
    ax.set_xticks(x)
    ax.set_xticklabels(FEATURE_NAMES, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("normalized to seed set")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_montage_figure(grids: list[VoxelGrid], path, labels=None) -> Path:
    """One middle-8-slice montage strip per grid, stacked vertically."""
    path = Path(path)
    n = len(grids)
    fig, axes = plt.subplots(n, 1, figsize=(8, 1.2 * n), squeeze=False)
    for i, grid in enumerate(grids):
        ax = axes[i][0]
        ax.imshow(montage_slices(grid), cmap="gray", vmin=0.0, vmax=1.0,
                  interpolation="nearest")
        ax.set_axis_off()
        if labels is not None:
            ax.set_title(labels[i], fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_sweep_chart(labels, scores, path) -> Path:
    """Mean composite score per swept configuration."""
    path = Path(path)
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(labels)), 4))
    ax.bar(x, np.nan_to_num(scores, nan=0.0))
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean score")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
