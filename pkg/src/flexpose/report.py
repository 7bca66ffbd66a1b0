"""Figures for run reports: loss traces, layer sweeps, PCA scatter, pose grids."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import pca_embed  # noqa: E402
from .pose import PoseSet  # noqa: E402


def read_loss_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([float(r["loss"]) for r in csv.DictReader(fh)])


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def read_sweep_csv(path) -> list[tuple[str, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["layers"], float(r["initial_loss"]), float(r["final_loss"])) for r in csv.DictReader(fh)]


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_losses(traces: dict[str, np.ndarray], path, smooth: int = 25) -> Path:
    """One line per named trace, with a trailing moving average."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, y in traces.items():
        y = np.asarray(y, dtype=float)
        if len(y) == 0:
            continue
        k = max(1, min(smooth, len(y)))
        avg = np.convolve(y, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(k - 1, len(y)), avg, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_sweep(rows: list[tuple[str, float, float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [r[0] for r in rows]
    ax.bar(names, [r[2] for r in rows], color="tab:blue", label="final")
    if rows:
        ax.axhline(rows[0][1], color="gray", ls="--", label="before adaptation")
    ax.set_xlabel("adapted layer set")
    ax.set_ylabel("reconstruction loss")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_embedding(sets: dict[str, PoseSet], path, max_points: int = 2000) -> tuple[Path, list[np.ndarray]]:
    """PCA scatter of several pose sets in a shared 2D projection."""
    mats = [s.flat()[:max_points] for s in sets.values()]
    pts, _ = pca_embed(mats)
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, p in zip(sets, pts):
        ax.scatter(p[:, 0], p[:, 1], s=4, alpha=0.5, label=name)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.legend(loc="best", markerscale=3)
    return _save(fig, path), pts


def plot_pose_grid(poses: PoseSet, path, n: int = 16) -> Path:
    """Stick figures drawn with the topology's bone colors (y axis points down)."""
    n = min(n, len(poses))
    cols = int(np.ceil(np.sqrt(max(n, 1))))
    rows = int(np.ceil(n / cols)) if n else 1
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows), squeeze=False)
    colors = [tuple(c / 255.0 for c in col) for col in poses.topology.colors]
    for k, ax in enumerate(axes.ravel()):
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_facecolor("black")
        ax.set_xlim(0, 1)
        ax.set_ylim(1, 0)
        if k >= n:
            ax.axis("off")
            continue
        pose = poses.coords[k]
        for (p, c), col in zip(poses.topology.bones, colors):
            ax.plot(pose[[p, c], 0], pose[[p, c], 1], color=col, lw=1.5)
        ax.scatter(pose[:, 0], pose[:, 1], s=4, color="white", zorder=3)
    return _save(fig, path)
