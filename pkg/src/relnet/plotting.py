"""PNG companions to the PPM/CSV outputs, drawn with matplotlib."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_decision_map(dmap, path, title: str = "") -> Path:
    """Prediction and ground truth side by side, query marked."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    lo, hi = dmap.box
    for ax, grid, name in zip(axes, (dmap.pred, dmap.truth), ("predicted", "ground truth")):
        ax.imshow(grid, extent=(lo, hi, lo, hi), origin="upper", cmap="cividis", vmin=0, vmax=1)
        ax.plot(*dmap.query, marker="+", color="red", markersize=12, mew=2)
        ax.set_title(name)
    fig.suptitle(f"{title}  pixel accuracy {dmap.accuracy:.4f}".strip())
    return _save(fig, path)


def plot_scatter(points, labels, path, title: str = "") -> Path:
    pts = np.asarray(points)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(pts[:, 0], pts[:, 1], c=np.asarray(labels), cmap="tab10", s=12)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(title)
    return _save(fig, path)


def plot_metrics(metrics_csv, path) -> Path:
    """Loss (and validation accuracy when logged) against training step."""
    steps, losses, val_steps, vals = [], [], [], []
    with open(metrics_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
            if row.get("val_acc"):
                val_steps.append(int(row["step"]))
                vals.append(float(row["val_acc"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("MSE loss", color="tab:blue")
    if vals:
        ax2 = ax.twinx()
        ax2.plot(val_steps, vals, color="tab:orange", marker="o")
        ax2.set_ylabel("validation accuracy", color="tab:orange")
    return _save(fig, path)


def plot_accuracy_bars(results: list[dict], path) -> Path:
    """Held-out accuracy per comparator kind, one bar group per seed."""
    kinds = list(dict.fromkeys(r["comparator"] for r in results))
    seeds = list(dict.fromkeys(r["seed"] for r in results))
    width = 0.8 / max(len(kinds), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, kind in enumerate(kinds):
        acc = [next(r["accuracy"] for r in results if r["seed"] == s and r["comparator"] == kind) for s in seeds]
        ax.bar(np.arange(len(seeds)) + k * width, acc, width, label=kind)
    ax.set_xticks(np.arange(len(seeds)) + width * (len(kinds) - 1) / 2, [f"seed {s}" for s in seeds])
    ax.set_ylim(0, 1)
    ax.set_ylabel("held-out accuracy")
    ax.legend(loc="lower right")
    return _save(fig, path)
