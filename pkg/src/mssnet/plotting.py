"""Figure rendering for report outputs; every plot lands next to its CSV."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curve(history: list[dict], out_path):
    steps = [r["step"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r["loss"] for r in history], label="total", lw=1.5)
    if history and "ce" in history[0]:
        ax.plot(steps, [r.get("ce") for r in history], label="cross-entropy", lw=1.0)
    if history and "lovasz" in history[0]:
        ax.plot(steps, [r.get("lovasz") for r in history], label="lovasz", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_iou_bars(class_names, iou, miou_value, out_path):
    iou = np.asarray(iou, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, max(2.5, 0.3 * len(class_names))))
    y = np.arange(len(class_names))
    shown = np.nan_to_num(iou, nan=0.0)
    ax.barh(y, shown, color="steelblue")
    ax.set_yticks(y, class_names)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("IoU")
    ax.set_title(f"mIoU = {miou_value:.4f}")
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_distance_miou(bins, out_path):
    fig, ax = plt.subplots(figsize=(6, 4))
    centers = [(b.lo + b.hi) / 2 for b in bins]
    ax.plot(centers, [b.miou for b in bins], marker="o")
    ax.set_xlabel("horizontal range (m)")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_bench(rows: list[dict], out_path):
    """Per-query hash lookup vs total KNN time, both against point count."""
    n = [r["points"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.loglog(n, [r["hash_query_us"] for r in rows], marker="o")
    ax1.set_xlabel("points")
    ax1.set_ylabel("hash lookup (us / query)")
    ax1.grid(alpha=0.3, which="both")
    ax2.loglog(n, [r["kdtree_total_s"] for r in rows], marker="o", color="firebrick")
    ax2.set_xlabel("points")
    ax2.set_ylabel("kd-tree knn total (s)")
    ax2.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_ablation(rows: list[dict], out_path):
    labels = [r["name"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(rows))
    ax.bar(x, [r["miou"] for r in rows], color="seagreen")
    ax.set_xticks(x, labels, rotation=20, ha="right")
    ax.set_ylabel("mIoU")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
