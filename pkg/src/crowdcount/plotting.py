"""Figure rendering for reports: density heatmaps and per-bin MAE bars.

Everything is written to raster files; no interactive backends.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import DensityBin


def save_density_panel(path, image: np.ndarray, gt_map: np.ndarray,
                       pred_map: np.ndarray, title: str = "") -> None:
    """Side-by-side input / ground-truth / estimated density heatmaps."""
    vmax = max(float(gt_map.max()), float(pred_map.max()), 1e-9)
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.6))
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title("(a) input")
    axes[1].imshow(gt_map, cmap="jet", vmin=0, vmax=vmax)
    axes[1].set_title(f"(b) ground truth ({gt_map.sum():.1f})")
    im = axes[2].imshow(pred_map, cmap="jet", vmin=0, vmax=vmax)
    axes[2].set_title(f"(c) estimate ({pred_map.sum():.1f})")
    for ax in axes:
        ax.set_xticks(())
        ax.set_yticks(())
    if title:
        fig.suptitle(title)
    fig.colorbar(im, ax=axes, fraction=0.03)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_bin_mae_bars(path, bins: list[DensityBin], title: str = "MAE by density level") -> None:
    """Bar chart of per-bin MAE; empty bins are drawn at zero and hatched."""
    labels = [f"[{b.low:g}, {b.high:g})" for b in bins]
    values = [0.0 if b.mae is None else b.mae for b in bins]
    hatches = ["//" if b.mae is None else "" for b in bins]
    fig, ax = plt.subplots(figsize=(1.4 * len(bins) + 2, 3.6))
    bars = ax.bar(range(len(bins)), values, color="#4878d0", edgecolor="black")
    for bar, hatch in zip(bars, hatches):
        bar.set_hatch(hatch)
    ax.set_xticks(range(len(bins)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("MAE")
    ax.set_title(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
