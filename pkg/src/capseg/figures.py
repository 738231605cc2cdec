"""Matplotlib figure rendering for the report paths.

Every CLI report command writes figures next to its delimited output:
per-class precision-recall panels, training-loss curves, the ablation
comparison chart, and pseudo-label inspection panels (image, pseudo mask,
per-pixel noise, reliability).
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 7,
}


def save_pr_curves(pr_curves: Mapping[str, tuple[list[float], list[float]]], path, title: str = "") -> None:
    """Grid of per-class PR curves (raw points, no interpolation applied)."""
    classes = sorted(pr_curves)
    cols = min(4, max(1, len(classes)))
    rows = (len(classes) + cols - 1) // cols
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.0 * rows), squeeze=False)
        for k, cls in enumerate(classes):
            ax = axes[k // cols][k % cols]
            recalls, precisions = pr_curves[cls]
            ax.plot([0.0] + list(recalls), [1.0] + list(precisions), lw=1.2)
            ax.set_xlim(0, 1.02)
            ax.set_ylim(0, 1.02)
            ax.set_title(cls)
        for k in range(len(classes), rows * cols):
            axes[k // cols][k % cols].axis("off")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def save_training_curves(rows: Sequence[dict], path, title: str = "") -> None:
    """Loss components over iterations from the CSV log rows."""
    if not rows:
        return
    iters = [r["iteration"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for key in ("l_gt", "l_x", "l_m", "l_x_alpha"):
            values = [r[key] for r in rows]
            if any(v != 0.0 for v in values):
                ax.plot(iters, values, lw=1.0, label=key)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def save_ablation_chart(rows: Sequence[dict], path) -> None:
    """Grouped bars of generalized base/target mAP per strategy."""
    if not rows:
        return
    names = [r["strategy"] for r in rows]
    base = [r.get("map_base") or 0.0 for r in rows]
    target = [r.get("map_target") or 0.0 for r in rows]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2.0, 3.0))
        ax.bar(x - 0.18, base, width=0.36, label="base mAP")
        ax.bar(x + 0.18, target, width=0.36, label="target mAP")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("generalized mAP@0.5")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def save_pseudo_label_panel(
    image: np.ndarray,
    records: Sequence[dict],
    path,
    title: str = "",
) -> None:
    """Image with aligned boxes plus per-object pseudo mask and noise map.

    ``records`` are pseudo-label dump entries (mask decoded by caller into
    the optional ``mask`` key; ``noise_map`` optional).
    """
    n = max(1, len(records))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 3, figsize=(6.6, 2.2 * n), squeeze=False)
        for row, rec in enumerate(records):
            ax = axes[row][0]
            ax.imshow(image)
            x0, y0, x1, y1 = rec["box"]
            ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, color="w", lw=1.2))
            label = rec["object"]
            if "alpha" in rec:
                label += f"  α={rec['alpha']:.2f}"
            ax.set_title(label)
            ax.axis("off")
            ax = axes[row][1]
            if "mask" in rec:
                ax.imshow(rec["mask"], cmap="gray", vmin=0, vmax=1)
            ax.set_title("pseudo mask")
            ax.axis("off")
            ax = axes[row][2]
            if "noise_map" in rec:
                im = ax.imshow(np.asarray(rec["noise_map"]), cmap="magma")
                fig.colorbar(im, ax=ax, fraction=0.046)
                ax.set_title(f"noise (mean {rec.get('mean_noise', 0.0):.3g})")
            ax.axis("off")
        if not records:
            axes[0][0].imshow(image)
            axes[0][0].set_title("no object nouns in caption")
            for col in range(3):
                axes[0][col].axis("off")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
