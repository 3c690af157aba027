"""Matplotlib figures written next to the tab-separated reports.

Everything renders through the Agg backend straight to a file; nothing is
shown interactively.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

WATER_CMAP = matplotlib.colors.ListedColormap(["#d9c9a3", "#2b6cb0"])


def _rgb(image) -> np.ndarray:
    arr = getattr(image, "data", image)
    return np.clip(np.asarray(arr).transpose(1, 2, 0), 0.0, 1.0)


def _save(fig, path) -> None:
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def history_figure(history: Sequence[dict], path) -> None:
    """Training loss (log scale) and evaluation mIoU/PA against step."""
    steps = [r["step"] for r in history]
    with plt.rc_context(RC):
        fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax_l.plot(steps, [r["loss"] for r in history], "-o", ms=3, color="k")
        ax_l.set_yscale("log")
        ax_l.set_xlabel("step")
        ax_l.set_ylabel("training loss")
        ax_m.plot(steps, [r["miou"] for r in history], "-o", ms=3, label="mIoU")
        ax_m.plot(steps, [r["pa"] for r in history], "-s", ms=3, label="PA")
        ax_m.set_xlabel("step")
        ax_m.set_ylim(0, 1.02)
        ax_m.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        _save(fig, path)


def report_figure(samples, predictions, scores, path, max_rows: int = 8) -> None:
    """Image / ground truth / prediction panels, one row per evaluated image."""
    rows = min(len(samples), max_rows)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, 3, figsize=(5.4, 1.8 * rows), squeeze=False)
        for r in range(rows):
            s, pred, sc = samples[r], predictions[r], scores[r]
            axes[r, 0].imshow(_rgb(s.image))
            axes[r, 1].imshow(s.mask.to_array(), cmap=WATER_CMAP, vmin=0, vmax=1)
            axes[r, 2].imshow(pred.to_array(), cmap=WATER_CMAP, vmin=0, vmax=1)
            axes[r, 0].set_ylabel(s.id)
            axes[r, 2].set_title(f"mIoU {sc.miou:.3f}  FC {sc.fc:.3f}")
            for ax in axes[r]:
                ax.set_xticks([])
                ax.set_yticks([])
        axes[0, 0].set_title("image")
        axes[0, 1].set_title("truth")
        fig.tight_layout()
        _save(fig, path)


def inference_figure(image, mask, fc: float, path) -> None:
    """Input next to the predicted water mask, FC in the title."""
    with plt.rc_context(RC):
        fig, (a, b) = plt.subplots(1, 2, figsize=(5, 2.6))
        a.imshow(_rgb(image))
        b.imshow(mask.to_array(), cmap=WATER_CMAP, vmin=0, vmax=1)
        b.set_title(f"FC = {fc:.4f}")
        for ax in (a, b):
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        _save(fig, path)
