"""Matplotlib figures written next to the delimited text outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imageio import to_uint8  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curves(records: list, path) -> Path:
    """Branch losses on the left, train accuracy and attention IoU on the right."""
    epochs = [r.epoch for r in records]
    fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(9, 3.4))
    for name in ("L_A", "L_g", "L_p", "L_final"):
        vals = np.array([getattr(r, name) for r in records], dtype=float)
        if np.isfinite(vals).any():
            ax_l.plot(epochs, vals, marker=".", label=name)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("cross-entropy")
    ax_l.legend(frameon=False)
    ax_r.plot(epochs, [r.acc_final for r in records], marker=".", label="final-head train acc")
    ax_r.plot(epochs, [r.mean_iou for r in records], marker=".", label="attention IoU")
    ax_r.set_ylim(0, 1)
    ax_r.set_xlabel("epoch")
    ax_r.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def _draw_box(ax, box, color, label=None):
    ax.add_patch(
        plt.Rectangle(
            (box.x0 - 0.5, box.y0 - 0.5), box.width, box.height, fill=False, edgecolor=color, linewidth=1.6, label=label
        )
    )


def plot_attention(image, cam, box, region, path, truth=None, title: str = "") -> Path:
    """Input with the upsampled class map, predicted (and true) box, and the zoomed crop."""
    rgb = to_uint8(image)
    h, w = rgb.shape[:2]
    fig, axes = plt.subplots(1, 3, figsize=(8, 2.9))
    axes[0].imshow(rgb)
    axes[0].set_title("input")
    axes[1].imshow(rgb)
    if cam is not None:
        axes[1].imshow(cam, cmap="jet", alpha=0.45, extent=(-0.5, w - 0.5, h - 0.5, -0.5), interpolation="bilinear")
    _draw_box(axes[1], box, "white", "attended")
    if truth is not None:
        _draw_box(axes[1], truth, "lime", "object")
        axes[1].legend(loc="lower right", fontsize=6, frameon=False, labelcolor="white")
    axes[1].set_title(title or "class map")
    axes[2].imshow(to_uint8(region))
    axes[2].set_title("zoomed region")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_branch_accuracy(metrics: dict, path, title: str = "") -> Path:
    keys = [k for k, v in metrics.items() if k.endswith("_acc") and np.isfinite(v)]
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(keys), 3))
    ax.bar(range(len(keys)), [metrics[k] for k in keys], color="tab:blue")
    ax.set_xticks(range(len(keys)), [k.removesuffix("_acc") for k in keys], rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("test accuracy")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_gradcheck(rows: list, path, tol: float) -> Path:
    """Log-scale bar chart of worst relative error per checked op."""
    names = [r[0] for r in rows]
    errs = np.maximum([r[1] for r in rows], 1e-16)
    fig, ax = plt.subplots(figsize=(6, 0.3 * len(rows) + 1))
    ax.barh(range(len(rows)), errs, color=["tab:green" if e < t else "tab:red" for e, t in zip(errs, [r[2] for r in rows])])
    ax.axvline(tol, color="k", linestyle="--", linewidth=0.8)
    ax.set_xscale("log")
    ax.set_yticks(range(len(rows)), names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("max relative error")
    fig.tight_layout()
    return _save(fig, path)
