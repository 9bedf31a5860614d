"""Figure writers. Everything renders off-screen to files."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .shift_metric import visualize_pca_rgb, visualize_pca_rgb_joint  # noqa: E402

COLORS = ["#2b8cbe", "#e34a33", "#31a354", "#756bb1", "#636363"]

RC = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.2,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(p)
    plt.close(fig)
    return p


def save_gate_grid(report, path: str | os.PathLike) -> Path:
    """Input, reference and candidate side by side with their similarity to the input."""
    cand, ref = report.pixel_similarity
    panels = [
        ("input", report.input_image),
        (f"reference ({report.reference_combo.combo_id})\nSSIM {ref:.3f}", report.reference_image),
        (f"candidate ({report.technique.combo_id})\nSSIM {cand:.3f}", report.candidate_image),
    ]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
        for ax, (title, img) in zip(axes, panels):
            ax.imshow(np.asarray(img, dtype=np.uint8))
            ax.set_title(title)
            ax.axis("off")
        fig.suptitle(f"{report.image_id}: {report.verdict}", y=1.02)
        return _save(fig, path)


def save_pca_panels(
    features: Sequence[tuple[str, np.ndarray]], path: str | os.PathLike, joint: bool = False, image=None
) -> Path:
    """Top-3 principal components of each (c, h, w) map rendered as RGB.

    ``joint`` fits one projection across all maps so colours are comparable.
    """
    names = [n for n, _ in features]
    arrs = [np.asarray(f) for _, f in features]
    rgbs = visualize_pca_rgb_joint(arrs) if joint else [visualize_pca_rgb(a) for a in arrs]
    panels = ([("image", np.asarray(image, dtype=np.uint8))] if image is not None else []) + list(zip(names, rgbs))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.0 * len(panels), 2.2), squeeze=False)
        for ax, (title, img) in zip(axes[0], panels):
            ax.imshow(img, interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)


def save_weight_stats(history: Sequence, path: str | os.PathLike, title: str = "") -> Path:
    """Per-epoch weight concentration (left) and assigner overlap (right)."""
    ep = np.arange(1, len(history) + 1)
    with plt.rc_context(RC):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7.0, 2.6))
        a.plot(ep, [s.mean_top1 for s in history], label="top-1")
        a.plot(ep, [s.mean_top2 for s in history], label="top-2")
        a.plot(ep, [s.mean_all for s in history], label="all", linestyle="--")
        a.set_xlabel("epoch")
        a.set_ylabel("mean weight")
        a.set_ylim(0, 1.02)
        a.legend(frameon=False)
        rates = [
            ("top-1 overlap", [s.overlap_top1_rate for s in history]),
            ("top-2 overlap", [s.overlap_top2_rate for s in history]),
            ("no overlap", [s.no_overlap_rate for s in history]),
        ]
        if all(v is not None for _, vals in rates for v in vals):
            a_bottom = np.zeros(len(ep))
            for label, vals in rates:
                b.bar(ep, vals, bottom=a_bottom, label=label, width=0.85)
                a_bottom += np.asarray(vals)
            b.set_ylim(0, 1.02)
            b.legend(frameon=False, loc="lower right")
        else:
            b.text(0.5, 0.5, "overlap undefined\n(one assigner)", ha="center", va="center", transform=b.transAxes)
        b.set_xlabel("epoch")
        b.set_ylabel("fraction of samples")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def save_weight_histogram(W, path: str | os.PathLike) -> Path:
    w = np.asarray(W, dtype=np.float64)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.4, 2.4))
        ax.hist(w.ravel(), bins=np.linspace(0, 1, 21), color=COLORS[0])
        ax.set_xlabel("assigned weight")
        ax.set_ylabel("count")
        return _save(fig, path)


def save_bars(labels: Sequence[str], values: Sequence[float], path, ylabel: str, title: str = "") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.6 * len(labels) + 1.5), 2.6))
        x = np.arange(len(labels))
        ax.bar(x, values, color=COLORS[0])
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        for xi, v in zip(x, values):
            ax.annotate(f"{v:.3f}", (xi, v), ha="center", va="bottom", fontsize=6)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def save_score_bars(rows: Sequence[dict], path) -> Path:
    return save_bars([r["combo_id"] for r in rows], [r["score"] for r in rows], path, "shift Score")


def save_ablation_bars(rows: Sequence[dict], path, metric: str = "miou") -> Path:
    labels = ["+".join(r["combos"]) for r in rows]
    return save_bars(labels, [r[metric] for r in rows], path, metric)
