"""Evaluation and training reports: JSON summary, per-frame CSV, and
matplotlib figures rendered next to them.

Reports carry no timestamps so identical runs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

METRIC_KEYS = ("abs", "abs-rel", "abs-inv", "inlier-1.25")


def config_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def save_report(report: dict, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def load_report(path) -> dict:
    with open(path) as f:
        return json.load(f)


def save_frame_metrics_csv(rows: list, path):
    """rows: (frame_index, MetricsReport or None)."""
    with open(path, "w") as f:
        f.write("frame,abs,abs-rel,abs-inv,inlier-1.25,valid-pixels,skipped\n")
        for index, rep in rows:
            if rep is None:
                f.write(f"{index},,,,,,1\n")
            else:
                f.write(f"{index},{rep.abs_err!r},{rep.abs_rel!r},"
                        f"{rep.abs_inv!r},{rep.inlier_ratio!r},"
                        f"{rep.valid_count},0\n")


def render_metric_figures(rows: list, out_dir) -> list:
    """Per-frame metric curves and an error histogram; returns file paths."""
    os.makedirs(out_dir, exist_ok=True)
    frames = [i for i, r in rows if r is not None]
    series = {
        "abs": [r.abs_err for _, r in rows if r is not None],
        "abs-rel": [r.abs_rel for _, r in rows if r is not None],
        "abs-inv": [r.abs_inv for _, r in rows if r is not None],
        "inlier-1.25": [r.inlier_ratio for _, r in rows if r is not None],
    }
    paths = []
    if not frames:
        return paths
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for ax, (name, values) in zip(axes.ravel(), series.items()):
        ax.plot(frames, values, lw=1.2)
        ax.set_title(name)
        ax.set_xlabel("frame")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    curve_path = os.path.join(out_dir, "metrics_per_frame.png")
    fig.savefig(curve_path, dpi=120)
    plt.close(fig)
    paths.append(curve_path)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(series["abs-inv"], bins=24, color="#4878a8")
    ax.set_xlabel("mean absolute inverse-depth error (1/m)")
    ax.set_ylabel("frames")
    fig.tight_layout()
    hist_path = os.path.join(out_dir, "abs_inv_histogram.png")
    fig.savefig(hist_path, dpi=120)
    plt.close(fig)
    paths.append(hist_path)
    return paths


def render_depth_figure(pred_values: np.ndarray, gt_values, out_path):
    """Side-by-side inverse-depth preview of a prediction (and groundtruth)."""
    cols = 2 if gt_values is not None else 1
    fig, axes = plt.subplots(1, cols, figsize=(4 * cols, 3.5))
    axes = np.atleast_1d(axes)
    vmax = 1.0 / max(float(pred_values.min()), 1e-3)
    im = axes[0].imshow(1.0 / pred_values, cmap="turbo", vmin=0, vmax=vmax)
    axes[0].set_title("prediction (1/m)")
    axes[0].axis("off")
    if gt_values is not None:
        safe = np.where(gt_values > 0, gt_values, np.inf)
        axes[1].imshow(1.0 / safe, cmap="turbo", vmin=0, vmax=vmax)
        axes[1].set_title("groundtruth (1/m)")
        axes[1].axis("off")
    fig.colorbar(im, ax=list(axes), shrink=0.85)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out_path


def render_loss_curve(loss_log_csv, out_path):
    stages = []
    iters = []
    losses = []
    with open(loss_log_csv) as f:
        next(f)
        for line in f:
            stage, it, loss, _ = line.rstrip("\n").split(",", 3)
            stages.append(stage)
            iters.append(int(it))
            losses.append(float(loss))
    if not losses:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(losses))
    ax.plot(x, losses, lw=1.0)
    boundaries = [i for i in range(1, len(stages)) if stages[i] != stages[i - 1]]
    for b in boundaries:
        ax.axvline(b, color="gray", ls="--", lw=0.8)
    seen = []
    for i, s in enumerate(stages):
        if not seen or seen[-1][1] != s:
            seen.append((i, s))
    for i, s in seen:
        ax.text(i, max(losses), s, fontsize=8, rotation=90, va="top")
    ax.set_xlabel("iteration (all stages)")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
