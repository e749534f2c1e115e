"""Matplotlib renderings written next to each report's CSV/JSON output.

All figures go straight to files through the Agg backend; nothing opens
a window. Rendering is deterministic: identical inputs give identical
bytes, which the CLI's reproducibility guarantee relies on.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE = dict(dpi=110, bbox_inches="tight")


def save_report_bars(entries, value_key: str, path, title: str) -> None:
    """Horizontal log-scale bars of one error value per suite entry,
    with each entry's own limit marked where present."""
    names = [e["name"] for e in entries]
    values = [max(e[value_key], 1e-17) for e in entries]
    limits = [e.get("tolerance", e.get("limit")) for e in entries]
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(entries) + 1.2))
    ypos = np.arange(len(entries))
    ax.barh(ypos, values, color="#4878d0")
    for y, lim in zip(ypos, limits):
        if lim:
            ax.plot([lim, lim], [y - 0.4, y + 0.4], color="#d65f5f", lw=1.2)
    ax.set_yticks(ypos)
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xscale("log")
    ax.set_xlabel(value_key)
    ax.set_title(title)
    ax.invert_yaxis()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_training_curves(rows, path) -> None:
    """Loss and accuracies against iteration, from metrics rows."""
    iters = [r.iteration for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(iters, [r.loss for r in rows], marker="o", ms=3)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("batch loss")
    ax2.plot(iters, [r.train_acc for r in rows], marker="o", ms=3, label="train")
    ax2.plot(iters, [r.eval_acc for r in rows], marker="s", ms=3, label="held-out")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("exact accuracy")
    ax2.set_ylim(0, 1.05)
    ax2.legend(loc="lower right", fontsize=8)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_sketch_stats_figure(stats: dict, path) -> None:
    """Bucket-count histogram with the closed-form mean, and the
    inner-product estimate distribution with the exact value."""
    bucket = stats["bucket"]
    ip = stats["inner_product"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    counts = bucket["counts"]
    bins = np.arange(counts.min() - 0.5, counts.max() + 1.5)
    ax1.hist(counts, bins=bins, color="#4878d0")
    ax1.axvline(bucket["expected_mean"], color="#d65f5f", lw=1.5, label="expected mean")
    ax1.set_xlabel("terms in one bucket")
    ax1.set_ylabel("trials")
    ax1.legend(fontsize=8)
    ax2.hist(ip["estimates"], bins=40, color="#4878d0")
    ax2.axvline(ip["true_inner_product"], color="#d65f5f", lw=1.5, label="exact inner product")
    ax2.set_xlabel("sketched inner product")
    ax2.legend(fontsize=8)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_params_sweep(sweep_rows, path) -> None:
    """Total parameter count against the joint embedding width for the
    factored and sketched poolings."""
    ds = [r["d"] for r in sweep_rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.plot(ds, [r["low_rank"] for r in sweep_rows], marker="o", ms=4, label="factored")
    ax.plot(ds, [r["compact"] for r in sweep_rows], marker="s", ms=4, label="sketched projection")
    ax.set_xlabel("joint embedding width d")
    ax.set_ylabel("parameters")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
