"""Tab-separated tables and matplotlib figures for training runs and the
loss-selection study."""
from __future__ import annotations

import csv
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["write_tsv", "read_tsv", "write_grid", "read_grid", "plot_grid", "plot_history"]

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_tsv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_tsv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    return rows[0], rows[1:]


def write_grid(path, grid, row_labels, col_labels, corner="train_loss"):
    """``grid[i][j]`` is the score of row ``i`` (training loss) under column ``j``."""
    write_tsv(path, [corner] + list(col_labels),
              [[r] + [float(v) for v in vals] for r, vals in zip(row_labels, grid)])


def read_grid(path):
    header, rows = read_tsv(path)
    labels = [r[0] for r in rows]
    values = np.array([[float(v) for v in r[1:]] for r in rows])
    return values, labels, header[1:]


def plot_grid(path, grid, row_labels, col_labels, title="held-out error (lower is better)"):
    """Heatmap with per-column ranking: each column is normalized to its own range
    and the best entry is boxed."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(axis=0), g.max(axis=0)
    norm = (g - lo) / np.where(hi > lo, hi - lo, 1.0)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * g.shape[1], 0.9 + 0.45 * g.shape[0]))
    ax.imshow(norm, cmap="viridis_r", vmin=0, vmax=1, aspect="auto")
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            best = g[i, j] == lo[j]
            ax.text(j, i, f"{g[i, j]:.4f}", ha="center", va="center", fontsize=8,
                    color="k" if norm[i, j] < 0.5 else "w", fontweight="bold" if best else "normal")
            if best:
                ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, lw=1.5, ec="r"))
    ax.set_xticks(range(g.shape[1]), [f"eval {c}" for c in col_labels])
    ax.set_yticks(range(g.shape[0]), [f"train {r}" for r in row_labels])
    ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)


def plot_history(path, histories, title="training loss"):
    """Per-epoch train (solid) and validation (dashed) totals; ``histories``
    maps a label to a ``History`` or its dict form."""
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    for k, (label, h) in enumerate(histories.items()):
        h = h if isinstance(h, dict) else h.to_dict()
        ep = np.arange(1, len(h["train"]) + 1)
        color = f"C{k}"
        ax.plot(ep, h["train"], color=color, label=f"{label} train")
        val = np.asarray(h["val"], dtype=np.float64)
        if np.any(np.isfinite(val)):
            ax.plot(ep, val, color=color, ls="--", label=f"{label} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.set_title(title)
    ax.legend(fontsize=7, frameon=False)
    fig.savefig(path)
    plt.close(fig)
