"""Matplotlib report figures written alongside the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# keep PNG bytes identical across reruns of the same inputs
_PNG_META = {"Software": "featvis"}


def save_embedding_scatter(path, rows, centers=None):
    """Scatter of the 2D embeddings colored by cluster, centers marked."""
    xs = np.asarray([r[0] for r in rows])
    ys = np.asarray([r[1] for r in rows])
    cluster = np.asarray([r[2] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 4.2))
    for cid in np.unique(cluster):
        sel = cluster == cid
        ax.scatter(xs[sel], ys[sel], s=28, label=f"cluster {cid}", alpha=0.85)
    if centers is not None:
        centers = np.asarray(centers)
        ax.scatter(centers[:, 0], centers[:, 1], marker="x", s=90, c="black",
                   linewidths=2.0, label="centers")
    ax.set_xlabel("embedding x")
    ax.set_ylabel("embedding y")
    ax.legend(loc="best", fontsize=8)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def save_loss_curves(path, rows):
    """Loss terms and the distance/score trajectories over iterations."""
    it = [r.iter for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(it, [r.total for r in rows], label="total", lw=1.4)
    ax1.plot(it, [r.ad for r in rows], label="distance term", lw=1.0)
    ax1.plot(it, [-r.dm for r in rows], label="-activation score", lw=1.0)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(it, [r.mdist for r in rows], label="mdist", lw=1.2, color="tab:red")
    ax2.plot(it, [r.dm for r in rows], label="activation score", lw=1.2,
             color="tab:green")
    ax2.set_xlabel("iteration")
    ax2.legend(fontsize=8)
    for ax in (ax1, ax2):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
