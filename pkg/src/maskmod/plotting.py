"""PNG rendering of a mask-density report (density and k values per depth)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _scalar(v) -> float:
    # channel-wise k1 is a vector; plot its mean
    return float(np.mean(v))


def plot_density(report, path) -> Path:
    """Two panels: fraction of ones per masked layer, and k1..k3 per layer."""
    path = Path(path)
    depth = [l.depth for l in report.layers]
    names = [l.layer for l in report.layers]
    fig, (ax_d, ax_k) = plt.subplots(1, 2, figsize=(9, 3.5))

    ax_d.bar(depth, [l.density for l in report.layers], color="tab:blue")
    ax_d.set_ylim(0, 1)
    ax_d.set_ylabel("fraction of ones")
    ax_d.set_title("mask density")

    for key, marker in (("k1", "o"), ("k2", "s"), ("k3", "^")):
        ax_k.plot(depth, [_scalar(l.k[key]) for l in report.layers], marker=marker, label=key)
    ax_k.axhline(0, color="0.6", lw=0.8)
    ax_k.set_title("k values")
    ax_k.legend(frameon=False)

    for ax in (ax_d, ax_k):
        ax.set_xticks(depth)
        ax.set_xticklabels(names, rotation=30, ha="right")
    fig.suptitle(f"{report.task} ({report.variant})")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
