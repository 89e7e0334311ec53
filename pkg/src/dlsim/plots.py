"""Optional figures rendered from the same data that goes into the CSVs.

Imported lazily by the CLI ``--figures`` flag; matplotlib is an optional
dependency (``pip install .[plots]``).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_bler_curves(curves, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 5))
    for c in curves:
        y = np.where(c.bler > 0, c.bler, np.nan)
        ax.semilogy(c.snr_db, y, marker=".", label=f"CQI {c.cqi_index}")
    ax.axhline(0.1, color="k", lw=0.7, ls="--")
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel("BLER")
    ax.set_ylim(1e-4, 1.0)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(ncol=3, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_throughput_cdfs(pooled: dict, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 5))
    for name, drops in sorted(pooled.items()):
        x = np.sort(np.concatenate(drops)) / 1e6
        ax.step(x, np.arange(1, x.size + 1) / x.size, where="post", label=name)
    ax.set_xlabel("UE throughput [Mbit/s]")
    ax.set_ylabel("CDF")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
