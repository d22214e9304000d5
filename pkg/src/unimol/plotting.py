"""Report figures written next to the CLI's tabular output."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "font.size": 9,
}

LOSS_COLORS = {"l_atom": "C0", "l_coord": "C1", "l_2d3d": "C2", "l_3d2d": "C3", "total": "k"}


def plot_loss_curves(records: Sequence[dict], path) -> None:
    """Per-step loss components on a log axis, with epoch validation loss if present."""
    steps = [r for r in records if r.get("kind") == "step"]
    epochs = [r for r in records if r.get("kind") == "epoch"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.array([r["step"] for r in steps])
        for key, color in LOSS_COLORS.items():
            y = np.array([r.get(key, 0.0) for r in steps])
            if len(y) and np.any(y > 0):
                ax.plot(x, np.where(y > 0, y, np.nan), color=color, lw=1.0 if key != "total" else 1.6,
                        label=key.removeprefix("l_"))
        val = [(r["step"], r["val_loss"]) for r in epochs if "val_loss" in r]
        if val:
            vx, vy = zip(*val)
            ax.plot(vx, vy, "o--", color="0.4", ms=3, lw=0.8, label="validation total")
        ax.set_yscale("log")
        ax.set_xlabel("optimizer step")
        ax.set_ylabel("loss")
        ax.legend(ncol=3, fontsize=8)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_conformation_report(best_rmsd: dict[str, np.ndarray], delta: float, path) -> None:
    """Coverage as a function of the threshold, and the distribution of per-molecule MAT.

    ``best_rmsd`` maps molecule id to the per-reference minimum RMSD.
    """
    all_best = [v for v in best_rmsd.values()]
    hi = max(2.0 * delta, max(float(np.max(v)) for v in all_best) * 1.05)
    grid = np.linspace(0.0, hi, 200)
    cov = np.array([[100.0 * np.mean(v < d) for d in grid] for v in all_best])
    mat = np.array([float(np.mean(v)) for v in all_best])
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        ax1.plot(grid, cov.mean(axis=0), color="C0", label="mean")
        ax1.plot(grid, np.median(cov, axis=0), color="C0", ls="--", label="median")
        ax1.axvline(delta, color="0.5", lw=0.8)
        ax1.set_xlabel("threshold δ (Å)")
        ax1.set_ylabel("COV (%)")
        ax1.set_ylim(-2, 102)
        ax1.legend()
        ax2.hist(mat, bins=min(20, max(5, len(mat))), color="C1", alpha=0.8)
        ax2.axvline(float(np.mean(mat)), color="k", lw=1.0, label=f"mean {np.mean(mat):.3f} Å")
        ax2.set_xlabel("MAT (Å)")
        ax2.set_ylabel("molecules")
        ax2.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
