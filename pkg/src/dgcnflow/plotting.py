"""Report figures rendered headless to PNG with reproducible bytes."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no Software/date chunks, so identical data gives identical files
PNG_METADATA = {"Software": None}

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "dgcnflow",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def loss_curves(histories: dict[str, tuple[list[float], list[float]]], path: str | Path) -> Path:
    """Train (solid) and validation (dashed) loss per epoch for each labelled run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.6))
        for k, (label, (train, val)) in enumerate(sorted(histories.items())):
            color = f"C{k % 10}"
            epochs = np.arange(1, len(train) + 1)
            ax.plot(epochs, train, color=color, lw=1.2, label=f"{label} train")
            ax.plot(epochs, val, color=color, lw=1.2, ls="--", label=f"{label} val")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE (scaled)")
        ax.legend(frameon=False, fontsize=7, ncol=2)
        fig.tight_layout()
        return _save(fig, path)


def prediction_scatter(pred: np.ndarray, true: np.ndarray, path: str | Path, title: str = "") -> Path:
    pred = np.ravel(pred)
    true = np.ravel(true)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(true, pred, s=2, alpha=0.3, color="C0", rasterized=True)
        hi = float(max(true.max(initial=0.0), pred.max(initial=0.0)))
        ax.plot([0, hi], [0, hi], color="k", lw=0.8)
        ax.set_xlim(0, hi)
        ax.set_ylim(0, hi)
        ax.set_xlabel("observed flow (veh/h)")
        ax.set_ylabel("predicted flow (veh/h)")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def rmse_bars(summary: dict, path: str | Path, metric: str = "rmse") -> Path:
    """Mean of ``metric`` per model with one-std error bars, from an experiment summary."""
    names = list(summary)
    means = [summary[n][f"mean_{metric}"] or 0.0 for n in names]
    stds = [summary[n][f"std_{metric}"] or 0.0 for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.2))
        x = np.arange(len(names))
        ax.bar(x, means, yerr=stds, color=[f"C{k % 10}" for k in x], capsize=4)
        ax.set_xticks(x, names)
        ax.set_ylabel(f"test {metric.upper()}")
        fig.tight_layout()
        return _save(fig, path)
