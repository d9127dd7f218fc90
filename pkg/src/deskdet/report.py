"""Matplotlib figures for evaluation and ablation output (rendered off-screen)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "deskdet",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    meta = {"Software": None} if path.suffix == ".png" else {"Date": None}
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_pr_curves(curves: Mapping[str, Sequence[tuple[float, float]]], path, title: str = "") -> Path:
    """One precision/recall line per entry of ``curves`` (label -> [(recall, precision)])."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        for label, pts in curves.items():
            if len(pts):
                r, p = zip(*pts)
                ax.step(r, p, where="post", label=label, lw=1.4)
            else:
                ax.plot([], [], label=f"{label} (no detections)")
        ax.set_xlim(0, 1.0)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower left", frameon=False)
        return _save(fig, path)


def plot_ablation(rows: Sequence[Mapping], path, metrics=("AP@0.5", "AP@0.7", "AP@0.8")) -> Path:
    """Grouped bars of ``metrics`` for each ablation row (rows carry a ``name`` key)."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.9 * len(rows), 3.4))
        width = 0.8 / max(len(metrics), 1)
        for k, m in enumerate(metrics):
            xs = [i + (k - (len(metrics) - 1) / 2) * width for i in range(len(rows))]
            ax.bar(xs, [float(r[m]) for r in rows], width=width, label=m)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([r["name"] for r in rows], rotation=20)
        ax.set_ylim(0, 1.0)
        ax.set_ylabel("AP")
        ax.legend(frameon=False, ncol=len(metrics), loc="upper left")
        return _save(fig, path)


def plot_losses(history: Sequence, path) -> Path:
    """Per-epoch loss components from ``EpochRecord`` entries."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        epochs = [h.epoch for h in history]
        for attr in ("str_loss", "stc_loss", "fsm_loss", "total"):
            ax.plot(epochs, [getattr(h, attr) for h in history], label=attr.replace("_loss", ""),
                    lw=1.8 if attr == "total" else 1.0)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)
