"""Report figures rendered to image files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def accuracy_curve(errors: Sequence[float], max_threshold: float = 0.1, n: int = 200):
    """Fraction of frames with error below each threshold in [0, max_threshold]."""
    e = np.asarray(errors, dtype=np.float64)
    t = np.linspace(0.0, max_threshold, n)
    return t, (e[None, :] < t[:, None]).mean(axis=1) if len(e) else np.zeros(n)


def plot_errors(report, path, max_threshold: float | None = None) -> Path:
    """Per-frame ADD / ADD-S (mm) on the left, the accuracy-threshold curves on the right."""
    max_threshold = max_threshold or report.max_threshold
    add = np.array([p[1] for p in report.per_frame])
    adds = np.array([p[2] for p in report.per_frame])
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
        a.semilogy(add * 1000, label="ADD")
        a.semilogy(adds * 1000, label="ADD-S", alpha=0.8)
        a.set_xlabel("frame")
        a.set_ylabel("error [mm]")
        a.legend()
        for name, e, auc in (("ADD", add, report.add_auc), ("ADD-S", adds, report.adds_auc)):
            t, acc = accuracy_curve(e, max_threshold)
            b.plot(t * 100, acc * 100, label=f"{name} (AUC {auc:.1f})")
        b.set_xlabel("threshold [cm]")
        b.set_ylabel("accuracy [%]")
        b.set_ylim(0, 101)
        b.legend(loc="lower right")
        return _save(fig, path)


def plot_confidence(records, path, t_complete: float | None = None, t_u: float | None = None) -> Path:
    """Seen IoU and uncertainty rate per frame, with rebuilds and re-initialisations marked."""
    iou = np.array([r.seen_iou for r in records])
    rate = np.array([r.uncertainty_rate for r in records])
    x = np.arange(len(records))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.plot(x, iou, label="seen IoU")
        ax.plot(x, rate, label="uncertainty rate")
        if t_complete is not None:
            ax.axhline(t_complete, ls="--", lw=0.8, color="gray")
        if t_u is not None:
            ax.axhline(t_u, ls=":", lw=0.8, color="gray")
        rebuilt = [i for i, r in enumerate(records) if r.rebuilt]
        reinit = [i for i, r in enumerate(records) if r.mode == "reinit"]
        ax.scatter(rebuilt, iou[rebuilt], marker="v", color="C3", zorder=3, label="rebuild")
        ax.scatter(reinit, iou[reinit], marker="o", facecolors="none", edgecolors="k", zorder=3, label="re-init")
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("frame")
        ax.legend(ncol=4, loc="lower left")
        return _save(fig, path)


def plot_rebuilds(rebuild_log: Sequence[dict], path) -> Path:
    """Certain surface fraction before and after each rebuild."""
    ok = [r for r in rebuild_log if r.get("ok", True)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        if ok:
            x = np.arange(len(ok))
            ax.plot(x, [r["certain_fraction_before"] for r in ok], "o--", label="before")
            ax.plot(x, [r["certain_fraction_after"] for r in ok], "o-", label="after")
            ax.set_xticks(x, [str(r["trigger_frame"]) for r in ok], rotation=45)
            ax.legend()
        else:
            ax.text(0.5, 0.5, "no rebuilds", ha="center", va="center", transform=ax.transAxes)
        ax.set_xlabel("trigger frame")
        ax.set_ylabel("certain fraction")
        ax.set_ylim(0, 1.02)
        return _save(fig, path)
