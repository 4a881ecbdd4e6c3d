"""Matplotlib figures written next to the CSV reports.

SVG output is made byte-reproducible by fixing the hash salt and dropping
the creation date from the metadata.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "sats",
    "svg.fonttype": "path",
}

CONFIG_COLORS = {"A": "#9e9e9e", "B": "#6baed6", "C": "#3182bd", "D": "#08519c"}


def _save(fig, path):
    path = Path(path)
    fmt = path.suffix.lstrip(".") or "svg"
    meta = {"Date": None} if fmt == "svg" else {}
    fig.savefig(path, format=fmt, metadata=meta, bbox_inches="tight")
    plt.close(fig)


def metrics_bar(report, path, class_names=None):
    """Per-class IoU bars with the three summary scores."""
    with plt.rc_context(STYLE):
        ious = [np.nan if v is None else 100 * v for v in report.per_class_iou]
        names = class_names or [str(k) for k in range(len(ious) - 1)] + ["unk"]
        fig, ax = plt.subplots(figsize=(4.5, 2.6))
        x = np.arange(len(ious))
        ax.bar(x, ious, color=["#3182bd"] * (len(ious) - 1) + ["#de2d26"])
        ax.set_xticks(x, names)
        ax.set_ylim(0, 100)
        ax.set_ylabel("IoU (%)")
        pct = report.as_percent()
        ax.set_title(f"common {pct['common']:.2f}  private {pct['private']:.2f}  H {pct['h_score']:.2f}")
        _save(fig, path)


def ablation_bars(summary, path):
    """``summary`` maps config letter to dict(private=..., h_score=..., *_std=...) in percent."""
    with plt.rc_context(STYLE):
        configs = sorted(summary)
        fig, axes = plt.subplots(1, 2, figsize=(6, 2.6))
        for ax, key, title in zip(axes, ("private", "h_score"), ("Private IoU", "H-Score")):
            vals = [summary[c][key] for c in configs]
            errs = [summary[c].get(f"{key}_std", 0.0) for c in configs]
            ax.bar(configs, vals, yerr=errs, capsize=3, color=[CONFIG_COLORS.get(c, "#777") for c in configs])
            ax.set_title(title)
            ax.set_ylim(0, 100)
        axes[0].set_ylabel("%")
        _save(fig, path)


def sweep_curve(rows, path):
    """``rows``: iterable of (tau1, common, private, h_score) in percent."""
    rows = sorted(rows)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.6))
        t = [r[0] for r in rows]
        for idx, label in ((1, "common"), (2, "private"), (3, "H-Score")):
            ax.plot(t, [r[idx] for r in rows], marker="o", label=label)
        ax.set_xlabel("tau1")
        ax.set_ylabel("%")
        ax.legend(frameon=False)
        _save(fig, path)


def training_curves(records, path, title=""):
    """Source/target losses and pseudo-label statistics over iterations."""
    if not records:
        return
    it = np.array([r.iteration for r in records])
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax1.plot(it, [r.loss_source for r in records], lw=0.6, label="L_S")
        ax1.plot(it, [r.loss_target for r in records], lw=0.6, label="L_T")
        ax1.set_xlabel("iteration")
        ax1.legend(frameon=False)
        ax2.plot(it, [r.q_t_mean for r in records], lw=0.6, label="q_t")
        ax2.plot(it, [r.unknown_fraction for r in records], lw=0.6, label="unknown fraction")
        ax2.set_xlabel("iteration")
        ax2.set_ylim(0, 1)
        ax2.legend(frameon=False)
        if title:
            fig.suptitle(title)
        _save(fig, path)
