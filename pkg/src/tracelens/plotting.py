"""SVG figures for the analysis reports.

Figures are written with a fixed hash salt and no date stamp so that the
same inputs give byte-identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import EpochDynamicsReport, GroupShareReport, GroupTable, ImbalanceSweep, ValidationCurve, ZeroShotReport  # noqa: E402

PALETTE = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]

STYLE = {
    "svg.hashsalt": "tracelens",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.prop_cycle": matplotlib.cycler(color=PALETTE),
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "figure.figsize": (5.0, 3.2),
}


def _color(i: int) -> str:
    return PALETTE[i % len(PALETTE)]


def save_svg(fig, path: str | Path, description: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None, "Creator": "tracelens"}
    if description:
        meta["Description"] = description
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
    return path


def removal_curve(curve: ValidationCurve, path: str | Path, description: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(curve.k_grid, curve.mean_change, marker="o", label=f"top-k {curve.sign}")
        ax.plot(curve.k_grid, curve.control_mean_change, marker="s", linestyle="--", label="random control")
        ax.axhline(0.0, color="0.6", linewidth=0.8)
        ax.set_xticks(list(curve.k_grid))
        ax.set_xlabel("k")
        ax.set_ylabel("mean confidence change (%)")
        ax.legend()
        fig.tight_layout()
        return save_svg(fig, path, description)


def _stacked(ax, reports: Mapping[str, GroupShareReport], groups: Sequence[str], title: str) -> None:
    rows = list(reports)
    x = np.arange(len(rows))
    bottom = np.zeros(len(rows))
    for i, g in enumerate(groups):
        vals = np.array([reports[r].shares.get(g, 0.0) for r in rows])
        ax.bar(x, vals, bottom=bottom, color=_color(i), label=g, width=0.7)
        bottom += vals
    ax.set_xticks(x, rows)
    ax.set_ylim(0, 100)
    ax.set_title(title)


def group_shares(
    positive: Mapping[str, GroupShareReport],
    negative: Mapping[str, GroupShareReport] | None,
    path: str | Path,
    description: str = "",
) -> Path:
    groups = list(next(iter(positive.values())).shares)
    panels = [("positive", positive)] + ([("negative", negative)] if negative else [])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels) + 1.0, 3.2), sharey=True, squeeze=False)
        for ax, (name, reps) in zip(axes[0], panels):
            _stacked(ax, reps, groups, name)
            ax.set_xlabel("test group")
        axes[0][0].set_ylabel("share of top-k (%)")
        axes[0][-1].legend(title="train group", loc="center left", bbox_to_anchor=(1.0, 0.5))
        fig.tight_layout()
        return save_svg(fig, path, description)


def epoch_dynamics(report: EpochDynamicsReport, path: str | Path, description: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        groups = list(report.own_share[report.epochs[0]]) if report.epochs else []
        for i, g in enumerate(groups):
            ax.plot(report.epochs, [report.own_share[e][g] for e in report.epochs], marker="o", color=_color(i), label=g)
        ax.set_xticks(list(report.epochs))
        ax.set_xlabel("epoch")
        ax.set_ylabel("own-group share (%)")
        ax.legend(title="test group", loc="center left", bbox_to_anchor=(1.0, 0.5))
        fig.tight_layout()
        return save_svg(fig, path, description)


def zero_shot(reports: Sequence[ZeroShotReport], path: str | Path, description: str = "") -> Path:
    shares = {r.group: r.zero_shot_shares for r in reports}
    groups = list(reports[0].zero_shot_shares.shares)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.2))
        _stacked(ax, shares, groups, "zero-shot rankings")
        ax.set_xlabel("held-out test group")
        ax.set_ylabel("share of top-k (%)")
        ax.legend(title="train group", loc="center left", bbox_to_anchor=(1.0, 0.5))
        fig.tight_layout()
        return save_svg(fig, path, description)


def imbalance(sweeps: Sequence[ImbalanceSweep], path: str | Path, description: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 3.2), sharey=True)
        for i, sw in enumerate(sweeps):
            pcts = [p.pct for p in sw.points]
            axes[0].plot(pcts, [p.own_positive for p in sw.points], marker="o", color=_color(i), label=sw.group)
            axes[1].plot(pcts, [p.own_negative for p in sw.points], marker="o", color=_color(i), label=sw.group)
        for ax, name in zip(axes, ("positive", "negative")):
            ax.set_title(name)
            ax.set_xlabel("oversampling (%)")
            if sweeps:
                ax.set_xticks([p.pct for p in sweeps[0].points])
        axes[0].set_ylabel("own-group share (%)")
        axes[1].legend(title="group", loc="center left", bbox_to_anchor=(1.0, 0.5))
        fig.tight_layout()
        return save_svg(fig, path, description)


def influence_heatmap(table: GroupTable, path: str | Path, description: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        lim = float(np.max(np.abs(table.values))) or 1.0
        im = ax.imshow(table.values, cmap="RdBu_r", vmin=-lim, vmax=lim)
        ax.set_xticks(range(len(table.cols)), table.cols)
        ax.set_yticks(range(len(table.rows)), table.rows)
        ax.set_xlabel("train group")
        ax.set_ylabel("test group")
        for i in range(len(table.rows)):
            for j in range(len(table.cols)):
                ax.text(j, i, f"{table.values[i, j]:.3f}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, shrink=0.8)
        fig.tight_layout()
        return save_svg(fig, path, description)
