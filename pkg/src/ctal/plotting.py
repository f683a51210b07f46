"""Report figures rendered straight to PNG.

Figures are built on the object API with an Agg canvas, so nothing here
touches pyplot's global state or needs a display.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "bar": "#4c72b0",
    "fn": "#c44e52",
    "line": "#333333",
}


def _new(width=6.0, height=3.2, ncols=1):
    fig = Figure(figsize=(width, height), constrained_layout=True)
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, ncols, squeeze=False)[0]
    for ax in axes:
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    return path


def _annotate(ax, bars, values):
    for b, v in zip(bars, values):
        ax.text(b.get_x() + b.get_width() / 2, b.get_height(), f"{v:.1f}",
                ha="center", va="bottom", fontsize=8)


def plot_length_groups(per_map: Mapping[str, float], per_fn: Mapping[str, float],
                       path, threshold: float = 0.5) -> Path:
    """Side-by-side bars: restricted mAP and false-negative rate per length group."""
    groups = list(per_map)
    fig, (ax_map, ax_fn) = _new(8.0, 3.2, ncols=2)
    vals = [100 * (per_map[g] or 0.0) for g in groups]
    _annotate(ax_map, ax_map.bar(groups, vals, color=STYLE["bar"]), vals)
    ax_map.set_ylabel(f"mAP@{threshold:.2f} (%)")
    ax_map.set_ylim(0, 105)
    vals = [100 * per_fn[g] for g in groups]
    _annotate(ax_fn, ax_fn.bar(groups, vals, color=STYLE["fn"]), vals)
    ax_fn.set_ylabel("false-negative rate (%)")
    ax_fn.set_ylim(0, 105)
    for ax in (ax_map, ax_fn):
        ax.set_xlabel("length group")
    return _save(fig, path)


def plot_threshold_curve(per_threshold: Mapping[float, float], path) -> Path:
    ts = sorted(per_threshold)
    fig, (ax,) = _new()
    ax.plot(ts, [100 * per_threshold[t] for t in ts], "o-", color=STYLE["line"])
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("mAP (%)")
    ax.set_ylim(0, 105)
    return _save(fig, path)


def plot_loss_curves(epochs: Sequence[int], columns: Mapping[str, Sequence[float]],
                     path) -> Path:
    """One line per loss component against epoch, log-scaled when all values are positive."""
    fig, (ax,) = _new()
    positive = True
    for name, ys in columns.items():
        ax.plot(epochs, ys, marker=".", label=name)
        positive &= all(y > 0 for y in ys)
    if positive:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)
