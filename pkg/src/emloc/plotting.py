"""PNG figures for the CLI report path.

Kept out of the numerical modules: nothing here is imported unless a report
asks for figures. Figures are built on the Agg canvas directly, so no global
pyplot state is touched and callers on worker threads are safe.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

__all__ = ["plot_loss_curves", "plot_arms", "plot_lambda_sweep", "plot_calib_sweep"]

ARM_COLORS = {"zero_shot": "0.55", "emulator": "tab:orange", "naive": "tab:blue", "corrected": "tab:green"}


def _new(width: float = 5.0, height: float = 3.4):
    fig = Figure(figsize=(width, height), dpi=120)
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png")
    return path


def plot_loss_curves(curves: dict, path) -> Path:
    """Per-seed training loss against step (log scale)."""
    fig, ax = _new()
    for seed, curve in curves.items():
        steps = [p.step for p in curve]
        losses = [p.loss for p in curve]
        ax.plot(steps, losses, lw=0.8, alpha=0.8, label=f"seed {seed}")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("batch loss")
    ax.set_title("adapter training on the emulator")
    if len(curves) <= 8:
        ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_arms(per_seed: dict[str, list[float]], path) -> Path:
    """Median eval loss per arm, with the individual seeds overlaid."""
    fig, ax = _new()
    arms = list(per_seed)
    xs = np.arange(len(arms))
    medians = [float(np.median(per_seed[a])) for a in arms]
    ax.bar(xs, medians, color=[ARM_COLORS.get(a, "0.3") for a in arms], width=0.6)
    for x, arm in zip(xs, arms):
        vals = per_seed[arm]
        jitter = np.linspace(-0.12, 0.12, len(vals)) if len(vals) > 1 else [0.0]
        ax.scatter(x + np.asarray(jitter), vals, s=10, color="k", zorder=3)
    ax.set_xticks(xs)
    ax.set_xticklabels([a.replace("_", "-") for a in arms])
    ax.set_ylabel("eval loss")
    return _save(fig, path)


def plot_lambda_sweep(values, per_seed: dict[int, list[float]], path) -> Path:
    fig, ax = _new()
    values = np.asarray(values, dtype=float)
    table = np.asarray(list(per_seed.values()), dtype=float)
    for row in table:
        ax.plot(values, row, color="0.75", lw=0.7, marker=".", ms=3)
    ax.plot(values, np.median(table, axis=0), color="tab:green", lw=1.6, marker="o", ms=4, label="median")
    if np.all(values > 0):
        ax.set_xscale("log")
    ax.set_xlabel("lambda")
    ax.set_ylabel("eval loss (corrected)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_calib_sweep(values, weighted_error, eval_metric, path) -> Path:
    fig, ax = _new()
    ax.plot(values, weighted_error, color="tab:blue", marker="o", ms=4)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("calibration rows")
    ax.set_ylabel("weighted reconstruction error", color="tab:blue")
    metric = np.asarray(eval_metric, dtype=float)
    if np.any(np.isfinite(metric)):
        twin = ax.twinx()
        twin.plot(values, metric, color="tab:green", marker="s", ms=4)
        twin.set_ylabel("eval loss (corrected)", color="tab:green")
    return _save(fig, path)
