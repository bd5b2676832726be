"""Figure builders: trajectory curves, accuracy-vs-epsilon clusters, sweep heatmaps.

Each builder is a pure function of its input files: it never reads datasets,
never trains anything, and contains no randomness, so re-rendering the same
files yields a visually identical image.  Builders return the Figure (handy
for inspection in tests); pass ``out`` to also write it to disk.
"""

from __future__ import annotations

import math
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import (
    SWEEP_AXES,
    AggregatePoint,
    PlotError,
    read_aggregate,
    read_history,
    read_sweep,
)

__all__ = ["plot_trajectory", "plot_accuracy_vs_eps", "plot_heatmap"]

# Fixed style: deterministic layout and fonts so reruns render identically.
STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}

# Stable colors for the three clipping modes; other labels draw from a fixed
# palette in sorted-label order, so color assignment never depends on input
# ordering.
METHOD_COLORS = {
    "constant": "#1f77b4",
    "unbounded": "#d62728",
    "bounded": "#2ca02c",
}
EXTRA_PALETTE = ("#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22")


def _color_map(labels: list[str]) -> dict[str, str]:
    colors: dict[str, str] = {}
    extras = iter(EXTRA_PALETTE)
    for label in sorted(set(labels)):
        colors[label] = METHOD_COLORS.get(label) or next(extras, "#17becf")
    return colors


def _save(fig, out: str | Path | None):
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out)
    return fig


def plot_trajectory(paths: list[str | Path], out: str | Path | None = None):
    """Two stacked panels: loss vs step, and clip bound vs step on a log axis.

    One line per input history CSV; the line label is the clipping mode taken
    from the filename (``<mode>_history.csv``) or the run directory for
    per-seed ``history.csv`` files.
    """
    if not paths:
        raise PlotError("no input files given")
    series = [read_history(p) for p in paths]
    colors = _color_map([s.label for s in series])
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_clip) = plt.subplots(
            2, 1, sharex=True, figsize=(6.4, 6.4), constrained_layout=True
        )
        for s in series:
            ax_loss.plot(s.step, s.loss, label=s.label, color=colors[s.label])
            ax_clip.plot(s.step, s.clip_bound, label=s.label, color=colors[s.label])
        ax_loss.set_ylabel("training loss")
        ax_loss.legend()
        ax_clip.set_yscale("log")
        ax_clip.set_ylabel("clip bound $C_t$")
        ax_clip.set_xlabel("step")
    return _save(fig, out)


def _epsilon_key(epsilon: float) -> float:
    """Cluster key for one run's charged epsilon.

    Calibrated runs land within a fraction of a percent below their common
    target, so rounding to two decimals groups the same target across methods
    while keeping genuinely different budgets apart.
    """
    return round(epsilon, 2)


def plot_accuracy_vs_eps(paths: list[str | Path], out: str | Path | None = None):
    """Accuracy means with standard-error bars, clustered by privacy budget.

    Input files are aggregate JSONs, one per (method, epsilon).  Markers for
    the methods within one epsilon cluster are offset slightly so the error
    bars stay legible.  If the methods do not share the same epsilon set, a
    warning is issued and only the common epsilons are plotted.
    """
    if not paths:
        raise PlotError("no input files given")
    points = [read_aggregate(p) for p in paths]
    by_method: dict[str, dict[float, AggregatePoint]] = {}
    for pt, path in zip(points, paths):
        key = _epsilon_key(pt.epsilon)
        slot = by_method.setdefault(pt.method, {})
        if key in slot:
            raise PlotError(
                f"{path}: duplicate aggregate for method '{pt.method}' at "
                f"epsilon≈{key:g}"
            )
        slot[key] = pt

    methods = sorted(by_method)
    eps_sets = {m: set(slot) for m, slot in by_method.items()}
    union = set().union(*eps_sets.values())
    common = set(union)
    for eps in eps_sets.values():
        common &= eps
    if common != union:
        dropped = sorted(union - common)
        warnings.warn(
            "methods have inconsistent epsilon sets; plotting only the "
            f"common epsilons and dropping {dropped}",
            stacklevel=2,
        )
    if not common:
        raise PlotError("no epsilon value is shared by every method")
    eps_order = sorted(common)

    colors = _color_map(methods)
    with plt.rc_context(STYLE):
        fig, (ax_macro, ax_worst) = plt.subplots(
            2, 1, sharex=True, figsize=(6.4, 6.4), constrained_layout=True
        )
        for m_idx, method in enumerate(methods):
            offset = (m_idx - (len(methods) - 1) / 2) * 0.12
            x = [i + offset for i in range(len(eps_order))]
            pts = [by_method[method][eps] for eps in eps_order]
            for ax, means, ses in (
                (ax_macro, [p.macro_mean for p in pts], [p.macro_se for p in pts]),
                (ax_worst, [p.worst_mean for p in pts], [p.worst_se for p in pts]),
            ):
                ax.errorbar(
                    x,
                    means,
                    yerr=ses,
                    fmt="o",
                    capsize=3,
                    label=method,
                    color=colors[method],
                )
        ax_macro.set_ylabel("macro-averaged accuracy")
        ax_macro.legend()
        ax_worst.set_ylabel("worst-class accuracy")
        ax_worst.set_xlabel("privacy budget $\\varepsilon$")
        ax_worst.set_xticks(range(len(eps_order)), [f"{e:g}" for e in eps_order])
    return _save(fig, out)


def _cell_edges(values: np.ndarray, log: bool) -> np.ndarray:
    """Bin edges placing each grid value at the center of its cell."""
    if values.size == 1:
        v = float(values[0])
        return np.array([v / 1.5, v * 1.5]) if log else np.array([v - 0.5, v + 0.5])
    if log:
        inner = np.sqrt(values[:-1] * values[1:])
        first = values[0] ** 2 / inner[0]
        last = values[-1] ** 2 / inner[-1]
    else:
        inner = (values[:-1] + values[1:]) / 2
        first = 2 * values[0] - inner[0]
        last = 2 * values[-1] - inner[-1]
    return np.concatenate([[first], inner, [last]])


def plot_heatmap(path: str | Path, out: str | Path | None = None):
    """Objective heatmap over the two hyperparameter axes a sweep varies.

    The sweep may vary at most two of (learning_rate, clip_param, batch_size);
    with three varying axes there is no faithful 2-D view, so that is an
    error.  Repeated trials of one cell are averaged; cells with no finished
    trial are left blank.  Axes with positive values are log-scaled, matching
    the geometric spacing of typical grids.
    """
    rows = read_sweep(path)
    uniques = {a: np.unique([r[a] for r in rows]) for a in SWEEP_AXES}
    varying = [a for a in SWEEP_AXES if uniques[a].size > 1]
    if len(varying) > 2:
        raise PlotError(
            f"{len(varying)} hyperparameter axes vary ({', '.join(varying)}); a "
            "heatmap needs at most two — fix one axis, e.g. filter the sweep "
            f"to a single {varying[-1]} value, and replot"
        )
    axes = list(varying)
    for name in SWEEP_AXES:
        if len(axes) == 2:
            break
        if name not in axes:
            axes.append(name)
    axes.sort(key=SWEEP_AXES.index)
    y_name, x_name = axes
    y_vals, x_vals = uniques[y_name], uniques[x_name]

    total = np.zeros((y_vals.size, x_vals.size))
    count = np.zeros_like(total)
    for r in rows:
        if not math.isfinite(r["objective"]):
            continue
        yi = int(np.searchsorted(y_vals, r[y_name]))
        xi = int(np.searchsorted(x_vals, r[x_name]))
        total[yi, xi] += r["objective"]
        count[yi, xi] += 1
    with np.errstate(invalid="ignore"):
        grid = np.ma.masked_array(total / np.maximum(count, 1), mask=count == 0)

    y_log = bool(np.all(y_vals > 0))
    x_log = bool(np.all(x_vals > 0))
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("lightgray")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 4.8), constrained_layout=True)
        mesh = ax.pcolormesh(
            _cell_edges(x_vals, x_log), _cell_edges(y_vals, y_log), grid, cmap=cmap
        )
        if x_log:
            ax.set_xscale("log")
        if y_log:
            ax.set_yscale("log")
        ax.set_xticks(x_vals, [f"{v:g}" for v in x_vals])
        ax.set_yticks(y_vals, [f"{v:g}" for v in y_vals])
        ax.minorticks_off()
        ax.set_xlabel(x_name)
        ax.set_ylabel(y_name)
        ax.grid(False)
        fig.colorbar(mesh, ax=ax, label="objective")
    return _save(fig, out)
