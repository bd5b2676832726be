"""Plotting companion for clipbound run artifacts.

Consumes only the documented artifact files (history CSVs, aggregate JSONs,
sweep CSVs) and renders publication-style figures.  It never reads datasets
and never runs training.
"""

from .io import (
    AggregatePoint,
    HistorySeries,
    PlotError,
    read_aggregate,
    read_history,
    read_sweep,
)
from .render import plot_accuracy_vs_eps, plot_heatmap, plot_trajectory

__all__ = [
    "AggregatePoint",
    "HistorySeries",
    "PlotError",
    "plot_accuracy_vs_eps",
    "plot_heatmap",
    "plot_trajectory",
    "read_aggregate",
    "read_history",
    "read_sweep",
]

__version__ = "0.1.0"
