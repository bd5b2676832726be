"""Readers for the run artifacts the plotting commands consume.

Everything here parses the documented on-disk formats only: training history
CSVs, aggregate metric JSONs, and hyperparameter sweep CSVs.  No reader ever
touches datasets or model code; a figure is a pure function of these files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PlotError",
    "HistorySeries",
    "AggregatePoint",
    "read_history",
    "read_aggregate",
    "read_sweep",
    "SWEEP_AXES",
]

# Columns each reader actually consumes.  Extra columns are always allowed.
HISTORY_REQUIRED = ("step", "loss", "clip_bound")
SWEEP_REQUIRED = ("learning_rate", "clip_param", "batch_size", "objective")

# Hyperparameter axes a sweep can vary over, in canonical display order.
SWEEP_AXES = ("learning_rate", "clip_param", "batch_size")


class PlotError(Exception):
    """Input files cannot be rendered; the message says why."""


def _float(text: str) -> float:
    if text is None or text == "":
        return math.nan
    return float(text)


def series_label(path: Path) -> str:
    """Display label for one history file.

    Per-mode files are named ``<mode>_history.csv`` and label as ``<mode>``;
    per-seed training runs are written as ``<run_dir>/history.csv`` and label
    as the run directory name.
    """
    stem = path.stem
    if stem.endswith("_history") and stem != "_history":
        return stem[: -len("_history")]
    if stem == "history":
        return path.resolve().parent.name
    return stem


@dataclass(frozen=True)
class HistorySeries:
    """One training trajectory: step index, loss, and the clip bound."""

    label: str
    step: np.ndarray
    loss: np.ndarray
    clip_bound: np.ndarray


def read_history(path: str | Path) -> HistorySeries:
    """Parse a history CSV into arrays, validating the columns it needs."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            missing = [c for c in HISTORY_REQUIRED if c not in fields]
            if missing:
                raise PlotError(
                    f"{path}: missing required columns: {', '.join(missing)}"
                )
            rows = list(reader)
    except OSError as exc:
        raise PlotError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise PlotError(f"{path}: no data rows")
    return HistorySeries(
        label=series_label(path),
        step=np.array([_float(r["step"]) for r in rows]),
        loss=np.array([_float(r["loss"]) for r in rows]),
        clip_bound=np.array([_float(r["clip_bound"]) for r in rows]),
    )


@dataclass(frozen=True)
class AggregatePoint:
    """One (method, epsilon) point with accuracy means and standard errors."""

    method: str
    epsilon: float
    macro_mean: float
    macro_se: float
    worst_mean: float
    worst_se: float


def read_aggregate(path: str | Path) -> AggregatePoint:
    """Parse one aggregate JSON into a plottable accuracy point."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise PlotError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise PlotError(f"{path}: not valid JSON: {exc}") from exc
    for key in ("method", "epsilon", "metrics"):
        if key not in payload:
            raise PlotError(f"{path}: missing key '{key}'")
    if payload["epsilon"] is None:
        raise PlotError(
            f"{path}: epsilon is null (non-private run); it has no place on an "
            "accuracy-vs-epsilon axis"
        )
    metrics = payload["metrics"]
    for metric in ("macro_acc", "worst_acc"):
        stat = metrics.get(metric)
        if not isinstance(stat, dict) or "mean" not in stat or "se" not in stat:
            raise PlotError(f"{path}: missing key 'metrics.{metric}.mean/se'")
    return AggregatePoint(
        method=str(payload["method"]),
        epsilon=float(payload["epsilon"]),
        macro_mean=float(metrics["macro_acc"]["mean"]),
        macro_se=float(metrics["macro_acc"]["se"]),
        worst_mean=float(metrics["worst_acc"]["mean"]),
        worst_se=float(metrics["worst_acc"]["se"]),
    )


def read_sweep(path: str | Path) -> list[dict[str, float]]:
    """Parse a sweep CSV into rows of axis values plus the objective."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            missing = [c for c in SWEEP_REQUIRED if c not in fields]
            if missing:
                raise PlotError(
                    f"{path}: missing required columns: {', '.join(missing)}"
                )
            rows = [
                {col: _float(raw[col]) for col in SWEEP_REQUIRED} for raw in reader
            ]
    except OSError as exc:
        raise PlotError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise PlotError(f"{path}: no data rows")
    return rows
