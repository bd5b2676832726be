"""Command line entry point: ``plot <kind> --in <paths...> --out <image>``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import matplotlib.pyplot as plt

from .io import PlotError
from .render import plot_accuracy_vs_eps, plot_heatmap, plot_trajectory

KINDS = ("trajectory", "accuracy_vs_eps", "heatmap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plot",
        description="Render a figure from run artifacts (history CSVs, "
        "aggregate JSONs, or a sweep CSV).",
    )
    parser.add_argument("kind", choices=KINDS, help="which figure to render")
    parser.add_argument(
        "--in",
        dest="inputs",
        nargs="+",
        required=True,
        type=Path,
        metavar="PATH",
        help="input artifact files",
    )
    parser.add_argument(
        "--out", required=True, type=Path, help="output image file (e.g. .png)"
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.kind == "trajectory":
            fig = plot_trajectory(args.inputs, out=args.out)
        elif args.kind == "accuracy_vs_eps":
            fig = plot_accuracy_vs_eps(args.inputs, out=args.out)
        else:
            if len(args.inputs) != 1:
                raise PlotError("heatmap takes exactly one sweep CSV")
            fig = plot_heatmap(args.inputs[0], out=args.out)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
