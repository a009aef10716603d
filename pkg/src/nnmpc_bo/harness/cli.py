"""
Command line: ``nnmpc-bo run|aggregate|plot``.

Exit codes: 0 success, 2 configuration error, 3 some cells failed,
4 nothing to plot.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import ConfigError
from .aggregate import aggregate, format_table, write_aggregate_csv
from .config import load_config
from .plots import NothingToPlot, emit_plots
from .runner import WORKERS_ENV, load_record, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_NOTHING_TO_PLOT = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nnmpc-bo", description="BO of neural MPC cost functions on a cart-pole")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="experiment directory (default: output_dir from the config)")
    r.add_argument("--seeds", type=int, help="override n_seeds")
    r.add_argument("--surrogates", help="comma-separated subset of random,matern_gp,bnn,ibnn")
    r.add_argument("--width", type=int, help="override hidden_width")
    r.add_argument("--workers", type=int, help=f"worker processes (default: ${WORKERS_ENV} or CPU count)")

    a = sub.add_parser("aggregate", help="mean and std of best-so-far cost per surrogate")
    a.add_argument("--record", required=True)

    pl = sub.add_parser("plot", help="write SVG figures for a stored record")
    pl.add_argument("--record", required=True)
    pl.add_argument("--surrogate", help="restrict the trajectory figure to one surrogate")
    return p


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seeds is not None:
            overrides["n_seeds"] = args.seeds
        if args.width is not None:
            overrides["hidden_width"] = args.width
        if args.surrogates is not None:
            overrides["surrogates"] = tuple(s.strip() for s in args.surrogates.split(",") if s.strip())
        if overrides:
            cfg = cfg.replace(**overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    record = run_experiment(cfg, args.out, args.workers)
    summary = aggregate(record)
    if summary.series:
        write_aggregate_csv(summary, Path(record.path) / "aggregate.csv")
    print(format_table(summary))
    for c in record.failed_cells:
        print(f"cell {c['cell']} failed: {c['message'].splitlines()[0]}", file=sys.stderr)
    print(f"record written to {record.path}")
    return EXIT_PARTIAL if record.failed_cells else EXIT_OK


def _cmd_aggregate(args) -> int:
    record = load_record(args.record)
    summary = aggregate(record)
    path = Path(record.path) / "aggregate.csv"
    write_aggregate_csv(summary, path)
    print(format_table(summary))
    print(f"wrote {path}")
    return EXIT_PARTIAL if record.failed_cells else EXIT_OK


def _cmd_plot(args) -> int:
    record = load_record(args.record)
    try:
        files = emit_plots(record, surrogate=args.surrogate)
    except NothingToPlot as exc:
        print(f"nothing to plot: {exc}", file=sys.stderr)
        return EXIT_NOTHING_TO_PLOT
    for f in files:
        print(f)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return {"run": _cmd_run, "aggregate": _cmd_aggregate, "plot": _cmd_plot}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
