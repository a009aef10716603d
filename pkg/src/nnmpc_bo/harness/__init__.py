"""Experiment runner: configs, seeded sweeps, aggregation, plots and the CLI."""

from .aggregate import Summary, write_aggregate_csv
from .config import ExperimentConfig, SearchBox, load_config
from .plots import NothingToPlot, emit_plots
from .runner import ExperimentRecord, load_record, run_experiment

__all__ = [
    "ExperimentConfig",
    "ExperimentRecord",
    "NothingToPlot",
    "SearchBox",
    "Summary",
    "emit_plots",
    "load_config",
    "load_record",
    "run_experiment",
    "write_aggregate_csv",
]
