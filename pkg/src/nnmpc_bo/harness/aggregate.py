"""Per-iteration mean and sample standard deviation of best-so-far cost."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .config import SURROGATES
from .runner import ExperimentRecord

AGGREGATE_HEADER = ["surrogate", "iter", "mean", "std", "n_seeds"]


@dataclass
class SeriesSummary:
    surrogate: str
    iters: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_seeds: int


@dataclass
class Summary:
    hidden_width: int
    series: Dict[str, SeriesSummary] = field(default_factory=dict)
    skipped: Dict[str, str] = field(default_factory=dict)

    def final_means(self) -> Dict[str, float]:
        return {k: float(s.mean[-1]) for k, s in self.series.items()}


def summarize(best_curves) -> tuple:
    """Mean and (n - 1)-denominator std across rows of equal-length curves."""
    B = np.asarray(best_curves, dtype=float)
    return B.mean(axis=0), B.std(axis=0, ddof=1)


def aggregate(record: ExperimentRecord) -> Summary:
    """Summary per surrogate over its successful seeds.

    Surrogates with fewer than two successful seeds have no sample standard
    deviation; they are listed in ``skipped`` instead.
    """
    summary = Summary(int(record.config["hidden_width"]))
    for name in SURROGATES:
        cells = record.ok_cells(name)
        if name not in record.config["surrogates"]:
            continue
        if len(cells) < 2:
            summary.skipped[name] = f"{len(cells)} successful seed(s), need 2"
            continue
        lengths = {len(c["best"]) for c in cells}
        if len(lengths) != 1:
            summary.skipped[name] = f"traces of unequal length {sorted(lengths)}"
            continue
        cells = sorted(cells, key=lambda c: c["seed"])
        mean, std = summarize([c["best"] for c in cells])
        summary.series[name] = SeriesSummary(name, np.arange(len(mean)), mean, std, len(cells))
    return summary


def write_aggregate_csv(summary: Summary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_HEADER)
        for s in summary.series.values():
            for i, m, sd in zip(s.iters, s.mean, s.std):
                w.writerow([s.surrogate, int(i), repr(float(m)), repr(float(sd)), s.n_seeds])


def read_aggregate_csv(path) -> Dict[str, Dict[str, np.ndarray]]:
    out: Dict[str, Dict[str, List[float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = out.setdefault(row["surrogate"], {"iter": [], "mean": [], "std": []})
            d["iter"].append(int(row["iter"]))
            d["mean"].append(float(row["mean"]))
            d["std"].append(float(row["std"]))
    return {k: {c: np.array(v) for c, v in d.items()} for k, d in out.items()}


def format_table(summary: Summary, every: int = 10) -> str:
    """Plain-text table of mean +- std at every ``every``-th iteration and the last one."""
    lines = [f"hidden width {summary.hidden_width}"]
    for s in summary.series.values():
        lines.append(f"  {s.surrogate} ({s.n_seeds} seeds)")
        idx = sorted(set(range(0, len(s.iters), every)) | {len(s.iters) - 1})
        for i in idx:
            lines.append(f"    iter {int(s.iters[i]):4d}  {s.mean[i]:12.5g} +- {s.std[i]:.3g}")
    for name, why in summary.skipped.items():
        lines.append(f"  {name}: not aggregated ({why})")
    return "\n".join(lines)
