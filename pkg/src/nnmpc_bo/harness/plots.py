"""
SVG figures built only from stored records.

Plots never recompute statistics: the convergence figure is drawn from the
aggregate CSV it writes next to itself, so the file and the figure agree.
SVG output is made reproducible with a fixed hash salt and no date stamp.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..plant_mpc import write_trajectory_csv  # noqa: E402
from .aggregate import aggregate, read_aggregate_csv, write_aggregate_csv  # noqa: E402
from .runner import SNAPSHOT_LABELS, ExperimentRecord, rollout_from_dict  # noqa: E402

COLORS = {"random": "tab:gray", "matern_gp": "tab:blue", "bnn": "tab:green", "ibnn": "tab:red"}
LABELS = {"random": "Random", "matern_gp": "Matern GP", "bnn": "BNN (HMC)", "ibnn": "I-BNN"}


class NothingToPlot(RuntimeError):
    pass


def _save(fig, path):
    with plt.rc_context({"svg.hashsalt": "nnmpc-bo", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def convergence_figure(series: dict, hidden_width: int):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name, d in series.items():
        c = COLORS.get(name, None)
        ax.plot(d["iter"], d["mean"], color=c, label=LABELS.get(name, name))
        ax.fill_between(d["iter"], d["mean"] - d["std"], d["mean"] + d["std"], color=c, alpha=0.2, lw=0)
    ax.set_xlabel("evaluation")
    ax.set_ylabel("best observed closed-loop cost")
    ax.set_yscale("log")
    ax.set_title(f"hidden width {hidden_width}")
    ax.legend()
    fig.tight_layout()
    return fig


def trajectory_figure(rollouts: dict, title: str):
    """State and input traces for labelled rollouts (label -> RolloutResult)."""
    fig, axes = plt.subplots(3, 1, figsize=(6.0, 6.5), sharex=True)
    styles = {"initial": ":", "intermediate": "--", "best": "-"}
    for label, r in rollouts.items():
        k = np.arange(len(r.states))
        ls = styles.get(label, "-")
        axes[0].plot(k, r.states[:, 0], ls, label=f"{label} (G={r.cost:.4g})")
        axes[1].plot(k, r.states[:, 2], ls)
        axes[2].step(np.arange(len(r.inputs)), r.inputs[:, 0], ls, where="post")
    axes[0].set_ylabel("cart position")
    axes[1].set_ylabel("pole angle")
    axes[2].set_ylabel("input")
    axes[2].set_xlabel("time step")
    axes[0].legend(fontsize="small")
    axes[0].set_title(title)
    fig.tight_layout()
    return fig


def choose_run(record: ExperimentRecord, surrogate: Optional[str] = None) -> Optional[dict]:
    """Cell with the lowest final best cost (optionally within one surrogate)."""
    cells = [c for c in record.ok_cells(surrogate) if c.get("trajectories")]
    if not cells:
        return None
    return min(cells, key=lambda c: (c["final_best"], c["surrogate"], c["seed"]))


def emit_plots(record: ExperimentRecord, out_dir=None, surrogate: Optional[str] = None) -> List[Path]:
    """Write convergence and trajectory figures plus the CSVs they are drawn from."""
    out = Path(out_dir if out_dir is not None else Path(record.path) / "plots")
    summary = aggregate(record)
    chosen = choose_run(record, surrogate)
    if not summary.series and chosen is None:
        raise NothingToPlot("no surrogate has data to plot")
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    h = summary.hidden_width
    if summary.series:
        data_csv = out / f"convergence_h{h}.csv"
        write_aggregate_csv(summary, data_csv)
        fig = convergence_figure(read_aggregate_csv(data_csv), h)
        svg = out / f"convergence_h{h}.svg"
        _save(fig, svg)
        written += [data_csv, svg]
    if chosen is not None:
        rollouts = {label: rollout_from_dict(chosen["trajectories"][label])
                    for label in SNAPSHOT_LABELS if label in chosen["trajectories"]}
        stem = f"trajectory_{chosen['cell']}"
        for label, r in rollouts.items():
            p = out / f"{stem}_{label}.csv"
            write_trajectory_csv(p, r)
            written.append(p)
        svg = out / f"{stem}.svg"
        _save(trajectory_figure(rollouts, f"{chosen['surrogate']} seed {chosen['seed']}"), svg)
        written.append(svg)
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file"])
        for p in written:
            w.writerow([p.name])
    return written
