"""
Seeded (surrogate x seed) sweeps with on-disk records.

Layout of an experiment directory::

    config.yaml                  effective configuration
    record.jsonl                 header line, one line per cell, footer line
    traces/<cell>.csv            iter,theta_hash,observed_cost,best_cost
    trajectories/<cell>_<label>.csv   closed-loop rollouts (initial, intermediate, best)

Cells run in a process pool; only the parent process writes files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .. import __version__
from .. import bo
from ..kernels import IBNN, MATERN52, KernelSpec
from ..plant_mpc import RolloutResult, cartpole_linear_model, rollout, write_trajectory_csv
from .config import SURROGATES, ExperimentConfig, config_from_dict, dump_config

log = logging.getLogger(__name__)

WORKERS_ENV = "NNMPC_BO_WORKERS"
SNAPSHOT_LABELS = ("initial", "intermediate", "best")


def derive_rng(master_seed: int, *labels) -> np.random.Generator:
    """Philox generator keyed by sha256 of the master seed and the labels."""
    digest = hashlib.sha256(json.dumps([int(master_seed), *labels]).encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def shared_initial_design(cfg: ExperimentConfig, seed_index: int) -> np.ndarray:
    """Initial design for one seed, identical for every surrogate."""
    rng = derive_rng(cfg.master_seed, seed_index, "init")
    return bo.initial_design(cfg.layout.n_theta, cfg.bo.n_init, rng)


def cell_id(surrogate: str, seed_index: int) -> str:
    return f"{surrogate}_s{seed_index:02d}"


class Objective:
    """Closed-loop cost of a point in the unit box; keeps every rollout."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.layout = cfg.layout
        self.model = cartpole_linear_model(cfg.plant)
        self.results: List[RolloutResult] = []

    def evaluate(self, z) -> RolloutResult:
        ev = self.cfg.evaluation
        theta = self.cfg.search_box.to_raw(z, self.layout)
        return rollout(theta, self.layout, self.model, self.cfg.ocp, ev.x_init, ev.M,
                       ev.weights(), ev.failure_cost)

    def __call__(self, z) -> float:
        res = self.evaluate(z)
        self.results.append(res)
        return res.cost

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.results)


def make_surrogate(name: str, cfg: ExperimentConfig, rng):
    if name == "matern_gp":
        return bo.GpSurrogate(KernelSpec(MATERN52), cfg.gp.fit_options())
    if name == "ibnn":
        return bo.GpSurrogate(KernelSpec(IBNN, depth=cfg.gp.ibnn_depth), cfg.gp.fit_options(),
                              centered=cfg.gp.ibnn_centered)
    if name == "bnn":
        return bo.BnnSurrogate(cfg.bnn.config(), seed=rng)
    raise ValueError(f"no surrogate model for {name!r}")


@dataclass
class CellResult:
    surrogate: str
    seed_index: int
    status: str  # "ok" | "skipped" | "error"
    message: str = ""
    trace: Optional[bo.BoTrace] = None
    snapshots: Dict[str, tuple] = field(default_factory=dict)  # label -> (iteration, RolloutResult)
    wall_clock: float = 0.0
    n_failed_rollouts: int = 0
    diagnostics: list = field(default_factory=list)

    @property
    def cell(self) -> str:
        return cell_id(self.surrogate, self.seed_index)


def _snapshot_indices(trace: bo.BoTrace, n_init: int) -> Dict[str, int]:
    """Best-so-far evaluation index after the initial design, halfway, and at the end."""
    obs = trace.observed
    n = len(obs)
    mid = n_init + (n - n_init) // 2
    picks = {"initial": n_init, "intermediate": max(mid, n_init), "best": n}
    return {label: int(np.argmin(obs[:stop])) for label, stop in picks.items()}


def run_cell(cfg: ExperimentConfig, surrogate: str, seed_index: int) -> CellResult:
    """One BO (or random-search) run. Exceptions become an error record."""
    t0 = time.perf_counter()
    if surrogate == "bnn" and not cfg.bnn_allowed():
        return CellResult(surrogate, seed_index, "skipped",
                          f"bnn skipped: {cfg.layout.n_theta} parameters exceed {cfg.bnn.max_params}")
    objective = Objective(cfg)
    try:
        init = shared_initial_design(cfg, seed_index)
        rng = derive_rng(cfg.master_seed, surrogate, seed_index)
        dim = cfg.layout.n_theta
        if surrogate == "random":
            trace = bo.random_search(objective, cfg.bo, dim, rng, init)
            diagnostics = []
        else:
            model = make_surrogate(surrogate, cfg, rng)
            trace = bo.run(objective, model, cfg.bo, dim, rng, init)
            diagnostics = getattr(model, "diagnostics", [])
    except Exception as exc:  # recorded, the sweep goes on
        return CellResult(surrogate, seed_index, "error",
                          f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}",
                          wall_clock=time.perf_counter() - t0, n_failed_rollouts=objective.n_failed)
    snaps = {label: (i, objective.results[i]) for label, i in _snapshot_indices(trace, cfg.bo.n_init).items()}
    return CellResult(surrogate, seed_index, "ok", trace=trace, snapshots=snaps,
                      wall_clock=time.perf_counter() - t0, n_failed_rollouts=objective.n_failed,
                      diagnostics=diagnostics)


def _run_cell_args(args):
    return run_cell(*args)


def resolve_workers(workers: Optional[int] = None) -> int:
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


# Record ---------------------------------------------------------------------------


@dataclass
class ExperimentRecord:
    config: dict
    cells: List[dict]
    version: str
    wall_clock: float
    path: Optional[Path] = None

    @property
    def experiment_config(self) -> ExperimentConfig:
        return config_from_dict(self.config)

    def ok_cells(self, surrogate: Optional[str] = None) -> List[dict]:
        return [c for c in self.cells if c["status"] == "ok"
                and (surrogate is None or c["surrogate"] == surrogate)]

    @property
    def failed_cells(self) -> List[dict]:
        return [c for c in self.cells if c["status"] == "error"]


def _rollout_dict(iteration: int, res: RolloutResult) -> dict:
    return {
        "iteration": iteration,
        "cost": res.cost,
        "failed": bool(res.failed),
        "states": res.states.tolist(),
        "inputs": res.inputs.tolist(),
        "per_step_costs": np.asarray(res.per_step_costs).tolist(),
        "solver_iters_total": int(res.solver_iters_total),
    }


def rollout_from_dict(d: dict) -> RolloutResult:
    return RolloutResult(np.array(d["states"]), np.array(d["inputs"]), d["cost"],
                         np.array(d["per_step_costs"]), d["failed"], d["solver_iters_total"])


def _cell_dict(res: CellResult) -> dict:
    out = {
        "type": "cell",
        "cell": res.cell,
        "surrogate": res.surrogate,
        "seed": res.seed_index,
        "status": res.status,
        "message": res.message,
        "wall_clock": res.wall_clock,
        "n_failed_rollouts": res.n_failed_rollouts,
    }
    if res.trace is not None:
        best = res.trace.best_index()
        out.update({
            "observed": res.trace.observed.tolist(),
            "best": res.trace.best_costs.tolist(),
            "theta_hash": [bo.theta_hash(t) for t in res.trace.thetas],
            "best_theta": res.trace.thetas[best].tolist(),
            "final_best": float(res.trace.best_costs[-1]),
            "surrogate_seconds": list(res.trace.timings),
            "trajectories": {k: _rollout_dict(i, r) for k, (i, r) in res.snapshots.items()},
            "diagnostics": res.diagnostics,
        })
    return out


def _write_cell_files(out: Path, res: CellResult):
    if res.trace is None:
        return
    res.trace.write_csv(out / "traces" / f"{res.cell}.csv")
    for label, (_, r) in res.snapshots.items():
        write_trajectory_csv(out / "trajectories" / f"{res.cell}_{label}.csv", r)


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: Optional[int] = None) -> ExperimentRecord:
    """Run every (surrogate x seed) cell and write the experiment directory."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    order = [s for s in SURROGATES if s in cfg.surrogates]
    jobs = [(cfg, s, k) for k in range(cfg.n_seeds) for s in order]
    n_workers = min(resolve_workers(workers), max(1, len(jobs)))
    t0 = time.perf_counter()
    header = {"type": "header", "version": __version__, "n_theta": cfg.layout.n_theta,
              "config": cfg.to_dict()}
    cells: List[dict] = []
    with open(out / "record.jsonl", "w") as fh:
        fh.write(json.dumps(header) + "\n")

        def consume(res: CellResult):
            _write_cell_files(out, res)
            d = _cell_dict(res)
            cells.append(d)
            fh.write(json.dumps(d) + "\n")
            fh.flush()
            log.info("%s: %s%s", res.cell, res.status,
                     f" best={d['final_best']:.4g}" if res.status == "ok" else "")

        if n_workers == 1:
            for job in jobs:
                consume(run_cell(*job))
        else:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                futures = [pool.submit(_run_cell_args, job) for job in jobs]
                for job, fut in zip(jobs, futures):
                    try:
                        res = fut.result()
                    except Exception as exc:  # worker died
                        res = CellResult(job[1], job[2], "error", f"worker crashed: {exc!r}")
                    consume(res)
        wall = time.perf_counter() - t0
        fh.write(json.dumps({"type": "footer", "wall_clock": wall}) + "\n")
    return ExperimentRecord(header["config"], cells, __version__, wall, out)


def load_record(path) -> ExperimentRecord:
    """Read an experiment directory (or its record.jsonl) back into memory."""
    path = Path(path)
    rec_file = path / "record.jsonl" if path.is_dir() else path
    header, cells, wall = None, [], float("nan")
    with open(rec_file) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            kind = d.get("type")
            if kind == "header":
                header = d
            elif kind == "cell":
                cells.append(d)
            elif kind == "footer":
                wall = d["wall_clock"]
    if header is None:
        raise ValueError(f"{rec_file} has no header line")
    return ExperimentRecord(header["config"], cells, header["version"], wall, rec_file.parent)
