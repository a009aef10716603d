"""
Bayesian-optimization loop over the unit box, minimizing a black-box cost.

Surrogates only need ``refit(dataset)`` and ``predict(thetas)``; the acquisition
is log Expected Improvement maximized over a finite candidate set (uniform draws
plus Gaussian perturbations of the incumbent).
"""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Protocol

import numpy as np
from scipy.special import erfcx, ndtr

from . import bnn as bnn_mod
from . import gp as gp_mod
from .errors import ContractViolation
from .gp import Dataset, PosteriorPrediction
from .kernels import IBNN, MATERN52, KernelSpec

LOG_EI_SWITCH = -37.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Surrogate(Protocol):
    def refit(self, data: Dataset) -> None: ...

    def predict(self, thetas) -> PosteriorPrediction: ...


@dataclass(frozen=True)
class BoConfig:
    n_init: int = 10
    n_iter: int = 100
    n_candidates: int = 2048
    local_perturb_count: int = 256
    perturb_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_init < 1:
            raise ContractViolation("n_init must be >= 1")
        if self.n_iter < 0:
            raise ContractViolation("n_iter must be >= 0")
        if self.n_candidates < 1:
            raise ContractViolation("n_candidates must be >= 1")
        if self.local_perturb_count < 0 or self.perturb_scale < 0:
            raise ContractViolation("perturbation settings must be non-negative")


# Acquisition -------------------------------------------------------------------


def _log_h(z):
    """log(z * Phi(z) + phi(z)), stable for all finite z."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    zp = z[pos]
    out[pos] = np.log(zp * ndtr(zp) + np.exp(-0.5 * zp * zp - _HALF_LOG_2PI))
    mid = (~pos) & (z >= LOG_EI_SWITCH)
    zm = z[mid]
    # Phi(z) / phi(z) = sqrt(pi / 2) * erfcx(-z / sqrt(2))
    out[mid] = (-0.5 * zm * zm - _HALF_LOG_2PI
                + np.log1p(zm * math.sqrt(math.pi / 2.0) * erfcx(-zm / math.sqrt(2.0))))
    low = z < LOG_EI_SWITCH
    zl = z[low]
    # asymptotic expansion of 1 + z Phi/phi = z^-2 (1 - 3 z^-2 + 15 z^-4 - 105 z^-6 + 945 z^-8 ...)
    u = 1.0 / (zl * zl)
    series = 1.0 - 3.0 * u + 15.0 * u ** 2 - 105.0 * u ** 3 + 945.0 * u ** 4
    out[low] = -0.5 * zl * zl - _HALF_LOG_2PI + np.log(u) + np.log(series)
    return out


def log_expected_improvement(pred: PosteriorPrediction, best_y: float):
    """log EI for minimization. Deterministic predictions (variance 0) give
    log(best_y - mean), or -inf when there is no improvement."""
    mean = np.asarray(pred.mean, dtype=float)
    var = np.asarray(pred.variance, dtype=float)
    scalar = mean.ndim == 0
    mean, var = np.atleast_1d(mean), np.atleast_1d(var)
    if np.any(var < 0):
        raise ContractViolation("predictive variance must be >= 0")
    sigma = np.sqrt(var)
    out = np.full(mean.shape, -np.inf)
    zero = sigma == 0
    gain = best_y - mean[zero]
    with np.errstate(divide="ignore"):
        out[zero] = np.where(gain > 0, np.log(np.where(gain > 0, gain, 1.0)), -np.inf)
    nz = ~zero
    z = (best_y - mean[nz]) / sigma[nz]
    out[nz] = np.log(sigma[nz]) + _log_h(z)
    return float(out[0]) if scalar else out


# Surrogates ----------------------------------------------------------------------


class GpSurrogate:
    """Exact GP with refitted hyperparameters (Matern 5/2 or NNGP kernel).

    Parameters
    ----------
    centered : bool
        Feed the kernel (2 theta - 1) * sqrt(3) instead of theta in [0, 1]^d.
        The NNGP kernel is not translation invariant: on the positive orthant
        every pair of points is strongly correlated. Centering gives the
        same input geometry the BNN surrogate sees (unit second moment after
        the kernel's 1/d). For Matern 5/2 it is only a lengthscale change.
    """

    def __init__(self, spec: KernelSpec = KernelSpec(), options: gp_mod.FitOptions = gp_mod.FitOptions(),
                 centered: bool = False):
        self.spec = spec
        self.options = options
        self.centered = centered
        self.model: Optional[gp_mod.GpModel] = None

    @property
    def name(self):
        return "ibnn" if self.spec.variant == IBNN else "matern_gp"

    def _features(self, thetas):
        T = np.asarray(thetas, dtype=float)
        return (2.0 * T - 1.0) * math.sqrt(3.0) if self.centered else T

    def refit(self, data: Dataset):
        data = Dataset(self._features(data.params), data.y, data.noise_variance)
        self.model = gp_mod.fit(data, self.spec, optimize=True, options=self.options)

    def predict(self, thetas) -> PosteriorPrediction:
        if self.model is None:
            raise ContractViolation("refit the surrogate before predicting")
        return gp_mod.predict(self.model, self._features(thetas))


class BnnSurrogate:
    """HMC-sampled BNN on standardized costs.

    Inputs in [0, 1]^d are centered and scaled by sqrt(3 / d) so their squared
    norm is about 1 whatever the dimension.
    """

    name = "bnn"

    def __init__(self, cfg: bnn_mod.BnnConfig = bnn_mod.BnnConfig(), seed=0):
        self.cfg = cfg
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.result: Optional[bnn_mod.HmcResult] = None
        self.shape: Optional[bnn_mod.MlpShape] = None
        self._offset, self._scale = 0.0, 1.0
        self._last = None
        self.diagnostics: List[dict] = []

    def _features(self, thetas):
        T = np.atleast_2d(np.asarray(thetas, dtype=float))
        return (2.0 * T - 1.0) * math.sqrt(3.0 / T.shape[1])

    def refit(self, data: Dataset):
        self._offset = float(np.mean(data.y))
        s = float(np.std(data.y))
        self._scale = s if s > 1e-12 else 1.0
        scaled = Dataset(self._features(data.params), (data.y - self._offset) / self._scale)
        if self.shape is None or self.shape.sizes[0] != data.dim:
            self.shape = bnn_mod.MlpShape(data.dim, self.cfg.hidden_sizes)
            self._last = None
        # warm-start the chain at the previous final sample
        self.result = bnn_mod.sample_posterior(scaled, self.cfg, self.rng, init=self._last)
        self._last = self.result.samples[-1]
        self.diagnostics.append({"acceptance": self.result.acceptance_rate,
                                 "step_size": self.result.step_size,
                                 "warnings": list(self.result.warnings)})

    def predict(self, thetas) -> PosteriorPrediction:
        if self.result is None:
            raise ContractViolation("refit the surrogate before predicting")
        T = np.asarray(thetas, dtype=float)
        pred = bnn_mod.predict(self.result.samples, self._features(T) if T.ndim == 2
                               else self._features(T)[0], self.shape)
        return PosteriorPrediction(self._offset + self._scale * np.asarray(pred.mean),
                                   self._scale ** 2 * np.asarray(pred.variance))


# Loop ----------------------------------------------------------------------------


def theta_hash(theta) -> str:
    """Stable short digest of a parameter vector (float64, little endian)."""
    data = np.ascontiguousarray(np.asarray(theta, dtype="<f8")).tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


@dataclass
class TraceRecord:
    iteration: int
    theta: np.ndarray
    observed: float
    best: float


@dataclass
class BoTrace:
    records: List[TraceRecord] = field(default_factory=list)
    timings: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def add(self, theta, y):
        best = y if not self.records else min(self.records[-1].best, y)
        self.records.append(TraceRecord(len(self.records), np.array(theta, dtype=float), float(y), float(best)))

    @property
    def best_costs(self) -> np.ndarray:
        return np.array([r.best for r in self.records])

    @property
    def observed(self) -> np.ndarray:
        return np.array([r.observed for r in self.records])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.records])

    def dataset(self) -> Dataset:
        return Dataset(self.thetas, self.observed)

    def best_index(self) -> int:
        return int(np.argmin(self.observed))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "theta_hash", "observed_cost", "best_cost"])
            for r in self.records:
                w.writerow([r.iteration, theta_hash(r.theta), repr(r.observed), repr(r.best)])


def read_trace_csv(path):
    """Rows of a trace CSV as (iters, hashes, observed, best)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (
        np.array([int(r["iter"]) for r in rows]),
        [r["theta_hash"] for r in rows],
        np.array([float(r["observed_cost"]) for r in rows]),
        np.array([float(r["best_cost"]) for r in rows]),
    )


def candidate_set(data: Dataset, cfg: BoConfig, rng) -> np.ndarray:
    dim = data.dim
    uniform = rng.uniform(size=(cfg.n_candidates, dim))
    if cfg.local_perturb_count == 0 or len(data) == 0:
        return uniform
    best = data.params[int(np.argmin(data.y))]
    local = best + cfg.perturb_scale * rng.standard_normal((cfg.local_perturb_count, dim))
    return np.vstack([uniform, np.clip(local, 0.0, 1.0)])


def select_candidate(surrogate: Surrogate, best_y: float, candidates) -> int:
    """Index of the candidate with the largest log EI; ties go to the lowest index."""
    acq = np.atleast_1d(log_expected_improvement(surrogate.predict(candidates), best_y))
    return int(np.argmax(np.where(np.isnan(acq), -np.inf, acq)))


def propose(surrogate: Surrogate, data: Dataset, cfg: BoConfig, rng, candidates=None) -> np.ndarray:
    """Next parameter vector: the log-EI maximizer over the candidate set."""
    cands = candidate_set(data, cfg, rng) if candidates is None else np.atleast_2d(candidates)
    return cands[select_candidate(surrogate, float(np.min(data.y)), cands)].copy()


def initial_design(dim: int, n_init: int, rng) -> np.ndarray:
    return rng.uniform(size=(n_init, dim))


def run(objective: Callable[[np.ndarray], float], surrogate: Surrogate, cfg: BoConfig, dim: int,
        rng=None, init_thetas=None, callback=None) -> BoTrace:
    """Initial design followed by ``cfg.n_iter`` propose / evaluate / refit cycles."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    init = initial_design(dim, cfg.n_init, rng) if init_thetas is None else np.atleast_2d(init_thetas)
    if init.shape != (cfg.n_init, dim):
        raise ContractViolation(f"initial design has shape {init.shape}, expected {(cfg.n_init, dim)}")
    trace = BoTrace()
    for theta in init:
        trace.add(theta, objective(theta))
        trace.timings.append(0.0)
        if callback:
            callback(trace)
    for _ in range(cfg.n_iter):
        t0 = time.perf_counter()
        data = trace.dataset()
        surrogate.refit(data)
        theta = propose(surrogate, data, cfg, rng)
        trace.timings.append(time.perf_counter() - t0)
        trace.add(theta, objective(theta))
        if callback:
            callback(trace)
    return trace


def random_search(objective: Callable[[np.ndarray], float], cfg: BoConfig, dim: int, rng=None,
                  init_thetas=None, callback=None) -> BoTrace:
    """Uniform sampling of the box with the same trace layout as :func:`run`."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    init = initial_design(dim, cfg.n_init, rng) if init_thetas is None else np.atleast_2d(init_thetas)
    trace = BoTrace()
    for theta in init:
        trace.add(theta, objective(theta))
        trace.timings.append(0.0)
        if callback:
            callback(trace)
    for _ in range(cfg.n_iter):
        theta = rng.uniform(size=dim)
        trace.timings.append(0.0)
        trace.add(theta, objective(theta))
        if callback:
            callback(trace)
    return trace
