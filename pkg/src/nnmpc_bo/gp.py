"""
Exact Gaussian-process regression with a constant prior mean.

Posterior moments at a test point ``t`` given data (X, y):

    mean(t) = m0 + k(t, X) Ky^-1 (y - m0)
    var(t)  = k(t, t) - k(t, X) Ky^-1 k(X, t),    Ky = k(X, X) + noise * I

Everything goes through a cached lower Cholesky factor of Ky. Hyperparameters
are fitted by maximizing the log marginal likelihood with a derivative-free
multi-start coordinate search in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.stats import qmc

from . import kernels as kern
from .errors import ContractViolation, ModelFitError
from .kernels import IBNN, MATERN52, KernelSpec

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
NOISE_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Dataset:
    """Evaluated parameters (rows of ``params``) and observed costs ``y``."""

    params: np.ndarray
    y: np.ndarray
    noise_variance: float = 0.0

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.params.size == 0:
            self.params = self.params.reshape(0, self.params.shape[-1] if self.params.ndim == 2 else 0)
        if self.params.shape[0] != self.y.shape[0]:
            raise ContractViolation(
                f"{self.params.shape[0]} parameter rows but {self.y.shape[0]} observations"
            )
        if not (np.all(np.isfinite(self.params)) and np.all(np.isfinite(self.y))):
            raise ContractViolation("dataset entries must be finite")
        if self.noise_variance < 0:
            raise ContractViolation("noise variance must be >= 0")

    def __len__(self):
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.params.shape[1]

    def append(self, theta, y) -> "Dataset":
        return Dataset(np.vstack([self.params, np.atleast_2d(theta)]),
                       np.append(self.y, y), self.noise_variance)


@dataclass
class PosteriorPrediction:
    """Predictive mean and variance; scalars or arrays of matching shape."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variance, dtype=float)
        self.variance = np.maximum(v, 0.0) if v.ndim else max(float(v), 0.0)

    @property
    def std(self):
        return np.sqrt(self.variance)


@dataclass
class GpModel:
    spec: KernelSpec
    data: Dataset
    prior_mean: float
    noise_variance: float
    chol: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    y_offset: float = 0.0
    y_scale: float = 1.0
    jitter: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.data)

    @classmethod
    def prior(cls, spec: KernelSpec, dim: int, prior_mean: float = 0.0) -> "GpModel":
        """Model with no observations: predictions equal the prior."""
        return cls(spec, Dataset(np.zeros((0, dim)), np.zeros(0)), prior_mean, 0.0)

    def predict(self, theta_star) -> PosteriorPrediction:
        return predict(self, theta_star)


def _cholesky_with_jitter(K):
    scale = max(1.0, float(np.mean(np.diag(K)))) if K.size else 1.0
    eye = np.eye(K.shape[0])
    for jitter in JITTERS:
        try:
            L = np.linalg.cholesky(K + jitter * scale * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
            return L, jitter * scale
    raise ModelFitError("Cholesky factorization failed at the largest jitter")


def _standardize(y, enabled):
    if not enabled or y.size == 0:
        return 0.0, 1.0
    offset = float(np.mean(y))
    scale = float(np.std(y))
    if not np.isfinite(scale) or scale < 1e-12:
        scale = 1.0
    return offset, scale


def condition(spec: KernelSpec, data: Dataset, noise_variance: Optional[float] = None,
              prior_mean: Optional[float] = None, standardize: bool = False) -> GpModel:
    """Build the posterior for fixed hyperparameters (no optimization)."""
    if len(data) == 0:
        raise ContractViolation("cannot condition on an empty dataset")
    noise = data.noise_variance if noise_variance is None else float(noise_variance)
    offset, scale = _standardize(data.y, standardize)
    ys = (data.y - offset) / scale
    m0 = float(np.mean(ys)) if prior_mean is None else (prior_mean - offset) / scale
    K = kern.gram(data.params, spec=spec) + noise * np.eye(len(data))
    L, jitter = _cholesky_with_jitter(K)
    alpha = cho_solve((L, True), ys - m0)
    return GpModel(spec, data, m0, noise, L, alpha, offset, scale, jitter)


def log_marginal_likelihood(model: GpModel) -> float:
    """Log evidence of the (possibly standardized) targets under the model."""
    if model.chol is None:
        raise ContractViolation("model has no Cholesky factor")
    r = (model.data.y - model.y_offset) / model.y_scale - model.prior_mean
    return float(-0.5 * r @ model.alpha - np.sum(np.log(np.diag(model.chol)))
                 - 0.5 * model.n * LOG_2PI)


def predict(model: GpModel, theta_star) -> PosteriorPrediction:
    """Posterior mean and variance at one point (1-D input) or many (2-D)."""
    T = np.asarray(theta_star, dtype=float)
    single = T.ndim == 1
    T = np.atleast_2d(T)
    if model.n and T.shape[1] != model.data.dim:
        raise ContractViolation(f"dimension mismatch: {T.shape[1]} vs {model.data.dim}")
    prior_var = kern.kernel_diag(T, model.spec)
    if model.n == 0:
        mean = np.full(T.shape[0], model.prior_mean)
        var = prior_var
    else:
        Ks = kern.gram(T, model.data.params, model.spec)
        mean = model.prior_mean + Ks @ model.alpha
        V = solve_triangular(model.chol, Ks.T, lower=True)
        var = prior_var - np.einsum("ij,ij->j", V, V)
    mean = model.y_offset + model.y_scale * mean
    var = np.maximum(var, 0.0) * model.y_scale ** 2
    if single:
        return PosteriorPrediction(float(mean[0]), float(var[0]))
    return PosteriorPrediction(mean, var)


# Hyperparameter search ---------------------------------------------------------


@dataclass(frozen=True)
class FitOptions:
    n_starts: int = 16
    n_iters: int = 50
    standardize: bool = True
    fit_noise: bool = True
    # log-space bounds; lengthscale bounds are multiplied by sqrt(dim)
    signal_variance_bounds: tuple = (1e-2, 1e2)
    lengthscale_bounds: tuple = (1e-2, 1e1)
    weight_var_bounds: tuple = (1e-2, 1e2)
    bias_var_bounds: tuple = (1e-6, 1e1)
    noise_bounds: tuple = (NOISE_FLOOR, 1.0)


def _hyper_box(spec: KernelSpec, dim: int, opts: FitOptions):
    if spec.variant == MATERN52:
        lo_l, hi_l = opts.lengthscale_bounds
        box = [opts.signal_variance_bounds, (lo_l * math.sqrt(dim), hi_l * math.sqrt(dim))]
    else:
        box = [opts.weight_var_bounds, opts.bias_var_bounds]
    if opts.fit_noise:
        box.append(opts.noise_bounds)
    return np.log(np.asarray(box, dtype=float))


def _unpack_hypers(spec, z, fit_noise, fixed_noise):
    h = np.exp(z)
    if spec.variant == MATERN52:
        s = replace(spec, signal_variance=float(h[0]), lengthscale=float(h[1]))
    else:
        s = replace(spec, weight_var=float(h[0]), bias_var=float(h[1]))
    noise = float(h[2]) if fit_noise else fixed_noise
    return s, noise


class _Evidence:
    """Log marginal likelihood as a function of log-hyperparameters, on fixed data."""

    def __init__(self, spec, data, ys, fit_noise, fixed_noise):
        self.spec = spec
        self.geo = kern.self_geometry(data.params, spec)
        self.ys = ys
        self.m0 = float(np.mean(ys))
        self.fit_noise = fit_noise
        self.fixed_noise = fixed_noise
        self.n = len(ys)
        self.evals = 0

    def __call__(self, z) -> float:
        self.evals += 1
        spec, noise = _unpack_hypers(self.spec, z, self.fit_noise, self.fixed_noise)
        K = kern.gram_from_geometry(self.geo, spec)
        K = 0.5 * (K + K.T) + noise * np.eye(self.n)
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            return -np.inf
        r = self.ys - self.m0
        a = cho_solve((L, True), r)
        val = -0.5 * r @ a - np.sum(np.log(np.diag(L))) - 0.5 * self.n * LOG_2PI
        return float(val) if np.isfinite(val) else -np.inf


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_max(f, lo, hi, n_iter):
    """Golden-section maximization of a 1-D function on [lo, hi].

    Returns (x, f(x), evaluations used).
    """
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    used = 2
    for _ in range(max(0, n_iter - 2)):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
        used += 1
    return (c, fc, used) if fc >= fd else (d, fd, used)


def coordinate_golden_search(f, z0, box, n_iters, width=0.5):
    """Maximize f by cycling golden-section line searches over coordinates.

    Each line search brackets the current value by +-width (in log units, clipped
    to the box) and spends a few evaluations; the bracket halves after every
    full sweep. ``n_iters`` bounds the total golden-section evaluations.
    """
    z = np.array(z0, dtype=float)
    fz = f(z)
    budget = n_iters
    per_line = 5
    while budget > 0:
        for i in range(z.shape[0]):
            if budget <= 0:
                break
            lo = max(box[i, 0], z[i] - width * (box[i, 1] - box[i, 0]))
            hi = min(box[i, 1], z[i] + width * (box[i, 1] - box[i, 0]))
            trial = z.copy()

            def line(v, i=i, trial=trial):
                trial[i] = v
                return f(trial)

            xi, fi, used = _golden_max(line, lo, hi, min(per_line, budget))
            budget -= used
            if fi > fz:
                z[i], fz = xi, fi
        width *= 0.5
    return z, fz


def _start_points(box, n_starts):
    """Deterministic low-discrepancy multi-start grid in the log box."""
    d = box.shape[0]
    u = qmc.Halton(d, scramble=False).random(n_starts + 1)[1:]
    return box[:, 0] + u * (box[:, 1] - box[:, 0])


def fit(data: Dataset, spec: KernelSpec, optimize: bool = True,
        options: FitOptions = FitOptions()) -> GpModel:
    """Fit a GP to ``data``.

    With ``optimize`` the kernel hyperparameters (Matern: signal variance and
    lengthscale; NNGP: weight and bias variance, depth fixed) and the noise
    variance maximize the log marginal likelihood. Otherwise the values in
    ``spec`` and ``data.noise_variance`` are used as given. The prior mean is
    the sample mean of the (standardized) targets.
    """
    if len(data) == 0:
        raise ContractViolation("cannot fit a GP to an empty dataset")
    standardize = options.standardize
    if not optimize:
        return condition(spec, data, standardize=standardize)
    offset, scale = _standardize(data.y, standardize)
    ys = (data.y - offset) / scale
    fixed_noise = max(data.noise_variance / scale ** 2, 0.0)
    evidence = _Evidence(spec, data, ys, options.fit_noise, fixed_noise)
    box = _hyper_box(spec, data.dim, options)
    best_z, best_f = None, -np.inf
    for z0 in _start_points(box, options.n_starts):
        z, fz = coordinate_golden_search(evidence, z0, box, options.n_iters)
        if fz > best_f:
            best_z, best_f = z, fz
    if best_z is None:
        raise ModelFitError("log marginal likelihood was not finite at any start point")
    fitted, noise = _unpack_hypers(spec, best_z, options.fit_noise, fixed_noise)
    model = condition(fitted, Dataset(data.params, ys, 0.0), noise_variance=noise)
    model.y_offset, model.y_scale = offset, scale
    model.data = data
    model.info = {"lml": best_f, "evals": evidence.evals}
    return model


def lml_at(data: Dataset, spec: KernelSpec, noise_variance: float,
           standardize: bool = True) -> float:
    """Log marginal likelihood of ``data`` at fixed hyperparameters."""
    return log_marginal_likelihood(
        condition(spec, data, noise_variance=noise_variance, standardize=standardize)
    )
