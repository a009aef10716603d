"""
Finite-width Bayesian neural network surrogate sampled with Hamiltonian Monte Carlo.

Prior: every weight and bias is independent N(0, prior_variance).
Likelihood: y_i ~ N(net(theta_i; w), likelihood_noise).
Predictions average the network over posterior samples; the variance uses the
(S - 1) denominator and contains no observation noise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation
from .gp import Dataset, PosteriorPrediction

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class HmcSettings:
    step_size: float = 0.01  # initial value, adapted during burn-in
    n_leapfrog: int = 20
    n_burnin: int = 200
    thinning: int = 5
    target_accept: float = 0.8
    step_jitter: float = 0.1  # relative uniform jitter of the step size per trajectory

    def __post_init__(self):
        if not self.step_size > 0:
            raise ContractViolation("HMC step size must be > 0")
        if self.n_leapfrog < 1:
            raise ContractViolation("need at least one leapfrog step")
        if self.thinning < 1 or self.n_burnin < 0:
            raise ContractViolation("invalid burn-in or thinning")
        if not 0 < self.target_accept < 1:
            raise ContractViolation("target acceptance must lie in (0, 1)")


@dataclass(frozen=True)
class BnnConfig:
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    prior_variance: float = 1.0
    likelihood_noise: float = 0.1
    n_samples: int = 200
    hmc: HmcSettings = HmcSettings()

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.activation != "tanh":
            raise ContractViolation("the BNN surrogate uses tanh hidden units")
        if not self.prior_variance > 0 or not self.likelihood_noise > 0:
            raise ContractViolation("prior and likelihood variances must be > 0")
        if self.n_samples < 2:
            raise ContractViolation("need at least two posterior samples")


class MlpShape:
    """Flat-vector view of a tanh MLP with scalar affine output.

    Layout per layer: row-major W (out x in) followed by b.
    """

    def __init__(self, n_in: int, hidden_sizes: Sequence[int]):
        self.sizes = [int(n_in), *[int(h) for h in hidden_sizes], 1]
        self.shapes = [(self.sizes[i + 1], self.sizes[i]) for i in range(len(self.sizes) - 1)]
        self.n_params = sum(o * i + o for o, i in self.shapes)

    def split(self, w):
        out = []
        pos = 0
        for o, i in self.shapes:
            W = w[pos:pos + o * i].reshape(o, i)
            pos += o * i
            out.append((W, w[pos:pos + o]))
            pos += o
        return out

    def forward(self, w, X) -> np.ndarray:
        z = np.atleast_2d(X)
        layers = self.split(w)
        for W, b in layers[:-1]:
            z = np.tanh(z @ W.T + b)
        W, b = layers[-1]
        return z @ W[0] + b[0]

    def forward_and_vjp(self, w, X, cotangent):
        """Outputs and d/dw of sum(cotangent * outputs)."""
        X = np.atleast_2d(X)
        layers = self.split(w)
        acts = [X]
        z = X
        for W, b in layers[:-1]:
            z = np.tanh(z @ W.T + b)
            acts.append(z)
        W_out, b_out = layers[-1]
        out = z @ W_out[0] + b_out[0]
        grads = []
        delta = cotangent[:, None]  # d/d(pre-activation of output), shape (n, 1)
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            a_in = acts[li]
            grads.append((delta.T @ a_in, delta.sum(axis=0)))
            if li > 0:
                delta = (delta @ W) * (1.0 - a_in * a_in)
        g = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
        return out, g


WeightSample = np.ndarray


def log_posterior_unnorm(weights, data: Dataset, cfg: BnnConfig, shape: Optional[MlpShape] = None,
                         likelihood_weight: float = 1.0) -> float:
    """log p(y | X, w) + log p(w), normalizing constants of both Gaussians included."""
    return log_posterior_and_grad(weights, data, cfg, shape, likelihood_weight)[0]


def log_posterior_and_grad(weights, data: Dataset, cfg: BnnConfig,
                           shape: Optional[MlpShape] = None, likelihood_weight: float = 1.0):
    w = np.asarray(weights, dtype=float)
    shape = shape or MlpShape(data.dim, cfg.hidden_sizes)
    nu = cfg.prior_variance
    s2 = cfg.likelihood_noise
    lp = -0.5 * (w @ w) / nu - 0.5 * w.size * (LOG_2PI + math.log(nu))
    grad = -w / nu
    if likelihood_weight != 0.0 and len(data):
        out = shape.forward(w, data.params)
        resid = data.y - out
        ll = -0.5 * (resid @ resid) / s2 - 0.5 * len(data) * (LOG_2PI + math.log(s2))
        _, g = shape.forward_and_vjp(w, data.params, likelihood_weight * resid / s2)
        lp += likelihood_weight * ll
        grad = grad + g
    return float(lp), grad


def leapfrog(w, p, logp_grad, step_size: float, n_steps: int, grad0=None):
    """Velocity-Verlet integration of Hamiltonian dynamics with unit mass.

    ``logp_grad(w)`` returns (log density, gradient). Returns the end point
    ``(w, p, log density, gradient)`` so the caller can reuse the last gradient.
    """
    w = np.array(w, dtype=float)
    p = np.array(p, dtype=float)
    if grad0 is None:
        _, grad0 = logp_grad(w)
    p = p + 0.5 * step_size * grad0
    lp, g = None, grad0
    for i in range(n_steps):
        w = w + step_size * p
        lp, g = logp_grad(w)
        if i < n_steps - 1:
            p = p + step_size * g
    p = p + 0.5 * step_size * g
    return w, p, lp, g


@dataclass
class HmcResult:
    samples: List[WeightSample]
    acceptance_rate: float
    step_size: float
    warnings: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


class _DualAveraging:
    """Step-size adaptation toward a target acceptance probability."""

    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * step_size)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps_bar = math.log(step_size)
        self.t = 0

    def update(self, accept_prob):
        self.t += 1
        t = self.t
        eta = 1.0 / (t + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_prob)
        log_eps = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        w = t ** (-self.kappa)
        self.log_eps_bar = w * log_eps + (1 - w) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar)


def sample_posterior(data: Dataset, cfg: BnnConfig, seed, likelihood_weight: float = 1.0,
                     init=None) -> HmcResult:
    """Draw ``cfg.n_samples`` thinned post-burn-in HMC samples of the weights.

    ``seed`` may be an int or a numpy Generator. ``likelihood_weight=0`` samples
    the prior. Low acceptance (< 0.1) adds a warning to the result.
    """
    if likelihood_weight != 0.0 and len(data) == 0:
        raise ContractViolation("sample_posterior needs a nonempty dataset")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = MlpShape(data.dim, cfg.hidden_sizes)
    hmc = cfg.hmc

    def logp(w):
        return log_posterior_and_grad(w, data, cfg, shape, likelihood_weight)

    if init is None:
        w = rng.normal(0.0, math.sqrt(cfg.prior_variance), size=shape.n_params)
    else:
        w = np.array(init, dtype=float)
    lp, g = logp(w)
    step = hmc.step_size
    adapt = _DualAveraging(step, hmc.target_accept)
    samples: List[WeightSample] = []
    n_total = hmc.n_burnin + cfg.n_samples * hmc.thinning
    accepted = 0
    for it in range(n_total):
        burnin = it < hmc.n_burnin
        eps = step * (1.0 + hmc.step_jitter * (2.0 * rng.random() - 1.0))
        p0 = rng.standard_normal(w.size)
        w_new, p, lp_new, g_new = leapfrog(w, p0, logp, eps, hmc.n_leapfrog, grad0=g)
        h0 = -lp + 0.5 * (p0 @ p0)
        h1 = -lp_new + 0.5 * (p @ p)
        log_ratio = h0 - h1
        accept_prob = 1.0 if log_ratio >= 0 else (math.exp(log_ratio) if np.isfinite(log_ratio) else 0.0)
        if rng.random() < accept_prob:
            w, lp, g = w_new, lp_new, g_new
            if not burnin:
                accepted += 1
        if burnin:
            step = adapt.update(accept_prob)
            if it == hmc.n_burnin - 1:
                step = adapt.final
        elif (it - hmc.n_burnin + 1) % hmc.thinning == 0:
            samples.append(w.copy())
    n_post = n_total - hmc.n_burnin
    rate = accepted / n_post if n_post else 0.0
    notes = []
    if rate < 0.1:
        msg = f"HMC acceptance rate {rate:.3f} is below 0.1; posterior samples are unreliable"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return HmcResult(samples, rate, step, notes)


def predict(samples, theta_star, shape: MlpShape) -> PosteriorPrediction:
    """Monte-Carlo predictive mean and epistemic variance over weight samples."""
    samples = list(samples)
    if len(samples) < 2:
        raise ContractViolation("need at least two samples for a predictive variance")
    T = np.asarray(theta_star, dtype=float)
    single = T.ndim == 1
    outs = np.stack([shape.forward(w, np.atleast_2d(T)) for w in samples])
    # shift by the first sample so identical samples give exactly zero variance
    dev = outs - outs[0]
    dmean = dev.mean(axis=0)
    mean = outs[0] + dmean
    var = ((dev - dmean) ** 2).sum(axis=0) / (len(samples) - 1)
    if single:
        return PosteriorPrediction(float(mean[0]), float(var[0]))
    return PosteriorPrediction(mean, var)
