"""
Covariance functions: Matern 5/2 and the infinite-width ReLU network (NNGP) kernel.

The NNGP kernel is computed by propagating the covariance of a fully connected
ReLU network through its layers, starting from the linear input layer

    K0(a, b) = bias_var + weight_var / n * a.b

and applying, per layer,

    K(a, b) <- bias_var + weight_var * E[relu(z1) relu(z2)]

where (z1, z2) is zero-mean Gaussian with the previous layer's covariance.
For ReLU the expectation is the arc-cosine closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContractViolation

MATERN52 = "matern52"
IBNN = "ibnn"
_DEGENERATE = 1e-300


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters.

    Matern 5/2 uses ``signal_variance`` and ``lengthscale``; the NNGP kernel
    uses ``depth``, ``weight_var`` and ``bias_var``.
    """

    variant: str = MATERN52
    signal_variance: float = 1.0
    lengthscale: float = 1.0
    depth: int = 3
    weight_var: float = 1.0
    bias_var: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        if self.variant not in (MATERN52, IBNN):
            raise ContractViolation(f"unknown kernel variant {self.variant!r}")
        if self.variant == MATERN52:
            if not self.signal_variance > 0 or not self.lengthscale > 0:
                raise ContractViolation("Matern signal variance and lengthscale must be > 0")
        else:
            if self.depth < 1:
                raise ContractViolation("NNGP depth must be >= 1")
            if not self.weight_var > 0:
                raise ContractViolation("weight variance must be > 0")
            if not self.bias_var >= 0:
                raise ContractViolation("bias variance must be >= 0")
            if self.activation != "relu":
                raise ContractViolation("only the ReLU NNGP kernel is implemented")

    def replace(self, **changes) -> "KernelSpec":
        from dataclasses import replace

        return replace(self, **changes)


class CovTriple(NamedTuple):
    """k(a, a), k(a, b), k(b, b) carried through one layer of the recursion."""

    k_xx: float
    k_xy: float
    k_yy: float


def _pair(theta, theta_prime):
    a = np.asarray(theta, dtype=float).ravel()
    b = np.asarray(theta_prime, dtype=float).ravel()
    if a.shape != b.shape:
        raise ContractViolation(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 1:
        raise ContractViolation("inputs must have at least one dimension")
    return a, b


def _matern_from_dist(r, signal_variance, lengthscale):
    s = np.sqrt(5.0) * r / lengthscale
    return signal_variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


def matern52(theta, theta_prime, spec: KernelSpec) -> float:
    if spec.variant != MATERN52:
        raise ContractViolation("matern52 called with a non-Matern spec")
    a, b = _pair(theta, theta_prime)
    r = float(np.sqrt(np.sum((a - b) ** 2)))
    return float(_matern_from_dist(r, spec.signal_variance, spec.lengthscale))


def relu_expectation(k_xx, k_xy, k_yy):
    """E[relu(z1) relu(z2)] for zero-mean Gaussians with the given covariance.

    Works elementwise on arrays. When either variance vanishes the expectation
    is taken as 0 (the limit of the closed form).
    """
    k_xx = np.asarray(k_xx, dtype=float)
    k_yy = np.asarray(k_yy, dtype=float)
    prod = k_xx * k_yy
    degenerate = prod < _DEGENERATE
    norm = np.sqrt(np.where(degenerate, 1.0, prod))
    rho = np.clip(np.asarray(k_xy, dtype=float) / norm, -1.0, 1.0)
    psi = np.arccos(rho)
    val = norm / (2.0 * np.pi) * (np.sin(psi) + (np.pi - psi) * np.cos(psi))
    return np.where(degenerate, 0.0, val)


def ibnn_input_layer(theta, theta_prime, spec: KernelSpec) -> CovTriple:
    if spec.variant != IBNN:
        raise ContractViolation("ibnn_input_layer called with a non-NNGP spec")
    a, b = _pair(theta, theta_prime)
    n = a.shape[0]
    scale = spec.weight_var / n
    return CovTriple(
        spec.bias_var + scale * float(a @ a),
        spec.bias_var + scale * float(a @ b),
        spec.bias_var + scale * float(b @ b),
    )


def ibnn_layer_step(cov: CovTriple, spec: KernelSpec) -> CovTriple:
    """One ReLU layer of the covariance recursion."""
    k_xx, k_xy, k_yy = (float(c) for c in cov)
    if k_xx < 0 or k_yy < 0:
        raise ContractViolation("layer variances must be non-negative")
    if k_xy * k_xy > k_xx * k_yy + 1e-12 * max(1.0, k_xx * k_yy):
        raise ContractViolation("covariance triple violates Cauchy-Schwarz")
    b, w = spec.bias_var, spec.weight_var
    # diagonal: psi = 0 gives E[relu(z)^2] = k / 2
    return CovTriple(
        b + w * 0.5 * k_xx,
        b + w * float(relu_expectation(k_xx, k_xy, k_yy)),
        b + w * 0.5 * k_yy,
    )


def ibnn_kernel(theta, theta_prime, spec: KernelSpec) -> float:
    cov = ibnn_input_layer(theta, theta_prime, spec)
    for _ in range(spec.depth):
        cov = ibnn_layer_step(cov, spec)
    return float(cov.k_xy)


def kernel(theta, theta_prime, spec: KernelSpec) -> float:
    if spec.variant == MATERN52:
        return matern52(theta, theta_prime, spec)
    return ibnn_kernel(theta, theta_prime, spec)


# Matrix forms. The GP fit evaluates many hyperparameter settings on the same
# inputs, so the hyperparameter-free geometry (distances or inner products) is
# split out from the cheap hyperparameter-dependent part.


def _as_matrix(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return X


def pairwise_geometry(X, Y, spec: KernelSpec):
    """Hyperparameter-free ingredients for :func:`gram_from_geometry`."""
    X, Y = _as_matrix(X), _as_matrix(Y)
    if X.shape[1] != Y.shape[1]:
        raise ContractViolation(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.variant == MATERN52:
        return {"dist": cdist(X, Y)}
    n = X.shape[1]
    return {
        "inner": (X @ Y.T) / n,
        "sq_x": np.einsum("ij,ij->i", X, X) / n,
        "sq_y": np.einsum("ij,ij->i", Y, Y) / n,
    }


def self_geometry(X, spec: KernelSpec):
    """Like :func:`pairwise_geometry` for X against itself, exactly symmetric."""
    X = _as_matrix(X)
    geo = pairwise_geometry(X, X, spec)
    if spec.variant == MATERN52:
        D = geo["dist"]
        geo["dist"] = 0.5 * (D + D.T)
        np.fill_diagonal(geo["dist"], 0.0)
    else:
        G = geo["inner"]
        geo["inner"] = 0.5 * (G + G.T)
        np.fill_diagonal(geo["inner"], geo["sq_x"])
    return geo


def gram_from_geometry(geo, spec: KernelSpec) -> np.ndarray:
    if spec.variant == MATERN52:
        return _matern_from_dist(geo["dist"], spec.signal_variance, spec.lengthscale)
    b, w = spec.bias_var, spec.weight_var
    K = b + w * geo["inner"]
    kx = b + w * geo["sq_x"]
    ky = b + w * geo["sq_y"]
    for _ in range(spec.depth):
        K = b + w * relu_expectation(kx[:, None], K, ky[None, :])
        kx = b + w * 0.5 * kx
        ky = b + w * 0.5 * ky
    return K


def diag_from_geometry(sq, spec: KernelSpec) -> np.ndarray:
    """k(x, x) for every row, given squared norms / n (NNGP) or anything (Matern)."""
    sq = np.asarray(sq, dtype=float)
    if spec.variant == MATERN52:
        return np.full(sq.shape, spec.signal_variance)
    b, w = spec.bias_var, spec.weight_var
    k = b + w * sq
    for _ in range(spec.depth):
        k = b + w * 0.5 * k
    return k


def gram(X, Y=None, spec: KernelSpec = KernelSpec()) -> np.ndarray:
    """Kernel matrix k(X, Y); with Y omitted the result is exactly symmetric."""
    if Y is None:
        K = gram_from_geometry(self_geometry(X, spec), spec)
        return 0.5 * (K + K.T)
    return gram_from_geometry(pairwise_geometry(X, Y, spec), spec)


def kernel_diag(X, spec: KernelSpec) -> np.ndarray:
    X = _as_matrix(X)
    return diag_from_geometry(np.einsum("ij,ij->i", X, X) / X.shape[1], spec)
