"""
Neural-network-augmented MPC stage cost.

The learnable cost is a diagonal quadratic form plus a feedforward network term
that is shifted so it vanishes at the target state::

    l(x, u) = (x - x_d)' Q (x - x_d) + (u - u_d)' R (u - u_d) + y_nn(x) - y_nn(x_d)

All learnable entries are stacked into one flat vector ``theta`` in the order
``[q, r, vec(W_1), b_1, ..., vec(W_L), b_L]`` with column-major ``vec``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

Q_FLOOR = 0.0
R_FLOOR = 1e-3


@dataclass(frozen=True)
class ParamLayout:
    """Shape bookkeeping for the stacked cost parameter vector."""

    n_x: int = 4
    n_u: int = 1
    hidden_sizes: Tuple[int, ...] = (5, 5)

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.n_x < 1 or self.n_u < 1:
            raise ValueError("n_x and n_u must be positive")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden widths must be positive")

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(out, in) shape of every weight matrix, input layer first."""
        sizes = [self.n_x, *self.hidden_sizes, 1]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def n_network(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    @property
    def n_theta(self) -> int:
        return self.n_x + self.n_u + self.n_network

    def slices(self) -> dict:
        """Named index ranges into theta: 'q', 'r', 'network'."""
        return {
            "q": slice(0, self.n_x),
            "r": slice(self.n_x, self.n_x + self.n_u),
            "network": slice(self.n_x + self.n_u, self.n_theta),
        }


@dataclass
class CostParams:
    """Unpacked cost parameters.

    ``q`` and ``r`` are used as the diagonal weights as-is; use
    :func:`positive_weights` to map raw search-space entries first.
    """

    q: np.ndarray
    r: np.ndarray
    layers: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def n_x(self) -> int:
        return self.q.shape[0]


def unpack(theta, layout: ParamLayout) -> CostParams:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] != layout.n_theta:
        raise ValueError(
            f"theta has shape {theta.shape}, layout expects ({layout.n_theta},)"
        )
    sl = layout.slices()
    pos = sl["network"].start
    layers = []
    for out_dim, in_dim in layout.layer_shapes:
        n_w = out_dim * in_dim
        W = theta[pos:pos + n_w].reshape((out_dim, in_dim), order="F").copy()
        pos += n_w
        b = theta[pos:pos + out_dim].copy()
        pos += out_dim
        layers.append((W, b))
    return CostParams(q=theta[sl["q"]].copy(), r=theta[sl["r"]].copy(), layers=layers)


def pack(params: CostParams) -> np.ndarray:
    parts = [np.ravel(params.q), np.ravel(params.r)]
    for W, b in params.layers:
        parts.append(np.asarray(W).ravel(order="F"))
        parts.append(np.ravel(b))
    return np.concatenate(parts).astype(float)


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.logaddexp(0.0, z)


def positive_weights(params: CostParams, q_floor=Q_FLOOR, r_floor=R_FLOOR) -> CostParams:
    """Map raw q, r entries through softplus-with-floor so Q >= 0 and R > 0."""
    return CostParams(
        q=q_floor + softplus(params.q),
        r=r_floor + softplus(params.r),
        layers=params.layers,
    )


def network_forward(x, layers) -> np.ndarray:
    """Evaluate y_nn on a batch of states; returns shape (batch,).

    Hidden layers use tanh, the output layer is affine.
    """
    z = np.atleast_2d(np.asarray(x, dtype=float))
    for W, b in layers[:-1]:
        z = np.tanh(z @ W.T + b)
    W, b = layers[-1]
    return (z @ W.T + b)[:, 0]


def network_forward_grad(x, layers):
    """Return (y_nn(x), d y_nn / dx) for a batch of states.

    Gradients have shape (batch, n_x) and come from a reverse sweep through
    the cached activations.
    """
    z = np.atleast_2d(np.asarray(x, dtype=float))
    acts = []
    for W, b in layers[:-1]:
        z = np.tanh(z @ W.T + b)
        acts.append(z)
    W_out, b_out = layers[-1]
    y = (z @ W_out.T + b_out)[:, 0]
    delta = np.broadcast_to(W_out[0], z.shape)
    for (W, _), a in zip(reversed(layers[:-1]), reversed(acts)):
        delta = (delta * (1.0 - a * a)) @ W
    return y, delta


def stage_cost(x, u, params: CostParams, x_d, u_d) -> float:
    dx = np.asarray(x, dtype=float) - x_d
    du = np.asarray(u, dtype=float) - u_d
    quad = dx @ (params.q * dx) + du @ (params.r * du)
    if not params.layers:
        return float(quad)
    y = network_forward(np.vstack([x, x_d]), params.layers)
    return float(quad + y[0] - y[1])


def stage_cost_grad_x(x, u, params: CostParams, x_d, u_d) -> np.ndarray:
    dx = np.asarray(x, dtype=float) - x_d
    grad = 2.0 * params.q * dx
    if params.layers:
        _, g = network_forward_grad(x, params.layers)
        grad = grad + g[0]
    return grad


def random_cost_params(layout: ParamLayout, rng, scale=1.0) -> CostParams:
    """Uniform draw of every raw entry in [-scale, scale]; handy for tests."""
    theta = rng.uniform(-scale, scale, size=layout.n_theta)
    return unpack(theta, layout)


def count_parameters(n_x: int, n_u: int, hidden_sizes: Sequence[int]) -> int:
    return ParamLayout(n_x, n_u, tuple(hidden_sizes)).n_theta
