"""
Linearized cart-pole, the parameterized MPC, and the closed-loop objective.

The OCP is solved by single shooting: predicted states are an affine function
of the input sequence, so the N-step cost is minimized over inputs only.
Inputs are projected onto their box every iteration; the state box enters as
a quadratic penalty.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.linalg import expm, solve_discrete_are

from ._ocp_kernel import flatten_layers, pg_solve
from .neural_cost import (
    CostParams,
    ParamLayout,
    network_forward,
    network_forward_grad,
    positive_weights,
    unpack,
)

FAILURE_COST = 1e6


@dataclass(frozen=True)
class CartPoleConstants:
    m_c: float = 1.0  # cart mass [kg], unused by the acceleration-input model
    m_p: float = 0.1  # pole mass [kg], unused by the acceleration-input model
    l: float = 0.5  # pole length [m]
    g: float = 9.81  # [m/s^2]
    dt: float = 0.05  # [s]

    def __post_init__(self):
        for name in ("m_c", "m_p", "l", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    dt: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("model matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def step(self, x, u) -> np.ndarray:
        return self.A @ x + self.B @ np.atleast_1d(u)


def cartpole_continuous(const: CartPoleConstants = CartPoleConstants()):
    """Continuous-time (A, B) about the upright equilibrium.

    State is [x_c, x_c_dot, phi, phi_dot], input is cart acceleration.
    """
    Ac = np.zeros((4, 4))
    Ac[0, 1] = 1.0
    Ac[2, 3] = 1.0
    Ac[3, 2] = const.g / const.l
    Bc = np.array([[0.0], [1.0], [0.0], [1.0 / const.l]])
    return Ac, Bc


def cartpole_nonlinear_rhs(x, u, const: CartPoleConstants = CartPoleConstants()):
    """Pendulum on an accelerated cart, same sign convention as the linear model."""
    _, xd, phi, phid = x
    return np.array([xd, u, phid, (const.g * np.sin(phi) + u * np.cos(phi)) / const.l])


def discretize(Ac, Bc, dt) -> LinearModel:
    """Zero-order-hold discretization via the exponential of the augmented matrix."""
    n_x, n_u = Bc.shape
    aug = np.zeros((n_x + n_u, n_x + n_u))
    aug[:n_x, :n_x] = Ac
    aug[:n_x, n_x:] = Bc
    E = expm(aug * dt)
    return LinearModel(A=E[:n_x, :n_x], B=E[:n_x, n_x:], dt=dt)


def cartpole_linear_model(const: CartPoleConstants = CartPoleConstants()) -> LinearModel:
    Ac, Bc = cartpole_continuous(const)
    return discretize(Ac, Bc, const.dt)


@dataclass
class OcpConfig:
    N: int = 10
    u_min: Tuple[float, ...] = (-10.0,)
    u_max: Tuple[float, ...] = (10.0,)
    x_min: Tuple[float, ...] = (-2.0, -np.inf, -0.6, -np.inf)
    x_max: Tuple[float, ...] = (2.0, np.inf, 0.6, np.inf)
    penalty_weight: float = 1e3
    max_iters: int = 300
    step_tol: float = 1e-8
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    terminal: str = "quadratic"  # "quadratic" (diag q) | "riccati" | "none"

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if np.any(np.asarray(self.u_min) >= np.asarray(self.u_max)):
            raise ValueError("u_min must be < u_max elementwise")
        if self.terminal not in ("riccati", "quadratic", "none"):
            raise ValueError(f"unknown terminal cost mode {self.terminal!r}")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass
class OcpSolution:
    inputs: np.ndarray  # (N, n_u)
    states: np.ndarray  # (N + 1, n_x)
    objective: float
    iterations: int
    converged: bool
    failed: bool
    history: list = field(default_factory=list)


class MpcController:
    """Condensed single-shooting OCP for fixed cost parameters.

    The prediction matrices are built once; :meth:`solve` can then be called
    from any initial state.
    """

    def __init__(self, params: CostParams, model: LinearModel, cfg: OcpConfig,
                 x_d=None, u_d=None):
        self.params = params
        self.model = model
        self.cfg = cfg
        n_x, n_u, N = model.n_x, model.n_u, cfg.N
        self.x_d = np.zeros(n_x) if x_d is None else np.asarray(x_d, dtype=float)
        self.u_d = np.zeros(n_u) if u_d is None else np.asarray(u_d, dtype=float)
        self.u_min = np.broadcast_to(np.asarray(cfg.u_min, dtype=float), (n_u,)).copy()
        self.u_max = np.broadcast_to(np.asarray(cfg.u_max, dtype=float), (n_u,)).copy()
        self.x_min = np.broadcast_to(np.asarray(cfg.x_min, dtype=float), (n_x,)).copy()
        self.x_max = np.broadcast_to(np.asarray(cfg.x_max, dtype=float), (n_x,)).copy()
        self._has_box = bool(np.any(np.isfinite(self.x_min)) or np.any(np.isfinite(self.x_max)))

        # x_i = A^i x0 + sum_{j<i} A^{i-1-j} B u_j
        Phi = np.zeros((N + 1, n_x, n_x))
        Phi[0] = np.eye(n_x)
        for i in range(1, N + 1):
            Phi[i] = model.A @ Phi[i - 1]
        Gam = np.zeros((N + 1, n_x, N, n_u))
        for i in range(1, N + 1):
            for j in range(i):
                Gam[i, :, j, :] = Phi[i - 1 - j] @ model.B
        self.Phi = np.ascontiguousarray(Phi.reshape((N + 1) * n_x, n_x))
        self.Gamma = np.ascontiguousarray(Gam.reshape((N + 1) * n_x, N * n_u))

        self.q = np.asarray(params.q, dtype=float)
        self.r = np.asarray(params.r, dtype=float)
        self.layers = params.layers
        self.P_term = terminal_weight(self.q, self.r, model, cfg.terminal)
        self.y_d = float(network_forward(self.x_d, self.layers)[0]) if self.layers else 0.0
        if self.layers:
            self._wflat, self._sizes = flatten_layers(self.layers)
        else:
            self._wflat, self._sizes = np.zeros(0), np.zeros(1, dtype=np.int64)

    def predict_states(self, x0, U) -> np.ndarray:
        N, n_x = self.cfg.N, self.model.n_x
        return (self.Phi @ x0 + self.Gamma @ np.ravel(U)).reshape(N + 1, n_x)

    def objective_and_grad(self, x0, U, need_grad=True):
        """Objective value and input gradient in plain numpy.

        Reference path; :meth:`solve` runs the compiled kernel.
        """
        N = self.cfg.N
        U = np.asarray(U, dtype=float).reshape(N, -1)
        X = self.predict_states(x0, U)
        dX = X - self.x_d
        dU = U - self.u_d
        f = np.sum(dX[:N] * dX[:N] * self.q) + dX[N] @ self.P_term @ dX[N]
        f += np.sum(dU * dU * self.r)
        gX = np.empty_like(X)
        gX[:N] = 2.0 * self.q * dX[:N]
        gX[N] = 2.0 * self.P_term @ dX[N]
        if self.layers:
            if need_grad:
                y, dy = network_forward_grad(X[:N], self.layers)
                gX[:N] += dy
            else:
                y = network_forward(X[:N], self.layers)
            f += np.sum(y) - N * self.y_d
        if self._has_box:
            over = np.maximum(X[1:] - self.x_max, 0.0)
            under = np.maximum(self.x_min - X[1:], 0.0)
            mu = self.cfg.penalty_weight
            f += mu * (np.sum(over * over) + np.sum(under * under))
            gX[1:] += 2.0 * mu * (over - under)
        if not need_grad:
            return float(f), None
        g = (self.Gamma.T @ gX.ravel()).reshape(U.shape) + 2.0 * self.r * dU
        return float(f), g

    def objective(self, x0, U) -> float:
        return self.objective_and_grad(x0, U, need_grad=False)[0]

    def project(self, U):
        return np.clip(U, self.u_min, self.u_max)

    def solve(self, x0, warm_start=None, record_history=False) -> OcpSolution:
        cfg = self.cfg
        N, n_u = cfg.N, self.model.n_u
        x0 = np.ascontiguousarray(x0, dtype=float)
        if warm_start is None:
            U0 = np.tile(self.u_d, N)
        else:
            U0 = np.asarray(warm_start, dtype=float).reshape(N * n_u)
        alpha0 = 1.0 / max(1e-12, 2.0 * float(np.max(self.r)) + 2.0 * float(np.max(self.q)))
        hist = np.empty(cfg.max_iters + 1 if record_history else 1)
        U, f, iters, converged, failed, n_hist = pg_solve(
            x0, np.ascontiguousarray(U0), self.u_min, self.u_max, self.Phi, self.Gamma,
            self.x_d, self.u_d, self.q, self.P_term, self.r, self._wflat, self._sizes, self.y_d,
            self.x_min, self.x_max, float(cfg.penalty_weight), self._has_box, alpha0,
            int(cfg.max_iters), float(cfg.step_tol), float(cfg.armijo_c), float(cfg.backtrack),
            hist,
        )
        U = U.reshape(N, n_u)
        return OcpSolution(
            inputs=U,
            states=self.predict_states(x0, U),
            objective=float(f),
            iterations=int(iters),
            converged=bool(converged),
            failed=bool(failed),
            history=hist[:n_hist].tolist() if record_history else [],
        )


def terminal_weight(q, r, model: LinearModel, mode: str) -> np.ndarray:
    """Terminal cost matrix built from the learned diagonal weights.

    ``riccati`` solves the discrete algebraic Riccati equation for
    (diag(q), diag(r)); ``quadratic`` is diag(q); ``none`` is zero.
    """
    n_x = model.n_x
    if mode == "none":
        return np.zeros((n_x, n_x))
    if mode == "quadratic":
        return np.diag(q)
    try:
        P = solve_discrete_are(model.A, model.B, np.diag(q), np.diag(r))
    except (np.linalg.LinAlgError, ValueError):
        return np.diag(q)
    if not np.all(np.isfinite(P)):
        return np.diag(q)
    return 0.5 * (P + P.T)


def solve_ocp(x0, params: CostParams, model: LinearModel, cfg: OcpConfig,
              warm_start=None, x_d=None, u_d=None, record_history=False) -> OcpSolution:
    return MpcController(params, model, cfg, x_d, u_d).solve(
        x0, warm_start, record_history=record_history
    )


@dataclass(frozen=True)
class EvalWeights:
    """Fixed closed-loop evaluation weights; the tail term runs from ``tail_start`` to M."""

    Q: Tuple[float, ...] = (1.0, 0.1, 0.1, 0.1)
    R: Tuple[float, ...] = (1.0,)
    P: Tuple[float, ...] = (100.0, 10.0, 10.0, 10.0)
    tail_start: int = 70


def closed_loop_stage_costs(states, inputs, weights: EvalWeights = EvalWeights(),
                            x_d=None, u_d=None) -> np.ndarray:
    """Per-step contributions to G, one entry per state (k = 0..M).

    The final state has no applied input, so step M carries only state terms.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.asarray(inputs, dtype=float).reshape(len(inputs), -1) if len(inputs) else np.zeros((0, 1))
    M = states.shape[0] - 1
    if inputs.shape[0] not in (M, M + 1):
        raise ValueError(f"{states.shape[0]} states need {M} inputs, got {inputs.shape[0]}")
    dx = states - (0.0 if x_d is None else np.asarray(x_d, dtype=float))
    du = inputs - (0.0 if u_d is None else np.asarray(u_d, dtype=float))
    Q = np.asarray(weights.Q, dtype=float)
    P = np.asarray(weights.P, dtype=float)
    R = np.asarray(weights.R, dtype=float)
    per_step = np.sum(dx * dx * Q, axis=1)
    per_step[: du.shape[0]] += np.sum(du * du * R, axis=1)[: M + 1]
    tail = np.arange(M + 1) >= weights.tail_start
    per_step[tail] += np.sum(dx[tail] * dx[tail] * P, axis=1)
    return per_step


def closed_loop_cost(states, inputs, weights: EvalWeights = EvalWeights(), x_d=None, u_d=None) -> float:
    return float(np.sum(closed_loop_stage_costs(states, inputs, weights, x_d, u_d)))


@dataclass
class RolloutResult:
    states: np.ndarray  # (M + 1, n_x)
    inputs: np.ndarray  # (M, n_u)
    cost: float
    per_step_costs: np.ndarray
    failed: bool
    solver_iters_total: int


X_INIT = (0.5, 0.0, 0.2, 0.0)


def rollout_params(params: CostParams, model: LinearModel, cfg: OcpConfig, x_init=X_INIT,
                   M: int = 80, weights: EvalWeights = EvalWeights(),
                   failure_cost: float = FAILURE_COST) -> RolloutResult:
    """Receding-horizon closed loop for already-unpacked (and positive) cost params."""
    if M < 1:
        raise ValueError("evaluation horizon M must be >= 1")
    ctrl = MpcController(params, model, cfg)
    n_x, n_u, N = model.n_x, model.n_u, cfg.N
    states = np.zeros((M + 1, n_x))
    inputs = np.zeros((M, n_u))
    states[0] = np.asarray(x_init, dtype=float)
    warm = None
    failed = False
    iters = 0
    for k in range(M):
        sol = ctrl.solve(states[k], warm)
        iters += sol.iterations
        if sol.failed:
            failed = True
            break
        inputs[k] = sol.inputs[0]
        states[k + 1] = model.step(states[k], inputs[k])
        if not np.all(np.isfinite(states[k + 1])):
            failed = True
            break
        warm = np.vstack([sol.inputs[1:], sol.inputs[-1:]])
    per_step = closed_loop_stage_costs(states, inputs, weights)
    cost = float(np.sum(per_step))
    if failed or not np.isfinite(cost):
        failed = True
        cost = failure_cost
    return RolloutResult(states, inputs, cost, per_step, failed, iters)


def rollout(theta, layout: ParamLayout, model: LinearModel, cfg: OcpConfig, x_init=X_INIT,
            M: int = 80, weights: EvalWeights = EvalWeights(),
            failure_cost: float = FAILURE_COST) -> RolloutResult:
    """Closed-loop rollout for a raw parameter vector.

    The q and r entries of ``theta`` are raw (pre-softplus) values.
    """
    params = positive_weights(unpack(theta, layout))
    return rollout_params(params, model, cfg, x_init, M, weights, failure_cost)


TRAJECTORY_HEADER = ["k", "x_c", "x_c_dot", "phi", "phi_dot", "u", "stage_cost"]


def write_trajectory_csv(path, result: RolloutResult):
    """One row per step k = 0..M; the input column is empty at k = M."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        M = result.states.shape[0] - 1
        for k in range(M + 1):
            u = repr(float(result.inputs[k, 0])) if k < result.inputs.shape[0] else ""
            w.writerow([k, *(repr(float(v)) for v in result.states[k]), u,
                        repr(float(result.per_step_costs[k]))])


def read_trajectory_csv(path):
    """Return (states, inputs, stage_costs) from a trajectory dump."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    states = np.array([[float(r[c]) for c in TRAJECTORY_HEADER[1:5]] for r in rows])
    inputs = np.array([[float(r["u"])] for r in rows if r["u"] != ""])
    costs = np.array([float(r["stage_cost"]) for r in rows])
    return states, inputs, costs
