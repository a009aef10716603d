import numpy as np
import pytest
from scipy.linalg import expm, solve_discrete_are

from nnmpc_bo._ocp_kernel import objective_grad
from nnmpc_bo.neural_cost import CostParams, ParamLayout, random_cost_params
from nnmpc_bo.plant_mpc import (
    FAILURE_COST,
    X_INIT,
    CartPoleConstants,
    EvalWeights,
    LinearModel,
    MpcController,
    OcpConfig,
    cartpole_continuous,
    cartpole_linear_model,
    cartpole_nonlinear_rhs,
    closed_loop_cost,
    closed_loop_stage_costs,
    discretize,
    read_trajectory_csv,
    rollout,
    rollout_params,
    solve_ocp,
    write_trajectory_csv,
)

MODEL = cartpole_linear_model()
UNBOXED = dict(x_min=(-np.inf,) * 4, x_max=(np.inf,) * 4, u_min=(-1e6,), u_max=(1e6,))


def hand_tuned(q=1.0, r=0.1):
    return CostParams(np.full(4, q), np.array([r]))


def fd_jacobian(f, z, eps=1e-6):
    cols = [(f(z + eps * e) - f(z - eps * e)) / (2 * eps) for e in np.eye(len(z))]
    return np.array(cols).T


# plant --------------------------------------------------------------------------


def test_equilibrium_is_fixed_point():
    np.testing.assert_array_equal(MODEL.step(np.zeros(4), 0.0), np.zeros(4))


def test_linearization_matches_finite_differences():
    const = CartPoleConstants()
    Ac, Bc = cartpole_continuous(const)
    A_fd = fd_jacobian(lambda x: cartpole_nonlinear_rhs(x, 0.0, const), np.zeros(4))
    B_fd = fd_jacobian(lambda u: cartpole_nonlinear_rhs(np.zeros(4), u[0], const), np.zeros(1))
    np.testing.assert_allclose(Ac, A_fd, atol=1e-6)
    np.testing.assert_allclose(Bc, B_fd, atol=1e-6)
    # discrete model equals the exponential of the finite-difference Jacobian
    np.testing.assert_allclose(MODEL.A, expm(A_fd * const.dt), atol=1e-6)


def test_zoh_input_matrix_by_quadrature():
    Ac, Bc = cartpole_continuous()
    dt = 0.05
    s = np.linspace(0, dt, 2001)
    vals = np.array([expm(Ac * t) @ Bc for t in s])
    B_quad = np.trapezoid(vals, s, axis=0)
    np.testing.assert_allclose(MODEL.B, B_quad, atol=1e-9)


def test_small_dt_limit():
    Ac, Bc = cartpole_continuous()
    m = discretize(Ac, Bc, 1e-8)
    np.testing.assert_allclose(m.A, np.eye(4), atol=1e-6)
    np.testing.assert_allclose(m.B, 0.0, atol=1e-6)


def test_constants_validated():
    with pytest.raises(ValueError):
        CartPoleConstants(l=0.0)


def test_ocp_config_validated():
    with pytest.raises(ValueError):
        OcpConfig(N=0)
    with pytest.raises(ValueError):
        OcpConfig(u_min=(1.0,), u_max=(0.0,))


# OCP ------------------------------------------------------------------------------


def finite_horizon_lqr(A, B, Q, R, P_N, N):
    P = P_N
    gains = []
    for _ in range(N):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        gains.append(K)
    return gains[::-1], P


def test_scalar_toy_matches_lqr():
    model = LinearModel(np.array([[1.0]]), np.array([[1.0]]), 1.0)
    cfg = OcpConfig(N=2, u_min=(-1e6,), u_max=(1e6,), x_min=(-np.inf,), x_max=(np.inf,),
                    terminal="quadratic", max_iters=2000, step_tol=1e-14)
    params = CostParams(np.array([1.0]), np.array([0.5]))
    x0 = np.array([2.0])
    sol = solve_ocp(x0, params, model, cfg)
    K, P0 = finite_horizon_lqr(model.A, model.B, np.eye(1), 0.5 * np.eye(1), np.eye(1), 2)
    x, U = x0.copy(), []
    for k in range(2):
        U.append(float(-(K[k] @ x)[0]))
        x = model.A @ x + model.B[:, 0] * U[-1]
    np.testing.assert_allclose(sol.inputs[:, 0], U, atol=1e-6)
    assert sol.objective == pytest.approx(float(x0 @ P0 @ x0), abs=1e-6)


def test_cartpole_unconstrained_matches_lqr():
    cfg = OcpConfig(terminal="quadratic", max_iters=5000, step_tol=1e-13, **UNBOXED)
    params = hand_tuned()
    x0 = np.array([0.05, 0.0, 0.02, 0.0])
    sol = solve_ocp(x0, params, MODEL, cfg)
    K, _ = finite_horizon_lqr(MODEL.A, MODEL.B, np.eye(4), 0.1 * np.eye(1), np.eye(4), cfg.N)
    assert sol.inputs[0, 0] == pytest.approx(float(-(K[0] @ x0)[0]), abs=1e-6)


def test_riccati_terminal_gives_lqr_first_input():
    cfg = OcpConfig(terminal="riccati", max_iters=5000, step_tol=1e-13, **UNBOXED)
    params = hand_tuned()
    x0 = np.array([0.05, 0.0, 0.02, 0.0])
    P = solve_discrete_are(MODEL.A, MODEL.B, np.eye(4), 0.1 * np.eye(1))
    K = np.linalg.solve(0.1 + MODEL.B.T @ P @ MODEL.B, MODEL.B.T @ P @ MODEL.A)
    sol = solve_ocp(x0, params, MODEL, cfg)
    assert sol.inputs[0, 0] == pytest.approx(float(-(K @ x0)[0]), abs=1e-6)


def test_target_start_is_optimal():
    params = hand_tuned()
    sol = solve_ocp(np.zeros(4), params, MODEL, OcpConfig())
    np.testing.assert_array_equal(sol.inputs, 0.0)
    assert sol.objective == 0.0


def test_objective_monotone_and_below_warm_start():
    layout = ParamLayout(4, 1, (5, 5))
    rng = np.random.default_rng(0)
    for _ in range(10):
        params = random_cost_params(layout, rng)
        params.q[:] = np.abs(params.q)
        params.r[:] = np.abs(params.r) + 1e-3
        ctrl = MpcController(params, MODEL, OcpConfig())
        x0 = np.array(X_INIT) * rng.uniform(0.5, 2.0)
        warm = rng.uniform(-10, 10, size=(10, 1))
        sol = ctrl.solve(x0, warm, record_history=True)
        assert np.all(np.diff(sol.history) <= 0)
        assert sol.objective <= ctrl.objective(x0, warm)
        assert np.all(np.abs(sol.inputs) <= 10.0)


def test_compiled_objective_matches_numpy_reference():
    layout = ParamLayout(4, 1, (5, 5))
    rng = np.random.default_rng(1)
    params = random_cost_params(layout, rng)
    ctrl = MpcController(params, MODEL, OcpConfig())
    for _ in range(5):
        x0 = rng.normal(size=4)
        U = rng.normal(size=10) * 3
        f_ref, g_ref = ctrl.objective_and_grad(x0, U)
        g = np.empty(10)
        f = objective_grad(x0, U, ctrl.Phi, ctrl.Gamma, ctrl.x_d, ctrl.u_d, ctrl.q, ctrl.P_term, ctrl.r,
                           ctrl._wflat, ctrl._sizes, ctrl.y_d, ctrl.x_min, ctrl.x_max,
                           1e3, True, g, True)
        assert f == pytest.approx(f_ref, rel=1e-12)
        np.testing.assert_allclose(g, g_ref.ravel(), rtol=1e-10, atol=1e-10)


def test_objective_gradient_matches_finite_differences():
    layout = ParamLayout(4, 1, (5, 5))
    rng = np.random.default_rng(2)
    ctrl = MpcController(random_cost_params(layout, rng), MODEL, OcpConfig())
    x0 = np.array([1.9, 0.0, 0.55, 0.0])  # near the state box so penalties are active
    U = rng.normal(size=10)
    _, g = ctrl.objective_and_grad(x0, U)
    fd = fd_jacobian(lambda u: np.array([ctrl.objective(x0, u)]), U)[0]
    np.testing.assert_allclose(g.ravel(), fd, rtol=1e-6, atol=1e-6)


def test_argmin_invariant_to_joint_scaling():
    cfg = OcpConfig(terminal="quadratic", max_iters=3000, step_tol=1e-13, **UNBOXED)
    x0 = np.array([0.1, 0.0, 0.05, 0.0])
    q, r = np.array([1.0, 0.5, 2.0, 0.1]), np.array([0.2])
    a = solve_ocp(x0, CostParams(q, r), MODEL, cfg).inputs
    b = solve_ocp(x0, CostParams(7.0 * q, 7.0 * r), MODEL, cfg).inputs
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_nonfinite_objective_flags_failure():
    params = CostParams(np.array([np.nan, 1.0, 1.0, 1.0]), np.array([0.1]))
    sol = solve_ocp(np.array(X_INIT), params, MODEL, OcpConfig())
    assert sol.failed


# closed loop ----------------------------------------------------------------------


def test_closed_loop_cost_examples():
    M = 80
    states = np.zeros((M + 1, 4))
    inputs = np.zeros((M, 1))
    assert closed_loop_cost(states, inputs) == 0.0
    s = states.copy()
    s[0, 0] = 1.0
    assert closed_loop_cost(s, inputs) == 1.0
    s = states.copy()
    s[75, 0] = 1.0
    assert closed_loop_cost(s, inputs) == 101.0


def test_closed_loop_cost_three_step_hand_sum():
    states = np.array([[1.0, 2.0, 0.5, -1.0],
                       [0.5, -1.0, 0.25, 2.0],
                       [0.0, 0.5, -0.5, 1.0],
                       [0.25, 0.0, 0.0, -0.5]])
    inputs = np.array([[2.0], [-1.0], [0.5]])
    # Q = diag(1, .1, .1, .1), R = 1, no tail terms before step 70
    hand = (1.0 + 0.1 * 4 + 0.1 * 0.25 + 0.1 * 1 + 4.0
            + 0.25 + 0.1 * 1 + 0.1 * 0.0625 + 0.1 * 4 + 1.0
            + 0.0 + 0.1 * 0.25 + 0.1 * 0.25 + 0.1 * 1 + 0.25
            + 0.0625 + 0.0 + 0.0 + 0.1 * 0.25)
    assert closed_loop_cost(states, inputs) == pytest.approx(hand, rel=1e-15)
    # tail moved to the start: P = diag(100, 10, 10, 10) is added on every step
    w = EvalWeights(tail_start=0)
    tail = sum(100 * x[0] ** 2 + 10 * (x[1] ** 2 + x[2] ** 2 + x[3] ** 2) for x in states)
    assert closed_loop_cost(states, inputs, w) == pytest.approx(hand + tail, rel=1e-15)


def test_stage_costs_length_check():
    with pytest.raises(ValueError):
        closed_loop_stage_costs(np.zeros((4, 4)), np.zeros((1, 1)))


def test_rollout_from_target_stays():
    # holds for a zero network; a nonzero network has a nonzero gradient at x_d
    layout = ParamLayout(4, 1, (5, 5))
    theta = np.zeros(layout.n_theta)
    theta[:5] = np.random.default_rng(3).uniform(-3, 3, 5)
    res = rollout(theta, layout, MODEL, OcpConfig(), x_init=np.zeros(4))
    np.testing.assert_array_equal(res.states, 0.0)
    assert res.cost == 0.0


def test_rollout_deterministic_and_box_respected():
    layout = ParamLayout(4, 1, (5, 5))
    theta = np.random.default_rng(4).uniform(-1, 1, layout.n_theta)
    a = rollout(theta, layout, MODEL, OcpConfig())
    b = rollout(theta, layout, MODEL, OcpConfig())
    assert np.array_equal(a.states, b.states) and a.cost == b.cost
    assert np.all(np.abs(a.inputs) <= 10.0)
    np.testing.assert_array_equal(a.states[0], X_INIT)
    assert a.states.shape == (81, 4) and a.inputs.shape == (80, 1)


def test_failed_rollout_gets_cap():
    params = CostParams(np.array([np.nan, 1.0, 1.0, 1.0]), np.array([0.1]))
    res = rollout_params(params, MODEL, OcpConfig())
    assert res.failed and res.cost == FAILURE_COST


def test_hand_tuned_stabilizes_with_riccati_terminal():
    res = rollout_params(hand_tuned(), MODEL, OcpConfig(terminal="riccati"))
    assert abs(res.states[-1, 0]) < 0.05 and abs(res.states[-1, 2]) < 0.05


def test_hand_tuned_matches_independent_lqr_loop():
    # the input box is inactive here, so MPC with the Riccati terminal is the LQR law
    P = solve_discrete_are(MODEL.A, MODEL.B, np.eye(4), 0.1 * np.eye(1))
    K = np.linalg.solve(0.1 + MODEL.B.T @ P @ MODEL.B, MODEL.B.T @ P @ MODEL.A)
    x = np.array(X_INIT)
    xs = [x]
    for _ in range(80):
        x = MODEL.A @ x - MODEL.B @ (K @ x)
        xs.append(x)
    lqr = np.array(xs)
    assert np.max(np.abs(lqr[:-1] @ K.T)) < 10.0
    res = rollout_params(hand_tuned(), MODEL, OcpConfig(terminal="riccati", max_iters=2000, step_tol=1e-12))
    np.testing.assert_allclose(res.states, lqr, atol=1e-4)


def test_g_recomputed_from_stored_trajectory(tmp_path):
    res = rollout_params(hand_tuned(), MODEL, OcpConfig(terminal="riccati"))
    p = tmp_path / "traj.csv"
    write_trajectory_csv(p, res)
    states, inputs, costs = read_trajectory_csv(p)
    assert closed_loop_cost(states, inputs) == res.cost
    np.testing.assert_array_equal(costs, res.per_step_costs)
    assert len(states) == 81 and len(inputs) == 80
