import math

import numpy as np
import pytest

from nnmpc_bo import kernels as K
from nnmpc_bo.errors import ContractViolation
from nnmpc_bo.kernels import CovTriple, KernelSpec

MAT = KernelSpec("matern52", signal_variance=1.0, lengthscale=1.0)


def mc_relu_expectation(rho, n=10**6, seed=0):
    """Monte-Carlo estimate of E[relu(z1) relu(z2)] for unit variances and correlation rho."""
    rng = np.random.default_rng(seed)
    z1 = rng.standard_normal(n)
    z2 = rho * z1 + math.sqrt(max(0.0, 1.0 - rho * rho)) * rng.standard_normal(n)
    prod = np.maximum(z1, 0.0) * np.maximum(z2, 0.0)
    return prod.mean(), prod.std(ddof=1) / math.sqrt(n)


def test_matern_identical_points_returns_signal_variance():
    spec = KernelSpec("matern52", signal_variance=2.0, lengthscale=0.7)
    x = np.array([0.3, -1.2, 5.0])
    assert K.matern52(x, x, spec) == 2.0


def test_matern_unit_distance():
    # (1 + sqrt5 + 5/3) exp(-sqrt5), evaluated independently
    expected = (1.0 + math.sqrt(5.0) + 5.0 / 3.0) * math.exp(-math.sqrt(5.0))
    assert expected == pytest.approx(0.523994, abs=1e-6)
    assert K.matern52([0.0, 0.0], [1.0, 0.0], MAT) == pytest.approx(expected, rel=1e-14)


def test_matern_long_lengthscale_is_constant():
    spec = KernelSpec("matern52", signal_variance=1.0, lengthscale=1e6)
    assert K.matern52([0.0], [1.0], spec) == pytest.approx(1.0, abs=1e-6)


def test_matern_dimension_mismatch():
    with pytest.raises(ContractViolation):
        K.matern52([0.0, 1.0], [1.0], MAT)


def test_matern_monotone_in_radius():
    radii = np.sort(np.random.default_rng(1).uniform(0, 10, 200))
    vals = [K.matern52([0.0], [r], MAT) for r in radii]
    assert np.all(np.diff(vals) <= 0)


def test_input_layer_examples():
    spec = KernelSpec("ibnn", bias_var=0.5, weight_var=1.0)
    assert K.ibnn_input_layer([0.0, 0.0], [0.0, 0.0], spec).k_xy == 0.5
    spec = KernelSpec("ibnn", bias_var=0.0, weight_var=1.0)
    assert K.ibnn_input_layer([1.0, 1.0], [1.0, 1.0], spec).k_xy == pytest.approx(1.0)
    spec = KernelSpec("ibnn", bias_var=1.0, weight_var=2.0)
    cov = K.ibnn_input_layer([1, 0, 0, 0], [0, 1, 0, 0], spec)
    assert cov == pytest.approx((1.5, 1.0, 1.5))


def test_layer_step_perfect_correlation():
    for k, b, w in [(1.0, 0.0, 1.0), (2.5, 0.3, 1.7), (0.01, 1.0, 4.0)]:
        out = K.ibnn_layer_step(CovTriple(k, k, k), KernelSpec("ibnn", bias_var=b, weight_var=w))
        assert out.k_xy == pytest.approx(b + w * k / 2, rel=1e-12)
        assert out.k_xx == out.k_yy
        rho = out.k_xy / math.sqrt(out.k_xx * out.k_yy)
        assert abs(rho - 1.0) < 1e-12


def test_layer_step_rho_one_matches_monte_carlo():
    est, se = mc_relu_expectation(1.0)
    assert abs(est - 0.5) < 3 * se


def test_layer_step_uncorrelated():
    spec = KernelSpec("ibnn", bias_var=0.2, weight_var=3.0)
    out = K.ibnn_layer_step(CovTriple(1.0, 0.0, 1.0), spec)
    assert out.k_xy == pytest.approx(0.2 + 3.0 / (2 * math.pi), rel=1e-14)
    est, se = mc_relu_expectation(0.0, seed=3)
    assert abs(est - 1 / (2 * math.pi)) < 3 * se


def test_layer_step_anticorrelated():
    spec = KernelSpec("ibnn", bias_var=0.4, weight_var=3.0)
    out = K.ibnn_layer_step(CovTriple(1.0, -1.0, 1.0), spec)
    assert out.k_xy == pytest.approx(0.4, abs=1e-15)


@pytest.mark.parametrize("rho", [-0.9, -0.5, 0.0, 0.5, 0.9])
def test_closed_form_against_monte_carlo(rho):
    closed = float(K.relu_expectation(1.0, rho, 1.0))
    est, se = mc_relu_expectation(rho, seed=int(10 * (rho + 1)))
    assert abs(closed - est) < 3 * se


def test_closed_form_scales_with_variances():
    # E[relu(a z1) relu(b z2)] = a b E[relu(z1) relu(z2)]
    a, b, rho = 1.7, 0.4, 0.3
    assert K.relu_expectation(a * a, rho * a * b, b * b) == pytest.approx(
        a * b * K.relu_expectation(1.0, rho, 1.0), rel=1e-13)


def test_degenerate_variance_gives_zero_expectation():
    spec = KernelSpec("ibnn", bias_var=0.0, weight_var=1.0)
    assert K.ibnn_layer_step(CovTriple(0.0, 0.0, 1.0), spec).k_xy == 0.0
    assert K.ibnn_kernel([0.0, 0.0], [1.0, 2.0], spec) == 0.0


def test_depth_zero_rejected():
    with pytest.raises(ContractViolation):
        KernelSpec("ibnn", depth=0)


def test_negative_bias_rejected():
    with pytest.raises(ContractViolation):
        KernelSpec("ibnn", bias_var=-0.1)


def test_depth_one_hand_recursion():
    spec = KernelSpec("ibnn", depth=1, bias_var=0.0, weight_var=2.0)
    assert K.ibnn_kernel([1.0], [1.0], spec) == pytest.approx(2.0, rel=1e-14)


def test_cauchy_schwarz_violation_rejected():
    with pytest.raises(ContractViolation):
        K.ibnn_layer_step(CovTriple(1.0, 2.0, 1.0), KernelSpec("ibnn"))


@pytest.mark.parametrize("dim", [66, 546, 1116])
@pytest.mark.parametrize("spec", [KernelSpec("matern52", 1.3, 4.0), KernelSpec("ibnn", depth=3, weight_var=1.5, bias_var=0.2)])
def test_symmetry(dim, spec):
    rng = np.random.default_rng(dim)
    for _ in range(100):
        a, b = rng.uniform(size=dim), rng.uniform(size=dim)
        assert abs(K.kernel(a, b, spec) - K.kernel(b, a, spec)) <= 1e-12


@pytest.mark.parametrize("dim", [66, 546, 1116])
@pytest.mark.parametrize("spec", [KernelSpec("matern52", 1.0, 3.0), KernelSpec("ibnn", depth=3, weight_var=2.0, bias_var=0.1)])
def test_gram_psd(dim, spec):
    X = np.random.default_rng(dim + 1).uniform(size=(50, dim))
    G = K.gram(X, spec=spec)
    eig = np.linalg.eigvalsh(G)
    assert eig.min() >= -1e-8 * eig.max()


@pytest.mark.parametrize("spec", [KernelSpec("matern52", 0.8, 1.5), KernelSpec("ibnn", depth=2, weight_var=1.2, bias_var=0.3)])
def test_gram_matches_scalar_kernel(spec):
    rng = np.random.default_rng(7)
    X, Y = rng.uniform(size=(6, 5)), rng.uniform(size=(4, 5))
    G = K.gram(X, Y, spec)
    for i in range(6):
        for j in range(4):
            assert G[i, j] == pytest.approx(K.kernel(X[i], Y[j], spec), rel=1e-12)
    np.testing.assert_allclose(K.kernel_diag(X, spec), np.diag(K.gram(X, spec=spec)), rtol=1e-12)


def test_self_gram_is_exactly_symmetric():
    X = np.random.default_rng(0).uniform(size=(30, 66))
    for spec in (KernelSpec("matern52"), KernelSpec("ibnn")):
        G = K.gram(X, spec=spec)
        assert np.array_equal(G, G.T)
