import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import log_softmax

from trakaudit.errors import EmptyDatasetError, SolverError, UnderdeterminedError
from trakaudit.models import Dataset, ModelSpec, predict_batch
from trakaudit.solver import (
    SolverOptions,
    build_linearized,
    erm_stationarity_residual,
    fit_erm,
    fit_linearized,
    fit_loo,
    stationarity_residual,
)


def logistic_data(n, p, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ rng.standard_normal(p) * 0.5))).astype(float)
    return Dataset(X, y)


def multiclass_data(n, p, K, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    W = rng.standard_normal((K, p)) * 0.5
    Z = X @ W.T
    P = np.exp(Z - Z.max(1, keepdims=True))
    P /= P.sum(1, keepdims=True)
    y = np.array([rng.choice(K, p=pr) for pr in P]) + 1
    return Dataset(X, y)


def test_least_squares_normal_equations():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 4))
    y = rng.standard_normal(50)
    fit = fit_erm(ModelSpec.linear_squared(4), Dataset(X, y))
    assert fit.converged
    np.testing.assert_allclose(fit.beta, np.linalg.solve(X.T @ X, X.T @ y), atol=1e-8)


def test_separable_logistic_does_not_converge():
    data = Dataset([[1.0], [-1.0]], [1.0, 0.0])
    fit = fit_erm(ModelSpec.linear_logistic(1), data)
    assert not fit.converged or np.linalg.norm(fit.beta) > 1e6


def test_multiclass_solver_against_independent_optimizer():
    spec = ModelSpec.multiclass(5, 3)
    data = multiclass_data(200, 5, 3, 1)
    fit = fit_erm(spec, data)
    assert fit.converged and fit.iterations <= 50
    assert fit.grad_norm <= 1e-8 * 200

    X, yi = data.X, data.y.astype(int) - 1

    def ce(b):
        Z = np.c_[X @ b.reshape(2, 5).T, np.zeros(200)]
        L = log_softmax(Z, axis=1)
        P = np.exp(L)
        R = P.copy()
        R[np.arange(200), yi] -= 1
        return -L[np.arange(200), yi].sum(), (R[:, :2].T @ X).ravel()

    ref = minimize(ce, np.zeros(10), jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 10000})
    assert fit.objective == pytest.approx(ref.fun, rel=1e-10)
    np.testing.assert_allclose(fit.beta, ref.x, atol=1e-6)


def test_objective_matches_recomputed_loss():
    spec = ModelSpec.linear_poisson(3)
    rng = np.random.default_rng(2)
    X = rng.standard_normal((80, 3))
    y = rng.poisson(np.log1p(np.exp(X @ [0.5, -0.2, 0.3]))).astype(float)
    fit = fit_erm(spec, Dataset(X, y))
    from trakaudit.models import loss_derivatives

    recomputed = loss_derivatives("poisson", y, X @ fit.beta).value.sum()
    assert fit.objective == pytest.approx(recomputed, rel=1e-10)


def test_loo_least_squares_rank_one_downdate():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((30, 3))
    y = rng.standard_normal(30)
    spec = ModelSpec.linear_squared(3)
    data = Dataset(X, y)
    fit = fit_erm(spec, data)
    A = np.linalg.inv(X.T @ X)
    for i in (0, 11, 29):
        r = y[i] - X[i] @ fit.beta
        h = X[i] @ A @ X[i]
        closed = fit.beta - A @ X[i] * r / (1 - h)
        np.testing.assert_allclose(fit_loo(spec, data, i, fit.beta).beta, closed, atol=1e-8)


def test_loo_two_points():
    data = Dataset([[2.0], [4.0]], [3.0, 1.0])
    spec = ModelSpec.linear_squared(1)
    assert fit_loo(spec, data, 0, [0.0]).beta[0] == pytest.approx(1.0 / 4.0)
    assert fit_loo(spec, data, 1, [0.0]).beta[0] == pytest.approx(3.0 / 2.0)


def test_loo_zero_gradient_row_keeps_solution():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((20, 2))
    y = rng.standard_normal(20)
    spec = ModelSpec.linear_squared(2)
    fit = fit_erm(spec, Dataset(X, y))
    X = np.vstack([X, [1.0, -1.0]])
    y = np.r_[y, X[-1] @ fit.beta]  # zero residual, zero loss gradient
    data = Dataset(X, y)
    fit = fit_erm(spec, data)
    np.testing.assert_allclose(fit_loo(spec, data, 20, fit.beta).beta, fit.beta, atol=1e-10)


def test_warm_start_equivalence():
    spec = ModelSpec.linear_logistic(4)
    data = logistic_data(120, 4, 5)
    fit = fit_erm(spec, data)
    a = fit_loo(spec, data, 7, fit.beta).beta
    b = fit_loo(spec, data, 7, np.zeros(4)).beta
    assert np.linalg.norm(a - b) <= 1e-6


def test_stationarity_of_converged_fits():
    for spec, data in [
        (ModelSpec.linear_logistic(4), logistic_data(150, 4, 6)),
        (ModelSpec.multiclass(3, 4), multiclass_data(150, 3, 4, 7)),
    ]:
        fit = fit_erm(spec, data)
        assert fit.converged
        assert erm_stationarity_residual(spec, data, fit.beta) <= fit.tol_grad
        loo = fit_loo(spec, data, 3, fit.beta)
        assert erm_stationarity_residual(spec, data, loo.beta, exclude=3) <= loo.tol_grad


def test_linearized_problem_anchor_identities():
    spec = ModelSpec.multiclass(3, 3)
    data = multiclass_data(100, 3, 3, 8)
    fit = fit_erm(spec, data)
    prob = build_linearized(spec, data, fit)
    np.testing.assert_allclose(prob.predictions(fit.beta), predict_batch(spec, data.X, fit.beta, data.y), atol=1e-10)
    brb = fit_linearized(prob)
    assert brb.converged
    assert stationarity_residual(prob, brb.beta) <= 1e-8 * 100
    np.testing.assert_allclose(brb.beta, fit.beta, atol=1e-8)


def test_linear_kinds_fixed_point():
    spec = ModelSpec.linear_logistic(3)
    data = logistic_data(90, 3, 9)
    fit = fit_erm(spec, data)
    prob = build_linearized(spec, data, fit)
    np.testing.assert_array_equal(prob.offsets, 0.0)
    np.testing.assert_array_equal(prob.G, data.X)
    np.testing.assert_allclose(fit_linearized(prob).beta, fit.beta, atol=1e-10)


def test_build_linearized_requires_converged_anchor():
    spec = ModelSpec.linear_logistic(1)
    data = Dataset([[1.0], [-1.0]], [1.0, 0.0])
    fit = fit_erm(spec, data, opts=SolverOptions(max_iter=3))
    assert not fit.converged
    with pytest.raises(SolverError):
        build_linearized(spec, data, fit)


def test_linearized_error_paths():
    spec = ModelSpec.linear_squared(1)
    data = Dataset([[1.0]], [2.0])
    fit = fit_erm(spec, data)
    prob = build_linearized(spec, data, fit)
    with pytest.raises(EmptyDatasetError, match="empty objective"):
        fit_linearized(prob, exclude=0)
    spec = ModelSpec.linear_squared(3)
    data = Dataset(np.eye(3)[:2], [1.0, 2.0])
    prob = build_linearized(spec, data, type(fit)(np.zeros(3), 0, 0.0, True, 0.0))
    with pytest.raises(UnderdeterminedError, match="underdetermined"):
        fit_linearized(prob)


def test_non_finite_initial_objective():
    spec = ModelSpec.linear_logistic(1)
    with pytest.raises((SolverError, ValueError)):
        fit_erm(spec, Dataset([[1.0]], [1.0]), init=[np.inf])


def test_options_from_mapping():
    o = SolverOptions.from_mapping({"tol_grad": "1e-6", "max_iter": "7", "ridge": "", "divergence_guard": "10"})
    assert (o.tol_grad, o.max_iter, o.ridge, o.divergence_guard) == (1e-6, 7, 0.0, 10.0)
    assert SolverOptions().tol_for(500) == pytest.approx(5e-6)


def test_ridge_option():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((10, 3))
    y = rng.standard_normal(10)
    fit = fit_erm(ModelSpec.linear_squared(3), Dataset(X, y), opts=SolverOptions(ridge=2.0))
    np.testing.assert_allclose(fit.beta, np.linalg.solve(X.T @ X + 2 * np.eye(3), X.T @ y), atol=1e-8)


def test_hidden_layer_fit_is_stationary():
    rng = np.random.default_rng(11)
    spec = ModelSpec.one_hidden(3, 2)
    X = rng.standard_normal((80, 3))
    y = np.tanh(X @ [1.0, -0.5, 0.2]) + 0.1 * rng.standard_normal(80)
    fit = fit_erm(spec, Dataset(X, y), init=0.3 * rng.standard_normal(spec.d))
    assert fit.converged
    assert erm_stationarity_residual(spec, Dataset(X, y), fit.beta) <= fit.tol_grad
