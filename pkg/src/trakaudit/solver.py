"""Damped Newton fits for the full, leave-one-out and linearized problems."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from .errors import EmptyDatasetError, SolverError, UnderdeterminedError
from .models import (
    Dataset,
    Kind,
    ModelSpec,
    gradient_rows,
    loss_derivatives,
    multiclass_logits,
    predict_batch,
    softmax_with_reference,
)

logger = logging.getLogger(__name__)

DAMPING_LADDER = (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2)
ARMIJO = 1e-4
BACKTRACK = 0.5
MAX_HALVINGS = 50
# relative Newton-step size below which a point with small gradient is final
STEP_TOL = 1e-4


@dataclass
class SolverOptions:
    tol_grad: Optional[float] = None
    max_iter: int = 100
    ridge: float = 0.0
    divergence_guard: float = 1e6

    def tol_for(self, n: int) -> float:
        if self.tol_grad is not None:
            return float(self.tol_grad)
        return 1e-8 * max(1, n)

    @classmethod
    def from_mapping(cls, cfg: dict) -> "SolverOptions":
        kw = {}
        for key in ("tol_grad", "ridge", "divergence_guard"):
            if cfg.get(key) not in (None, ""):
                kw[key] = float(cfg[key])
        if cfg.get("max_iter") not in (None, ""):
            kw["max_iter"] = int(cfg["max_iter"])
        return cls(**kw)


@dataclass
class FitResult:
    beta: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool
    objective: float
    tol_grad: float = np.nan
    message: str = ""


@dataclass
class LinearizedProblem:
    """GLM in the gradient features: predictions ``G @ beta + offsets``."""

    G: np.ndarray
    offsets: np.ndarray
    y: np.ndarray
    loss: str
    anchor: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.G.shape[0]

    @property
    def d(self) -> int:
        return self.G.shape[1]

    def predictions(self, beta) -> np.ndarray:
        return self.G @ beta + self.offsets


Objective = Callable[[np.ndarray, int], tuple]


def _weights(n: int, exclude: Optional[int]) -> np.ndarray:
    w = np.ones(n)
    if exclude is not None:
        if not 0 <= exclude < n:
            raise IndexError(f"train index {exclude} out of range for n={n}")
        w[exclude] = 0.0
    return w


def glm_objective(G, offsets, y, loss, w, ridge=0.0) -> Objective:
    """Weighted sum of ``loss(y_j, g_j @ beta + b_j)``, optionally ridged."""

    def fun(beta, order=2):
        z = G @ beta + offsets
        ld = loss_derivatives(loss, y, z)
        value = float(w @ ld.value) + 0.5 * ridge * float(beta @ beta)
        if order == 0:
            return value, None, None
        grad = G.T @ (w * ld.first) + ridge * beta
        if order == 1:
            return value, grad, None
        hess = G.T @ ((w * ld.second)[:, None] * G)
        if ridge:
            hess[np.diag_indices_from(hess)] += ridge
        return value, grad, hess

    return fun


def _multiclass_objective(spec: ModelSpec, X, y, w, ridge) -> Objective:
    # cross-entropy written on the logits: identical to the summed margin
    # loss, but its Hessian needs no second derivatives of the margin.
    K1, p = spec.K - 1, spec.p
    yi = y.astype(int) - 1
    rows = np.arange(X.shape[0])
    onehot = np.zeros((X.shape[0], K1))
    own = yi < K1
    onehot[rows[own], yi[own]] = 1.0

    def fun(beta, order=2):
        Z = multiclass_logits(spec, X, beta)
        lse = logsumexp(Z, axis=1)
        value = float(w @ (lse - Z[rows, yi])) + 0.5 * ridge * float(beta @ beta)
        if order == 0:
            return value, None, None
        P = softmax_with_reference(Z)[:, :K1]
        grad = ((P - onehot) * w[:, None]).T @ X
        grad = grad.ravel() + ridge * beta
        if order == 1:
            return value, grad, None
        hess = np.empty((K1 * p, K1 * p))
        for a in range(K1):
            for b in range(a, K1):
                c = -P[:, a] * P[:, b]
                if a == b:
                    c = c + P[:, a]
                blk = X.T @ ((w * c)[:, None] * X)
                hess[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
                if a != b:
                    hess[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
        if ridge:
            hess[np.diag_indices_from(hess)] += ridge
        return value, grad, hess

    return fun


def _hidden_objective(spec: ModelSpec, X, y, w, ridge) -> Objective:
    h, p = spec.hidden, spec.p
    act = spec.act

    def fun(beta, order=2):
        f = predict_batch(spec, X, beta)
        ld = loss_derivatives(spec.loss, y, f)
        value = float(w @ ld.value) + 0.5 * ridge * float(beta @ beta)
        if order == 0:
            return value, None, None
        G = gradient_rows(spec, X, beta)
        grad = G.T @ (w * ld.first) + ridge * beta
        if order == 1:
            return value, grad, None
        hess = G.T @ ((w * ld.second)[:, None] * G)
        W = beta[: h * p].reshape(h, p)
        v = beta[h * p:]
        A = X @ W.T
        c = w * ld.first
        d1, d2 = act.d1(A), act.d2(A)
        for l in range(h):
            sl = slice(l * p, (l + 1) * p)
            hess[sl, sl] += X.T @ ((c * v[l] * d2[:, l])[:, None] * X)
            cross = X.T @ (c * d1[:, l])
            hess[sl, h * p + l] += cross
            hess[h * p + l, sl] += cross
        if ridge:
            hess[np.diag_indices_from(hess)] += ridge
        return value, grad, hess

    return fun


def erm_objective(spec: ModelSpec, data: Dataset, weights=None, ridge: float = 0.0) -> Objective:
    """Objective ``sum_i w_i loss(y_i, f(x_i, beta))`` with value, gradient, Hessian."""
    w = np.ones(data.n) if weights is None else np.asarray(weights, dtype=float)
    if spec.is_linear:
        return glm_objective(data.X, np.zeros(data.n), data.y, spec.loss, w, ridge)
    if spec.kind is Kind.MULTICLASS:
        return _multiclass_objective(spec, data.X, data.y, w, ridge)
    return _hidden_objective(spec, data.X, data.y, w, ridge)


def newton(fun: Objective, beta0, n_active: int, opts: Optional[SolverOptions] = None) -> FitResult:
    """Newton's method with Levenberg damping and Armijo backtracking."""
    opts = opts or SolverOptions()
    tol = opts.tol_for(n_active)
    beta = np.array(beta0, dtype=float)
    val, g, H = fun(beta, 2)
    if not np.isfinite(val):
        raise SolverError("objective is not finite at the initial point")
    eye = np.eye(beta.shape[0])

    for it in range(opts.max_iter + 1):
        gn = float(np.linalg.norm(g))
        if gn == 0.0:
            return FitResult(beta, it, gn, True, val, tol)
        direction, lam = None, None
        for lam in DAMPING_LADDER:
            try:
                factor = cho_factor(H + lam * eye if lam else H, check_finite=False)
            except LinAlgError:
                continue
            direction = -cho_solve(factor, g, check_finite=False)
            if np.all(np.isfinite(direction)) and g @ direction < 0:
                break
            direction = None
        if direction is None:
            raise SolverError("Hessian singular even after maximal damping")
        if gn <= tol and np.linalg.norm(direction) <= STEP_TOL * (1.0 + np.linalg.norm(beta)):
            return FitResult(beta, it, gn, True, val, tol)
        if it == opts.max_iter:
            break

        accepted = False
        for lam_try in [lam] + [l for l in DAMPING_LADDER if l > lam]:
            if lam_try != lam:
                try:
                    factor = cho_factor(H + lam_try * eye, check_finite=False)
                except LinAlgError:
                    continue
                direction = -cho_solve(factor, g, check_finite=False)
            slope = float(g @ direction)
            t = 1.0
            for _ in range(MAX_HALVINGS):
                trial = beta + t * direction
                v2, _, _ = fun(trial, 0)
                if np.isfinite(v2):
                    if v2 <= val + ARMIJO * t * slope:
                        accepted = True
                    elif v2 - val <= 16 * np.finfo(float).eps * max(1.0, abs(val)):
                        # objective flat to rounding: accept if the gradient shrinks
                        _, g2, _ = fun(trial, 1)
                        accepted = np.linalg.norm(g2) < gn
                if accepted:
                    break
                t *= BACKTRACK
            if accepted:
                break
        if not accepted:
            logger.debug("line search failed at iteration %d", it)
            return FitResult(beta, it, gn, False, val, tol, "line search failed")

        beta = trial
        val, g, H = fun(beta, 2)
        if np.linalg.norm(beta) > opts.divergence_guard:
            return FitResult(beta, it + 1, float(np.linalg.norm(g)), False, val, tol,
                             "divergence guard")

    return FitResult(beta, opts.max_iter, float(np.linalg.norm(g)), False, val, tol,
                     "maximum iterations reached")


def fit_erm(spec: ModelSpec, data: Dataset, init=None, opts: Optional[SolverOptions] = None) -> FitResult:
    """Empirical risk minimizer of the full model, started at ``init`` (zeros by default)."""
    opts = opts or SolverOptions()
    data.validate(spec)
    beta0 = np.zeros(spec.d) if init is None else np.asarray(init, dtype=float)
    if beta0.shape != (spec.d,):
        raise ValueError(f"init has shape {beta0.shape}, expected ({spec.d},)")
    return newton(erm_objective(spec, data, ridge=opts.ridge), beta0, data.n, opts)


def fit_loo(spec: ModelSpec, data: Dataset, i: int, warm, opts: Optional[SolverOptions] = None) -> FitResult:
    """Exact refit with training row ``i`` removed, warm-started at ``warm``."""
    opts = opts or SolverOptions()
    w = _weights(data.n, i)
    if data.n - 1 < 1:
        raise EmptyDatasetError("empty objective")
    fun = erm_objective(spec, data, weights=w, ridge=opts.ridge)
    return newton(fun, np.asarray(warm, dtype=float), data.n - 1, opts)


def build_linearized(spec: ModelSpec, data: Dataset, anchor: FitResult) -> LinearizedProblem:
    """First-order expansion of ``f`` around the fitted parameters."""
    if not anchor.converged:
        raise SolverError("anchor fit did not converge")
    beta = np.asarray(anchor.beta, dtype=float)
    labels = data.y if spec.kind is Kind.MULTICLASS else None
    G = gradient_rows(spec, data.X, beta, labels)
    if spec.is_linear:
        offsets = np.zeros(data.n)
    else:
        offsets = predict_batch(spec, data.X, beta, labels) - G @ beta
    return LinearizedProblem(G, offsets, data.y.copy(), spec.loss, beta.copy())


def fit_linearized(problem: LinearizedProblem, exclude: Optional[int] = None,
                   opts: Optional[SolverOptions] = None, init=None) -> FitResult:
    """Fit the linearized problem, optionally without row ``exclude``.

    Fresh fits start at zero; leave-one-out fits start at the anchor unless
    ``init`` is given.
    """
    opts = opts or SolverOptions()
    n_active = problem.n - (exclude is not None)
    if n_active < 1:
        raise EmptyDatasetError("empty objective")
    if problem.d > n_active and opts.ridge == 0:
        raise UnderdeterminedError(
            f"underdetermined linearized problem: d={problem.d} > n={n_active}"
        )
    w = _weights(problem.n, exclude)
    if init is None:
        init = np.zeros(problem.d) if exclude is None else problem.anchor
    fun = glm_objective(problem.G, problem.offsets, problem.y, problem.loss, w, opts.ridge)
    return newton(fun, np.asarray(init, dtype=float), n_active, opts)


def stationarity_residual(problem: LinearizedProblem, beta, exclude: Optional[int] = None) -> float:
    """Norm of ``sum_j ldot_j g_j`` for the linearized problem at ``beta``."""
    w = _weights(problem.n, exclude)
    ld = loss_derivatives(problem.loss, problem.y, problem.predictions(beta))
    return float(np.linalg.norm(problem.G.T @ (w * ld.first)))


def erm_stationarity_residual(spec: ModelSpec, data: Dataset, beta, exclude: Optional[int] = None) -> float:
    """Norm of ``sum_j ldot(y_j, f(x_j, beta)) grad f(x_j, beta)`` computed from the model layer."""
    w = _weights(data.n, exclude)
    labels = data.y if spec.kind is Kind.MULTICLASS else None
    f = predict_batch(spec, data.X, beta, labels)
    G = gradient_rows(spec, data.X, beta, labels)
    ld = loss_derivatives(spec.loss, data.y, f)
    return float(np.linalg.norm(G.T @ (w * ld.first)))
