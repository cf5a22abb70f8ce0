"""Exact leave-one-out influence and its TRAK-style approximations.

All estimators take a training index ``i`` and a test point and return the
change of the prediction at the test point caused by deleting row ``i``:

* ``True``     exact refit of the full model.
* ``Linear``   exact refit of the linearized model.
* ``ALO``      one-step closed form on the linearized model.
* ``TRAK``     ALO after a Gaussian projection of the gradient features,
  either the full form or the simplified form that drops the curvature
  weights and the leverage denominator.

Batch functions return ``(train, test)`` shaped arrays.  Factorizations of
the Gram systems are cached on the ``LinearizedProblem``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import BreakdownError, RefitError
from .models import Dataset, Kind, ModelSpec, gradient_rows, loss_derivatives, predict_batch
from .rng import stream
from .solver import FitResult, LinearizedProblem, SolverOptions, fit_linearized, fit_loo

DENOM_FLOOR = 1e-8

TAGS = ("True", "Linear", "ALO", "TRAK", "TRAKSimplified")


@dataclass(frozen=True)
class Estimator:
    tag: str
    k: Optional[int] = None

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown estimator {self.tag!r}")
        if self.tag.startswith("TRAK"):
            if self.k is None or self.k < 1:
                raise ValueError("TRAK estimators need a projection dimension k >= 1")
        elif self.k is not None:
            raise ValueError(f"{self.tag} takes no projection dimension")

    @property
    def label(self) -> str:
        return f"{self.tag}({self.k})" if self.k is not None else self.tag

    @classmethod
    def parse(cls, text: str) -> "Estimator":
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*(\d+)\s*\))?\s*", text)
        if not m:
            raise ValueError(f"cannot parse estimator {text!r}")
        return cls(m.group(1), None if m.group(2) is None else int(m.group(2)))

    def __str__(self):
        return self.label


@dataclass
class Projection:
    matrix: np.ndarray
    seed: int

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]


def make_projection(d: int, k: int, seed: int) -> Projection:
    """``d x k`` matrix of i.i.d. standard normals, reproducible from ``seed``."""
    if not 1 <= k <= d:
        raise ValueError(f"projection dimension k={k} must lie in [1, d={d}]")
    S = stream(seed, "projection", d, k).standard_normal((d, k))
    return Projection(S, seed)


def _digest(*arrays) -> str:
    h = hashlib.sha1()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _labels(spec: ModelSpec, y):
    return y if spec.kind is Kind.MULTICLASS else None


def point_gradients(spec: ModelSpec, fit: FitResult, X_new, y_new=None) -> np.ndarray:
    """Rows ``grad f(x_new, beta_hat)`` for the test points."""
    return gradient_rows(spec, X_new, fit.beta, _labels(spec, y_new))


# ---------------------------------------------------------------- exact LOO

def loo_refits(spec: ModelSpec, data: Dataset, fit: FitResult, train_idx: Iterable[int],
               opts: Optional[SolverOptions] = None, cache: Optional[dict] = None) -> Dict[int, FitResult]:
    """Exact refits without each row in ``train_idx``, warm-started at ``fit.beta``."""
    cache = {} if cache is None else cache
    for i in train_idx:
        i = int(i)
        if i not in cache:
            cache[i] = fit_loo(spec, data, i, fit.beta, opts)
    return cache


def true_influence_matrix(spec: ModelSpec, fit: FitResult, loo: Dict[int, FitResult],
                          train_idx: Sequence[int], X_new, y_new=None):
    """``f(x_new; beta_/i) - f(x_new; beta_hat)`` over the grid.

    Returns ``(values, failed)``; rows whose refit did not converge are NaN
    and flagged.
    """
    labels = _labels(spec, y_new)
    base = predict_batch(spec, X_new, fit.beta, labels)
    out = np.full((len(train_idx), base.shape[0]), np.nan)
    failed = np.zeros(out.shape, dtype=bool)
    for r, i in enumerate(train_idx):
        refit = loo[int(i)]
        if not refit.converged:
            failed[r] = True
            continue
        out[r] = predict_batch(spec, X_new, refit.beta, labels) - base
    return out, failed


def influence_true(spec: ModelSpec, data: Dataset, fit: FitResult, i: int, z_new,
                   opts: Optional[SolverOptions] = None, cache: Optional[dict] = None) -> float:
    """Exact leave-one-out influence of row ``i`` on ``z_new = (x, y)``."""
    if not fit.converged:
        raise RefitError("full fit did not converge")
    x_new, y_new = z_new
    loo = loo_refits(spec, data, fit, [i], opts, cache)
    if not loo[int(i)].converged:
        raise RefitError(f"LOO refit failed at index {i}: {loo[int(i)].message}")
    vals, _ = true_influence_matrix(spec, fit, loo, [i], np.atleast_2d(x_new),
                                    None if y_new is None else [y_new])
    return float(vals[0, 0])


# ----------------------------------------------------------- linearized LOO

def linear_refits(problem: LinearizedProblem, brb: FitResult, train_idx: Iterable[int],
                  opts: Optional[SolverOptions] = None, cache: Optional[dict] = None) -> Dict[int, FitResult]:
    cache = {} if cache is None else cache
    for i in train_idx:
        i = int(i)
        if i not in cache:
            cache[i] = fit_linearized(problem, exclude=i, opts=opts, init=brb.beta)
    return cache


def influence_linear(problem: LinearizedProblem, brb: FitResult, brb_loo: FitResult, g_new) -> float:
    """``g_new @ (beta_lin_/i - beta_lin)``."""
    return float(np.asarray(g_new) @ (brb_loo.beta - brb.beta))


def linear_influence_matrix(brb: FitResult, loo: Dict[int, FitResult],
                            train_idx: Sequence[int], G_new):
    G_new = np.atleast_2d(G_new)
    out = np.full((len(train_idx), G_new.shape[0]), np.nan)
    failed = np.zeros(out.shape, dtype=bool)
    for r, i in enumerate(train_idx):
        refit = loo[int(i)]
        if not refit.converged:
            failed[r] = True
            continue
        out[r] = G_new @ (refit.beta - brb.beta)
    return out, failed


# ---------------------------------------------------------------------- ALO

@dataclass
class _GramFactor:
    """Cholesky factor of a weighted Gram system plus the loss derivatives."""

    factor: tuple
    first: np.ndarray
    second: np.ndarray
    features: np.ndarray
    weighted: bool


def _derivs(problem: LinearizedProblem, brb: FitResult):
    return loss_derivatives(problem.loss, problem.y, problem.predictions(brb.beta))


def _factor(M: np.ndarray, what: str):
    try:
        return cho_factor(M, check_finite=False)
    except LinAlgError:
        raise BreakdownError(f"{what} is singular") from None


def alo_factor(problem: LinearizedProblem, brb: FitResult) -> _GramFactor:
    key = ("alo", _digest(brb.beta))
    if key not in problem._cache:
        ld = _derivs(problem, brb)
        G = problem.G
        H = G.T @ (ld.second[:, None] * G)
        problem._cache[key] = _GramFactor(_factor(H, "ALO Hessian"), ld.first, ld.second, G, True)
    return problem._cache[key]


def trak_factor(problem: LinearizedProblem, brb: FitResult, proj: Projection,
                simplified: bool = False) -> _GramFactor:
    key = ("trak", simplified, _digest(brb.beta, proj.matrix))
    if key not in problem._cache:
        if proj.d != problem.d:
            raise ValueError(f"projection has d={proj.d}, problem has d={problem.d}")
        ld = _derivs(problem, brb)
        Phi = problem.G @ proj.matrix
        if simplified:
            M = Phi.T @ Phi
        else:
            M = Phi.T @ (ld.second[:, None] * Phi)
        problem._cache[key] = _GramFactor(
            _factor(M, "projected Gram matrix"), ld.first, ld.second, Phi, not simplified
        )
    return problem._cache[key]


def _one_step(gf: _GramFactor, train_idx: Sequence[int], F_new: np.ndarray):
    idx = np.asarray(train_idx, dtype=int)
    Fi = gf.features[idx]
    A = cho_solve(gf.factor, Fi.T, check_finite=False)
    numer = gf.first[idx][:, None] * (F_new @ A).T
    if not gf.weighted:
        return numer, np.zeros(numer.shape, dtype=bool), np.ones(len(idx))
    denom = 1.0 - gf.second[idx] * np.einsum("ij,ji->i", Fi, A)
    broken = denom <= DENOM_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = numer / denom[:, None]
    vals[broken] = np.nan
    return vals, np.repeat(broken[:, None], F_new.shape[0], axis=1), denom


def alo_influence_matrix(problem: LinearizedProblem, brb: FitResult,
                         train_idx: Sequence[int], G_new):
    """ALO influence over the grid; returns ``(values, breakdown, denominators)``."""
    return _one_step(alo_factor(problem, brb), train_idx, np.atleast_2d(G_new))


def influence_alo(problem: LinearizedProblem, brb: FitResult, i: int, g_new) -> float:
    vals, broken, denom = alo_influence_matrix(problem, brb, [i], g_new)
    if broken[0, 0]:
        raise BreakdownError(f"ALO breakdown at index {i} (denominator {denom[0]:.3g})")
    return float(vals[0, 0])


def trak_influence_matrix(problem: LinearizedProblem, brb: FitResult, train_idx: Sequence[int],
                          G_new, proj: Projection, simplified: bool = False):
    gf = trak_factor(problem, brb, proj, simplified)
    return _one_step(gf, train_idx, np.atleast_2d(G_new) @ proj.matrix)


def influence_trak(problem: LinearizedProblem, brb: FitResult, i: int, g_new,
                   proj: Projection, simplified: bool = False) -> float:
    vals, broken, denom = trak_influence_matrix(problem, brb, [i], g_new, proj, simplified)
    if broken[0, 0]:
        raise BreakdownError(f"TRAK breakdown at index {i} (denominator {denom[0]:.3g})")
    return float(vals[0, 0])
