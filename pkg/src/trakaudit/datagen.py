"""Synthetic designs: Toeplitz Gaussian features, normalized true parameters, responses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, toeplitz
from scipy.special import expit

from .models import Dataset, Kind, ModelSpec, multiclass_logits, predict_batch, softmax_with_reference
from .rng import stream

PROTOCOLS = ("glm", "multiclass")


@dataclass(frozen=True)
class DesignConfig:
    """Generation parameters.

    ``protocol`` picks the covariance normalization: ``"glm"`` scales the
    covariance so that ``beta*' Sigma beta* = 1``; ``"multiclass"`` scales it
    so that the spectral norm of Sigma equals ``1 / ||beta*||``.  In both,
    ``||beta*||^2 = p``.
    """

    n: int
    p: int
    K: int = 2
    decay: float = 0.1
    seed: int = 0
    protocol: str = "glm"
    beta_norm_rule: str = "norm_sq_equals_p"

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {self.decay}")
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.beta_norm_rule != "norm_sq_equals_p":
            raise ValueError(f"unknown normalization rule {self.beta_norm_rule!r}")


def toeplitz_correlation(p: int, decay: float) -> np.ndarray:
    """``T[j, j'] = decay ** |j - j'|``."""
    return toeplitz(decay ** np.arange(p, dtype=float))


def covariance_scale(T: np.ndarray, beta_star: np.ndarray, protocol: str) -> float:
    """Scalar ``c`` so that ``Sigma = c T`` satisfies the protocol's rule.

    A stacked multiclass vector is read block-wise; under the ``"glm"`` rule
    the quadratic forms of its class rows are summed.
    """
    if protocol == "glm":
        B = np.asarray(beta_star, dtype=float).reshape(-1, T.shape[0])
        return 1.0 / float(np.einsum("kj,jl,kl->", B, T, B))
    if protocol == "multiclass":
        return 1.0 / (np.linalg.norm(beta_star) * np.linalg.eigvalsh(T)[-1])
    raise ValueError(f"unknown protocol {protocol!r}")


def toeplitz_design(cfg: DesignConfig, scale: float = 1.0, rows: Optional[int] = None,
                    stream_name: str = "design") -> np.ndarray:
    """Rows i.i.d. ``N(0, scale * T)``, sampled through the Cholesky factor of ``T``."""
    T = toeplitz_correlation(cfg.p, cfg.decay)
    L = cholesky(T, lower=True)
    m = cfg.n if rows is None else rows
    Z = stream(cfg.seed, stream_name).standard_normal((m, cfg.p))
    return np.sqrt(scale) * Z @ L.T


def make_true_beta(cfg: DesignConfig, d: Optional[int] = None) -> np.ndarray:
    """Gaussian draw rescaled to ``||beta*||^2 = p``.

    The multiclass vector has length ``(K - 1) p`` (class rows stacked) and is
    rescaled as a whole.  ``d`` overrides the length for other model kinds.
    """
    if d is None:
        d = (cfg.K - 1) * cfg.p if cfg.protocol == "multiclass" else cfg.p
    b = stream(cfg.seed, "beta").standard_normal(d)
    return b * np.sqrt(cfg.p) / np.linalg.norm(b)


def sample_responses(spec: ModelSpec, X, beta_star, seed: int, stream_name: str = "responses") -> np.ndarray:
    """Draw responses from the model's likelihood at ``beta_star``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    rng = stream(seed, stream_name)
    if spec.kind is Kind.MULTICLASS:
        P = softmax_with_reference(multiclass_logits(spec, X, np.asarray(beta_star, dtype=float)))
        u = rng.random(X.shape[0])
        cdf = np.cumsum(P, axis=1)
        cls = (u[:, None] > cdf).sum(axis=1)
        return np.minimum(cls, spec.K - 1).astype(float) + 1.0
    z = predict_batch(spec, X, beta_star)
    if spec.loss == "logistic":
        return (rng.random(z.shape[0]) < expit(z)).astype(float)
    if spec.loss == "poisson":
        return rng.poisson(np.logaddexp(0.0, z)).astype(float)
    return z + rng.standard_normal(z.shape[0])


@dataclass
class Synthetic:
    """A generated training set, a test set, and the generating parameters."""

    train: Dataset
    test: Dataset
    beta_star: np.ndarray
    scale: float
    cfg: DesignConfig


def generate(spec: ModelSpec, cfg: DesignConfig, n_test: int = 0) -> Synthetic:
    """Training and test data for ``spec`` under ``cfg``, each from its own stream."""
    beta_star = make_true_beta(cfg, d=spec.d)
    protocol = cfg.protocol
    if spec.kind is Kind.ONE_HIDDEN:
        # no natural beta' Sigma beta for the hidden layer: use the spectral rule
        protocol = "multiclass"
    scale = covariance_scale(toeplitz_correlation(cfg.p, cfg.decay), beta_star, protocol)
    X = toeplitz_design(cfg, scale)
    y = sample_responses(spec, X, beta_star, cfg.seed)
    train = Dataset(X, y)
    test = None
    if n_test:
        Xt = toeplitz_design(cfg, scale, rows=n_test, stream_name="test")
        test = Dataset(Xt, sample_responses(spec, Xt, beta_star, cfg.seed, "test_resp"))
    return Synthetic(train, test, beta_star, scale, cfg)
