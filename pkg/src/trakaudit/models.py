"""Predictors, losses and their derivatives.

Every model kind maps a feature vector ``x`` and a parameter vector ``beta``
to a scalar prediction ``f(x, beta)``.  The loss attached to a kind is a
function of the response and that scalar prediction only, which is what the
influence estimators rely on.

Parameter layouts
-----------------
* linear kinds: ``beta`` has length ``p``.
* multiclass margin: ``beta = vec(W[:K-1])`` stacked class by class, so
  ``beta.reshape(K - 1, p)[k]`` is the weight row of class ``k + 1``.  The
  last class is the reference with its weights pinned to zero.
* one hidden layer: ``beta = (W.ravel(), v)`` with ``W`` of shape ``(h, p)``.

Multiclass labels are ``1..K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import expit, gammaln, logsumexp, xlogy

from .errors import DimensionError, EmptyDatasetError, ResponseError

__all__ = [
    "Kind",
    "Activation",
    "ACTIVATIONS",
    "ModelSpec",
    "Dataset",
    "LossDerivatives",
    "GradientMatrix",
    "loss_derivatives",
    "predict",
    "predict_batch",
    "model_gradient",
    "gradient_matrix",
    "softmax_with_reference",
]


class Kind(str, Enum):
    LINEAR_SQUARED = "linear_squared"
    LINEAR_LOGISTIC = "linear_logistic"
    LINEAR_POISSON = "linear_poisson"
    MULTICLASS = "multiclass"
    ONE_HIDDEN = "one_hidden"


LINEAR_KINDS = (Kind.LINEAR_SQUARED, Kind.LINEAR_LOGISTIC, Kind.LINEAR_POISSON)

_LOSS_OF_KIND = {
    Kind.LINEAR_SQUARED: "squared",
    Kind.LINEAR_LOGISTIC: "logistic",
    Kind.LINEAR_POISSON: "poisson",
    Kind.MULTICLASS: "margin",
}

LOSSES = ("squared", "logistic", "poisson", "margin")


@dataclass(frozen=True)
class Activation:
    """Elementwise activation with its first two derivatives."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray] = field(compare=False)
    d1: Callable[[np.ndarray], np.ndarray] = field(compare=False)
    d2: Callable[[np.ndarray], np.ndarray] = field(compare=False)


def _tanh_d1(a):
    t = np.tanh(a)
    return 1.0 - t * t


def _tanh_d2(a):
    t = np.tanh(a)
    return -2.0 * t * (1.0 - t * t)


def _sigmoid_d1(a):
    s = expit(a)
    return s * (1.0 - s)


def _sigmoid_d2(a):
    s = expit(a)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


ACTIVATIONS = {
    "tanh": Activation("tanh", np.tanh, _tanh_d1, _tanh_d2),
    "identity": Activation(
        "identity", lambda a: np.asarray(a, dtype=float), np.ones_like, np.zeros_like
    ),
    "sigmoid": Activation("sigmoid", expit, _sigmoid_d1, _sigmoid_d2),
}


@dataclass(frozen=True)
class ModelSpec:
    """Which predictor/loss pair is in force.

    ``K`` is required for the multiclass kind and ``hidden`` for the
    one-hidden-layer kind.  ``nn_loss`` selects the loss paired with the
    one-hidden-layer predictor.
    """

    kind: Kind
    p: int
    K: Optional[int] = None
    hidden: Optional[int] = None
    activation: Union[str, Activation] = "tanh"
    nn_loss: str = "squared"

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.p < 1:
            raise ValueError(f"feature dimension must be positive, got p={self.p}")
        if self.kind is Kind.MULTICLASS and (self.K is None or self.K < 3):
            raise ValueError("multiclass margin model needs K >= 3 classes")
        if self.kind is Kind.ONE_HIDDEN:
            if self.hidden is None or self.hidden < 1:
                raise ValueError("one-hidden-layer model needs hidden width >= 1")
            if self.nn_loss not in ("squared", "logistic", "poisson"):
                raise ValueError(f"unsupported loss for hidden-layer model: {self.nn_loss}")
            if isinstance(self.activation, str) and self.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def linear_squared(cls, p: int) -> "ModelSpec":
        return cls(Kind.LINEAR_SQUARED, p)

    @classmethod
    def linear_logistic(cls, p: int) -> "ModelSpec":
        return cls(Kind.LINEAR_LOGISTIC, p)

    @classmethod
    def linear_poisson(cls, p: int) -> "ModelSpec":
        return cls(Kind.LINEAR_POISSON, p)

    @classmethod
    def multiclass(cls, p: int, K: int) -> "ModelSpec":
        return cls(Kind.MULTICLASS, p, K=K)

    @classmethod
    def one_hidden(cls, p: int, hidden: int, activation="tanh", loss="squared") -> "ModelSpec":
        return cls(Kind.ONE_HIDDEN, p, hidden=hidden, activation=activation, nn_loss=loss)

    @property
    def d(self) -> int:
        if self.kind is Kind.MULTICLASS:
            return (self.K - 1) * self.p
        if self.kind is Kind.ONE_HIDDEN:
            return self.hidden * self.p + self.hidden
        return self.p

    @property
    def loss(self) -> str:
        if self.kind is Kind.ONE_HIDDEN:
            return self.nn_loss
        return _LOSS_OF_KIND[self.kind]

    @property
    def is_linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    @property
    def act(self) -> Activation:
        if isinstance(self.activation, Activation):
            return self.activation
        return ACTIVATIONS[self.activation]

    @property
    def response_loss(self) -> str:
        """Loss family that generated the responses (used for validation)."""
        return "multiclass" if self.kind is Kind.MULTICLASS else self.loss


def check_responses(kind_or_loss: str, y, K: Optional[int] = None) -> np.ndarray:
    """Validate responses against a loss codomain, returning a float array."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ResponseError("responses contain non-finite values")
    if kind_or_loss == "logistic":
        if not np.all((y == 0) | (y == 1)):
            raise ResponseError("logistic responses must lie in {0, 1}")
    elif kind_or_loss == "poisson":
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ResponseError("Poisson responses must be non-negative integers")
    elif kind_or_loss == "multiclass":
        if K is None or np.any(y != np.round(y)) or np.any(y < 1) or np.any(y > K):
            raise ResponseError(f"multiclass responses must be integers in 1..{K}")
    return y


@dataclass
class Dataset:
    """Feature matrix ``X`` (n x p) and responses ``y`` (length n)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] == 0:
            raise EmptyDatasetError("empty dataset")
        if self.X.shape[0] != self.y.shape[0]:
            raise DimensionError(
                f"{self.X.shape[0]} feature rows but {self.y.shape[0]} responses"
            )
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ResponseError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def validate(self, spec: ModelSpec) -> "Dataset":
        if self.p != spec.p:
            raise DimensionError(f"dataset has p={self.p}, model expects p={spec.p}")
        check_responses(spec.response_loss, self.y, spec.K)
        return self

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])


@dataclass
class LossDerivatives:
    value: np.ndarray
    first: np.ndarray
    second: np.ndarray


def _loss_name(spec_or_loss) -> str:
    if isinstance(spec_or_loss, ModelSpec):
        return spec_or_loss.loss
    if spec_or_loss not in LOSSES:
        raise ValueError(f"unknown loss {spec_or_loss!r}")
    return spec_or_loss


def loss_derivatives(spec_or_loss, y, z) -> LossDerivatives:
    """Loss value and its first two derivatives in the scalar prediction ``z``.

    Works elementwise on arrays.  The Poisson loss includes the ``log y!``
    term; it does not depend on ``z``.  The margin loss ignores ``y``.
    """
    loss = _loss_name(spec_or_loss)
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("prediction must be finite")
    y = np.asarray(y, dtype=float)

    if loss == "squared":
        r = z - y
        return LossDerivatives(0.5 * r * r, r, np.ones_like(r))
    if loss == "logistic":
        check_responses("logistic", y)
        s = expit(z)
        return LossDerivatives(np.logaddexp(0.0, z) - y * z, s - y, s * (1.0 - s))
    if loss == "poisson":
        check_responses("poisson", y)
        h = np.logaddexp(0.0, z)
        s = expit(z)
        ratio = np.divide(y, h, out=np.zeros(np.broadcast(y, h).shape), where=y > 0)
        value = h - xlogy(y, h) + gammaln(y + 1.0)
        first = s * (1.0 - ratio)
        tail = np.divide(ratio * s * s, h, out=np.zeros_like(ratio), where=y > 0)
        second = s * (1.0 - s) * (1.0 - ratio) + tail
        return LossDerivatives(value, first, second)
    # margin: log(1 + exp(-z))
    sp = expit(z)
    sm = expit(-z)
    value = np.logaddexp(0.0, -z) + 0.0 * y
    return LossDerivatives(value, -sm + 0.0 * y, sp * sm + 0.0 * y)


def _as_beta(spec: ModelSpec, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape[0] != spec.d:
        raise DimensionError(f"parameter vector has length {beta.shape[0]}, expected d={spec.d}")
    return beta


def _as_X(spec: ModelSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.p:
        raise DimensionError(f"feature vector has length {X.shape[1]}, expected p={spec.p}")
    return X


def _labels(spec: ModelSpec, y, n: int) -> np.ndarray:
    if y is None:
        raise ValueError("the multiclass margin predictor needs the label of each point")
    y = check_responses("multiclass", np.broadcast_to(np.asarray(y, dtype=float), (n,)), spec.K)
    return y.astype(int) - 1


def multiclass_logits(spec: ModelSpec, X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Logits for all K classes, the reference class column being zero."""
    B = beta.reshape(spec.K - 1, spec.p)
    Z = np.zeros((X.shape[0], spec.K))
    Z[:, : spec.K - 1] = X @ B.T
    return Z


def softmax_with_reference(Z: np.ndarray) -> np.ndarray:
    return np.exp(Z - logsumexp(Z, axis=1, keepdims=True))


def _others(Z: np.ndarray, yi: np.ndarray) -> np.ndarray:
    Zo = Z.copy()
    Zo[np.arange(Z.shape[0]), yi] = -np.inf
    return Zo


def predict_batch(spec: ModelSpec, X, beta, y=None) -> np.ndarray:
    """``f(x_i, beta)`` for every row of ``X``."""
    X = _as_X(spec, X)
    beta = _as_beta(spec, beta)
    if spec.is_linear:
        return X @ beta
    if spec.kind is Kind.MULTICLASS:
        yi = _labels(spec, y, X.shape[0])
        Z = multiclass_logits(spec, X, beta)
        # log(p_y / (1 - p_y)) = z_y - logsumexp_{j != y} z_j
        return Z[np.arange(X.shape[0]), yi] - logsumexp(_others(Z, yi), axis=1)
    W, v = _split_nn(spec, beta)
    return spec.act.fn(X @ W.T) @ v


def predict(spec: ModelSpec, x, beta, y=None) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionError("predict takes a single feature vector")
    return float(predict_batch(spec, x, beta, None if y is None else [y])[0])


def _split_nn(spec: ModelSpec, beta: np.ndarray):
    hp = spec.hidden * spec.p
    return beta[:hp].reshape(spec.hidden, spec.p), beta[hp:]


def gradient_rows(spec: ModelSpec, X, beta, y=None) -> np.ndarray:
    """Row ``i`` is the gradient of ``f(x_i, .)`` at ``beta``."""
    X = _as_X(spec, X)
    beta = _as_beta(spec, beta)
    n = X.shape[0]
    if spec.is_linear:
        return X.copy()
    if spec.kind is Kind.MULTICLASS:
        yi = _labels(spec, y, n)
        Z = multiclass_logits(spec, X, beta)
        # (1_y - p) / (1 - p_y) is 1 at y and minus the softmax over the
        # other classes elsewhere.
        Q = softmax_with_reference(_others(Z, yi))
        C = -Q[:, : spec.K - 1]
        own = yi < spec.K - 1
        C[np.nonzero(own)[0], yi[own]] = 1.0
        return (C[:, :, None] * X[:, None, :]).reshape(n, spec.d)
    W, v = _split_nn(spec, beta)
    A = X @ W.T
    dW = (spec.act.d1(A) * v)[:, :, None] * X[:, None, :]
    return np.hstack([dW.reshape(n, -1), spec.act.fn(A)])


def model_gradient(spec: ModelSpec, x, y, beta) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionError("model_gradient takes a single feature vector")
    return gradient_rows(spec, x, beta, None if y is None else [y])[0]


@dataclass
class GradientMatrix:
    rows: np.ndarray
    beta: np.ndarray


def gradient_matrix(spec: ModelSpec, data: Dataset, beta) -> GradientMatrix:
    if data is None or data.n == 0:
        raise EmptyDatasetError("empty dataset")
    beta = _as_beta(spec, beta)
    y = data.y if spec.kind is Kind.MULTICLASS else None
    return GradientMatrix(gradient_rows(spec, data.X, beta, y), beta.copy())
