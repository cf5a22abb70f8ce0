import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax

from trakaudit.errors import DimensionError, EmptyDatasetError, ResponseError
from trakaudit.models import (
    Dataset,
    Kind,
    ModelSpec,
    gradient_matrix,
    loss_derivatives,
    model_gradient,
    predict,
    predict_batch,
)

ALL_SPECS = [
    ModelSpec.linear_squared(4),
    ModelSpec.linear_logistic(4),
    ModelSpec.linear_poisson(4),
    ModelSpec.multiclass(4, 3),
    ModelSpec.multiclass(3, 5),
    ModelSpec.one_hidden(4, 3),
    ModelSpec.one_hidden(3, 2, activation="sigmoid"),
]


def random_label(spec, rng):
    return int(rng.integers(1, spec.K + 1)) if spec.kind is Kind.MULTICLASS else None


def central_diff(fun, beta, h):
    g = np.empty_like(beta)
    for j in range(beta.size):
        e = np.zeros_like(beta)
        e[j] = h
        g[j] = (fun(beta + e) - fun(beta - e)) / (2 * h)
    return g


def test_dimensions():
    assert ModelSpec.linear_logistic(7).d == 7
    assert ModelSpec.multiclass(100, 3).d == 200
    assert ModelSpec.one_hidden(5, 4).d == 4 * 5 + 4


def test_predict_examples():
    assert predict(ModelSpec.linear_squared(2), [1, 2], [3, -1]) == pytest.approx(1.0)
    mc = ModelSpec.multiclass(4, 3)
    assert predict(mc, np.arange(4.0), np.zeros(8), y=2) == pytest.approx(-np.log(2))
    nn = ModelSpec.one_hidden(2, 2, activation="identity")
    beta = np.r_[np.eye(2).ravel(), 1.0, 1.0]
    assert predict(nn, [0.5, 0.5], beta) == pytest.approx(1.0)


def test_multiclass_margin_matches_softmax_log_odds():
    rng = np.random.default_rng(0)
    spec = ModelSpec.multiclass(5, 4)
    X = rng.standard_normal((20, 5))
    beta = rng.standard_normal(spec.d)
    y = rng.integers(1, 5, size=20)
    W = np.vstack([beta.reshape(3, 5), np.zeros(5)])
    P = softmax(X @ W.T, axis=1)
    py = P[np.arange(20), y - 1]
    np.testing.assert_allclose(predict_batch(spec, X, beta, y), np.log(py / (1 - py)), rtol=1e-12)


def test_multiclass_margin_extreme_logits_stay_finite():
    spec = ModelSpec.multiclass(1, 3)
    f = predict_batch(spec, [[1.0], [1.0]], [800.0, -800.0], [1, 3])
    assert np.all(np.isfinite(f))
    assert f[0] == pytest.approx(800.0)


def test_loss_examples():
    ld = loss_derivatives("logistic", 1.0, 0.0)
    assert (float(ld.first), float(ld.second)) == pytest.approx((-0.5, 0.25))
    ld = loss_derivatives("squared", 2.0, 2.0)
    assert (float(ld.value), float(ld.first), float(ld.second)) == (0.0, 0.0, 1.0)
    ld = loss_derivatives("margin", 1.0, 0.0)
    assert (float(ld.value), float(ld.first), float(ld.second)) == pytest.approx((np.log(2), -0.5, 0.25))


@pytest.mark.parametrize("loss,y", [("logistic", 2.0), ("poisson", -1.0), ("poisson", 1.5)])
def test_loss_rejects_bad_responses(loss, y):
    with pytest.raises(ResponseError):
        loss_derivatives(loss, y, 0.0)


def test_loss_rejects_nonfinite_prediction():
    with pytest.raises(ValueError):
        loss_derivatives("squared", 0.0, np.inf)


def test_poisson_value_includes_log_factorial():
    from scipy.stats import poisson

    z = 0.7
    ld = loss_derivatives("poisson", 3.0, z)
    mu = np.log1p(np.exp(z))
    assert float(ld.value) == pytest.approx(-poisson.logpmf(3, mu), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    loss=st.sampled_from(["squared", "logistic", "poisson", "margin"]),
    z=st.floats(-8, 8),
    yint=st.integers(0, 6),
)
def test_loss_derivative_chain(loss, z, yint):
    y = {"logistic": float(yint % 2), "poisson": float(yint)}.get(loss, float(yint) - 3.0)
    h = 1e-4
    f = lambda t: float(loss_derivatives(loss, y, t).value)
    d1 = lambda t: float(loss_derivatives(loss, y, t).first)
    ld = loss_derivatives(loss, y, z)
    fd1 = (f(z + h) - f(z - h)) / (2 * h)
    fd2 = (d1(z + h) - d1(z - h)) / (2 * h)
    assert float(ld.first) == pytest.approx(fd1, rel=1e-6, abs=1e-8)
    assert float(ld.second) == pytest.approx(fd2, rel=1e-6, abs=1e-8)
    assert float(ld.second) >= 0.0


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.kind.value}-{s.K or s.hidden}")
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal(spec.p)
        beta = rng.standard_normal(spec.d)
        y = random_label(spec, rng)
        h = 1e-6 * max(1.0, np.linalg.norm(beta))
        g = model_gradient(spec, x, y, beta)
        fd = central_diff(lambda b: predict(spec, x, b, y), beta, h)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-12) + 1e-9


def test_gradient_examples():
    np.testing.assert_array_equal(model_gradient(ModelSpec.linear_logistic(2), [4, 5], None, [0.3, 0.1]), [4, 5])
    g = model_gradient(ModelSpec.multiclass(2, 3), [1.0, 0.0], 3, np.zeros(4))
    np.testing.assert_allclose(g, [-0.5, 0.0, -0.5, 0.0], atol=1e-15)
    rng = np.random.default_rng(2)
    nn = ModelSpec.one_hidden(3, 2, activation="identity")
    W, v, x = rng.standard_normal((2, 3)), rng.standard_normal(2), rng.standard_normal(3)
    g = model_gradient(nn, x, None, np.r_[W.ravel(), v])
    np.testing.assert_allclose(g, np.r_[np.outer(v, x).ravel(), W @ x], rtol=1e-12)


def test_gradient_matrix_rows():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((5, 3))
    lin = gradient_matrix(ModelSpec.linear_squared(3), Dataset(X, rng.standard_normal(5)), np.ones(3))
    np.testing.assert_array_equal(lin.rows, X)
    spec = ModelSpec.multiclass(3, 3)
    data = Dataset(X[:3], [1, 2, 3])
    beta = rng.standard_normal(6)
    G = gradient_matrix(spec, data, beta).rows
    for i in range(3):
        np.testing.assert_allclose(G[i], model_gradient(spec, X[i], data.y[i], beta), rtol=1e-14)


def test_dataset_errors():
    with pytest.raises(EmptyDatasetError):
        Dataset(np.empty((0, 2)), [])
    with pytest.raises(DimensionError):
        Dataset(np.ones((3, 2)), [1, 2])
    with pytest.raises(ResponseError):
        Dataset([[np.nan, 1.0]], [0.0])
    with pytest.raises(ResponseError):
        Dataset(np.ones((2, 2)), [0, 4]).validate(ModelSpec.multiclass(2, 3))
    with pytest.raises(DimensionError):
        Dataset(np.ones((2, 3)), [0, 1]).validate(ModelSpec.linear_logistic(2))


def test_dimension_mismatch_in_predict():
    with pytest.raises(DimensionError):
        predict(ModelSpec.linear_squared(2), [1, 2, 3], [1, 1])
    with pytest.raises(DimensionError):
        predict(ModelSpec.linear_squared(2), [1, 2], [1, 1, 1])


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec.multiclass(3, 2)
    with pytest.raises(ValueError):
        ModelSpec.one_hidden(3, 0)
    with pytest.raises(ValueError):
        ModelSpec.one_hidden(3, 2, activation="relu")
