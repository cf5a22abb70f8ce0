import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import pearsonr

from trakaudit.metrics import fitted_slope, pearson, rank_alignment, scaling_fit

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_pearson_errors():
    with pytest.raises(ValueError, match="zero variance"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [1])


@settings(max_examples=60, deadline=None)
@given(xs=st.lists(finite, min_size=3, max_size=30), seed=st.integers(0, 1000),
       a=st.floats(0.1, 10), b=st.floats(-10, 10))
def test_pearson_properties(xs, seed, a, b):
    x = np.array(xs)
    y = x + np.random.default_rng(seed).standard_normal(x.size) * (1 + np.abs(x).max())
    assume(np.ptp(x) > 1e-6 * (1 + np.abs(x).max()))
    r = pearson(x, y)
    assert r == pearson(y, x)
    assert pearson(a * x + b, y) == pytest.approx(r, abs=1e-12)
    assert r == pytest.approx(pearsonr(x, y)[0], abs=1e-12)


def test_rank_alignment_reflexive():
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((20, 6))
    tr = np.arange(20)
    for side in ("top", "bottom"):
        ra = rank_alignment((tr, vals), (tr, vals), 5, side)
        assert ra.exact_match_count == 6 and ra.overlap_ratio == 1.0


def test_rank_alignment_disjoint():
    tr = np.arange(2)
    ra = rank_alignment((tr, [[1.0], [0.0]]), (tr, [[0.0], [1.0]]), 1, "top")
    assert ra.overlap_ratio == 0.0 and ra.exact_match_count == 0


def test_rank_alignment_order_matters_for_exact_match():
    tr = np.arange(3)
    ra = rank_alignment((tr, [[3.0], [2.0], [1.0]]), (tr, [[2.0], [3.0], [1.0]]), 2, "top")
    assert ra.overlap_ratio == 1.0 and ra.exact_match_count == 0


def test_rank_alignment_ties_by_train_index():
    tr = np.array([5, 2, 9])
    ra = rank_alignment((tr, [[1.0], [1.0], [0.0]]), (tr, [[0.5], [0.5], [0.5]]), 1, "top")
    # reference tie between 5 and 2 resolves to 2; candidate three-way tie also to 2
    assert ra.exact_match_count == 1


def test_rank_alignment_errors():
    tr = np.arange(3)
    v = np.zeros((3, 2))
    with pytest.raises(ValueError):
        rank_alignment((tr, v), (tr, v), 4)
    with pytest.raises(ValueError):
        rank_alignment((tr, v), (tr, v), 1, "middle")
    with pytest.raises(ValueError):
        rank_alignment((tr, v), (np.arange(1, 4), v), 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 8), side=st.sampled_from(["top", "bottom"]))
def test_rank_alignment_bounds(seed, k, side):
    rng = np.random.default_rng(seed)
    tr = np.arange(8)
    ra = rank_alignment((tr, rng.standard_normal((8, 4))), (tr, rng.standard_normal((8, 4))), k, side)
    assert 0.0 <= ra.overlap_ratio <= 1.0
    assert 0 <= ra.exact_match_count <= 4


def test_scaling_fit_exact_power_law():
    res = {n: np.full(30, 3.0 / n) for n in (512, 1024, 2048)}
    fit = scaling_fit(res, "n")
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
    assert len(fit.points) == 3
    assert fit.q1 == pytest.approx(fit.medians)


def test_scaling_fit_uses_medians_and_quartiles():
    rng = np.random.default_rng(1)
    res = {k: k ** 0.5 * rng.lognormal(size=200) for k in (10, 20, 40, 80)}
    fit = scaling_fit(res, "k")
    np.testing.assert_allclose(fit.medians, [np.median(res[k]) for k in (10, 20, 40, 80)])
    assert all(lo <= m <= hi for lo, m, hi in zip(fit.q1, fit.medians, fit.q3))
    assert fit.slope == pytest.approx(fitted_slope(np.log([10, 20, 40, 80]), np.log(fit.medians)))


def test_scaling_fit_errors():
    with pytest.raises(ValueError):
        scaling_fit({1: np.ones(30), 2: np.ones(30)}, "n")
    with pytest.raises(ValueError):
        scaling_fit({1: np.ones(30), 2: np.ones(30), 3: np.ones(29)}, "n")
    with pytest.raises(ValueError, match="non-positive"):
        scaling_fit({1: np.ones(30), 2: np.zeros(30), 3: np.ones(30)}, "n")
    with pytest.raises(ValueError):
        scaling_fit({1: np.ones(30), 2: np.ones(30), 3: np.ones(30)}, "q")


def test_fitted_slope():
    assert fitted_slope([0, 1, 2], [1, 3, 5]) == pytest.approx(2.0)
