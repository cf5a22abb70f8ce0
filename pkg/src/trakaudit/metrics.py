"""Agreement metrics between influence estimators and magnitude scaling fits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

SIDES = ("top", "bottom")
AXES = ("n", "p", "k")
MIN_SCALING_SAMPLES = 30


def pearson(xs, ys) -> float:
    """Sample Pearson correlation; raises on zero variance."""
    x = np.asarray(xs, dtype=float).ravel()
    y = np.asarray(ys, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = dx @ dx
    syy = dy @ dy
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance")
    # symmetric in (x, y) by construction
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def fitted_slope(x, y) -> float:
    """OLS slope of ``y`` on ``x`` (with intercept)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    dx = x - x.mean()
    return float(dx @ (y - y.mean()) / (dx @ dx))


@dataclass(frozen=True)
class RankAlignment:
    k: int
    side: str
    exact_match_count: int
    overlap_ratio: float
    n_test: int


def _ranked(values: np.ndarray, train_idx: np.ndarray, k: int, side: str) -> np.ndarray:
    """Top-k train indices per column; ties go to the smaller train index."""
    key = -values if side == "top" else values
    out = np.empty((values.shape[1], k), dtype=int)
    for j in range(values.shape[1]):
        order = np.lexsort((train_idx, key[:, j]))
        out[j] = train_idx[order[:k]]
    return out


def rank_alignment(reference, candidate, k: int, side: str = "top") -> RankAlignment:
    """Compare top-k (``side='top'``, proponents) or bottom-k (opponents) lists.

    ``reference`` and ``candidate`` are InfluenceTables (or ``(train_idx,
    values)`` pairs with values shaped train x test) over the same grid.
    """
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    tr_a, va = _as_grid(reference)
    tr_b, vb = _as_grid(candidate)
    if not np.array_equal(tr_a, tr_b) or va.shape != vb.shape:
        raise ValueError("tables do not cover the same grid")
    if not 1 <= k <= tr_a.size:
        raise ValueError(f"k={k} exceeds the {tr_a.size} available train indices")
    if np.isnan(va).any() or np.isnan(vb).any():
        raise ValueError("rank alignment needs tables without breakdown entries")
    ra = _ranked(va, tr_a, k, side)
    rb = _ranked(vb, tr_b, k, side)
    exact = int(np.all(ra == rb, axis=1).sum())
    overlap = np.mean([len(set(a) & set(b)) / k for a, b in zip(ra, rb)])
    return RankAlignment(k, side, exact, float(overlap), va.shape[1])


def _as_grid(table):
    if hasattr(table, "grid"):
        tr, _, vals = table.grid()
        return tr, vals
    tr, vals = table
    return np.asarray(tr, dtype=int), np.atleast_2d(np.asarray(vals, dtype=float))


@dataclass
class ScalingFit:
    axis: str
    slope: float
    intercept: float
    points: List[tuple]
    values: List[float] = field(default_factory=list)
    medians: List[float] = field(default_factory=list)
    q1: List[float] = field(default_factory=list)
    q3: List[float] = field(default_factory=list)


def scaling_fit(results: Mapping[float, Sequence[float]], axis: str,
                min_samples: int = MIN_SCALING_SAMPLES) -> ScalingFit:
    """Least-squares line through ``(log value, log median |I|)``.

    ``results`` maps each axis value to its magnitude samples.  Quartiles of
    ``|I|`` are kept for error bands.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if len(results) < 3:
        raise ValueError("need at least three axis values")
    vals, med, lo, hi = [], [], [], []
    for v in sorted(results):
        s = np.abs(np.asarray(results[v], dtype=float))
        s = s[np.isfinite(s)]
        if s.size < min_samples:
            raise ValueError(f"axis value {v}: {s.size} samples, need {min_samples}")
        m = float(np.median(s))
        if m <= 0:
            raise ValueError(f"axis value {v}: non-positive median, log undefined")
        vals.append(float(v))
        med.append(m)
        lo.append(float(np.quantile(s, 0.25)))
        hi.append(float(np.quantile(s, 0.75)))
    lx, ly = np.log(vals), np.log(med)
    slope, intercept = np.polyfit(lx, ly, 1)
    return ScalingFit(axis, float(slope), float(intercept), list(zip(lx.tolist(), ly.tolist())),
                      vals, med, lo, hi)


def correlation_matrix(series: Dict[str, np.ndarray]) -> Dict[tuple, float]:
    """Pairwise Pearson over entries finite in both series."""
    names = list(series)
    out = {}
    for a in names:
        for b in names:
            x, y = np.asarray(series[a]), np.asarray(series[b])
            ok = np.isfinite(x) & np.isfinite(y)
            try:
                out[(a, b)] = pearson(x[ok], y[ok])
            except ValueError:
                out[(a, b)] = float("nan")
    return out
