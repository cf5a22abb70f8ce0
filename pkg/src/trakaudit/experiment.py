"""End-to-end runs: generate or load data, fit, estimate influence, report.

A run loops over the ``n x p`` grid and the trials.  Each (n, p, trial)
cell removes ``removed`` training points and evaluates every estimator on
``n_test`` fresh test points (the independent case) and, when requested, on
the removed points themselves (the dependent case).  Errors are caught per
cell and listed in the report; the run carries on.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import DesignConfig, generate
from .errors import BreakdownError, TrakAuditError
from .influence import (
    Estimator,
    alo_influence_matrix,
    linear_influence_matrix,
    linear_refits,
    loo_refits,
    make_projection,
    point_gradients,
    trak_influence_matrix,
    true_influence_matrix,
)
from .metrics import RankAlignment, ScalingFit, correlation_matrix, rank_alignment, scaling_fit
from .models import Dataset, Kind, ModelSpec, multiclass_logits, predict_batch
from .rng import stream, trial_seed
from .solver import FitResult, SolverOptions, build_linearized, fit_erm, fit_linearized
from .tables import InfluenceTable, fmt, new_id, self_id

log = logging.getLogger(__name__)

CASES = ("new", "self")
DEFAULT_ESTIMATORS = ("True", "Linear", "ALO")


def _ints(v) -> List[int]:
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).replace(" ", "").split(",") if x]


def _strs(v) -> List[str]:
    if isinstance(v, (list, tuple)):
        return [str(x).strip() for x in v]
    return [x.strip() for x in str(v).split(",") if x.strip()]


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass
class ExperimentConfig:
    """Everything a run needs.

    ``estimators`` lists tags (``True``, ``Linear``, ``ALO``, ``TRAK``,
    ``TRAKSimplified``); TRAK tags are expanded over ``k``.
    """

    model: str = "multiclass"
    n: List[int] = field(default_factory=lambda: [1024])
    p: List[int] = field(default_factory=lambda: [100])
    K: int = 3
    k: List[int] = field(default_factory=list)
    trials: int = 1
    removed: int = 100
    n_test: int = 10
    estimators: List[str] = field(default_factory=lambda: list(DEFAULT_ESTIMATORS))
    seed: int = 0
    out: Optional[str] = None
    decay: float = 0.1
    protocol: Optional[str] = None
    dependent: bool = False
    hidden: int = 4
    activation: str = "tanh"
    nn_loss: str = "squared"
    align_k: List[int] = field(default_factory=lambda: [1, 5, 10])
    tol_grad: Optional[float] = None
    max_iter: int = 100
    ridge: float = 0.0

    def __post_init__(self):
        self.model = Kind(self.model).value
        self.n = _ints(self.n)
        self.p = _ints(self.p)
        self.k = _ints(self.k)
        self.align_k = _ints(self.align_k)
        self.estimators = _strs(self.estimators)
        self.dependent = _bool(self.dependent)
        if not self.n or not self.p:
            raise ValueError("n and p lists must be nonempty")
        for name in ("trials", "removed", "n_test", "K", "hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if min(self.n) < 1 or min(self.p) < 1 or any(k < 1 for k in self.k):
            raise ValueError("counts must be positive")
        if not self.estimators:
            raise ValueError("estimator list is empty")
        for e in self.estimators:
            if e.startswith("TRAK"):
                if not self.k:
                    raise ValueError(f"{e} needs a k list")
                Estimator(e, 1)
            else:
                Estimator(e)
        if self.removed > min(self.n):
            raise ValueError(f"cannot remove {self.removed} of {min(self.n)} points")
        if self.protocol is None:
            self.protocol = "multiclass" if self.model == Kind.MULTICLASS.value else "glm"

    @classmethod
    def from_mapping(cls, cfg: dict) -> "ExperimentConfig":
        names = {f.name: f for f in fields(cls)}
        unknown = set(cfg) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, val in cfg.items():
            if key in ("K", "trials", "removed", "n_test", "seed", "hidden", "max_iter"):
                kw[key] = int(val)
            elif key in ("decay", "ridge"):
                kw[key] = float(val)
            elif key == "tol_grad":
                kw[key] = None if val in (None, "", "none") else float(val)
            else:
                kw[key] = val
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(parse_config(Path(path).read_text()))

    def estimator_list(self, d: Optional[int] = None) -> List[Estimator]:
        out = []
        for tag in self.estimators:
            if tag.startswith("TRAK"):
                out.extend(Estimator(tag, k) for k in self.k if d is None or k <= d)
            else:
                out.append(Estimator(tag))
        return out

    def spec(self, p: int) -> ModelSpec:
        kind = Kind(self.model)
        if kind is Kind.MULTICLASS:
            return ModelSpec.multiclass(p, self.K)
        if kind is Kind.ONE_HIDDEN:
            return ModelSpec.one_hidden(p, self.hidden, self.activation, self.nn_loss)
        return ModelSpec(kind, p)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(tol_grad=self.tol_grad, max_iter=self.max_iter, ridge=self.ridge)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_config(text: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key] = val
    return out


# ------------------------------------------------------------------ one cell

@dataclass
class CellResult:
    """Influence values of one (n, p, trial) cell.

    ``values[(label, case)]`` is a ``(removed, n_test)`` array for ``case ==
    'new'`` and a length-``removed`` vector for ``'self'``; NaN marks a
    failed refit or an ALO/TRAK breakdown.
    """

    n: int
    p: int
    trial: int
    seed: int
    train_idx: np.ndarray
    values: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)
    breakdown: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)
    tables: Dict[str, InfluenceTable] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)

    def get(self, label: str, case: str = "new") -> np.ndarray:
        return self.values[(label, case)]


def accuracy(spec: ModelSpec, data: Dataset, beta) -> Optional[float]:
    """Classification accuracy for the classification kinds, else None."""
    if spec.kind is Kind.MULTICLASS:
        Z = multiclass_logits(spec, data.X, beta)
        return float(np.mean(np.argmax(Z, axis=1) + 1 == data.y))
    if spec.loss == "logistic":
        return float(np.mean((predict_batch(spec, data.X, beta) > 0) == (data.y > 0.5)))
    return None


def evaluate(spec: ModelSpec, train: Dataset, test: Dataset, estimators: Sequence[Estimator],
             removed: int, seed: int, dependent: bool = False, opts: Optional[SolverOptions] = None,
             n: Optional[int] = None, p: Optional[int] = None, trial: int = 0) -> CellResult:
    """Fit, then compute every estimator over the removed-point x test-point grid."""
    opts = opts or SolverOptions()
    train.validate(spec)
    test.validate(spec)
    idx = np.sort(stream(seed, "removal").choice(train.n, size=removed, replace=False))
    cell = CellResult(n or train.n, p or train.p, trial, seed, idx)
    diag = cell.diagnostics

    t0 = time.perf_counter()
    fit = fit_erm(spec, train, opts=opts)
    diag.update(fit_iterations=fit.iterations, fit_grad_norm=fit.grad_norm, fit_converged=fit.converged,
                train_accuracy=accuracy(spec, train, fit.beta), test_accuracy=accuracy(spec, test, fit.beta),
                fit_seconds=time.perf_counter() - t0)
    if not fit.converged:
        cell.failures.append(f"full fit did not converge: {fit.message}")
        return cell

    points = {"new": (test.X, test.y)}
    if dependent:
        points["self"] = (train.X[idx], train.y[idx])
    grads = {c: point_gradients(spec, fit, X, y) for c, (X, y) in points.items()}

    def store(est: Estimator, case: str, vals, broken):
        if case == "self":
            vals, broken = np.diagonal(vals).copy(), np.diagonal(broken).copy()
        cell.values[(est.label, case)] = vals
        cell.breakdown[(est.label, case)] = broken

    tags = {e.tag for e in estimators}
    if "True" in tags:
        t0 = time.perf_counter()
        loo = loo_refits(spec, train, fit, idx, opts)
        bad = [i for i in idx if not loo[int(i)].converged]
        if bad:
            cell.failures.append(f"True: LOO refit failed at {len(bad)} indices {bad[:5]}")
        for case, (X, y) in points.items():
            vals, failed = true_influence_matrix(spec, fit, loo, idx, X, y)
            store(Estimator("True"), case, vals, np.zeros_like(failed))
        diag["true_seconds"] = time.perf_counter() - t0

    if tags - {"True"}:
        problem = build_linearized(spec, train, fit)
        brb = fit_linearized(problem, opts=opts, init=fit.beta)
        diag["anchor_gap"] = float(np.linalg.norm(brb.beta - fit.beta))
        if not brb.converged:
            cell.failures.append(f"linearized fit did not converge: {brb.message}")
            return cell
        for est in estimators:
            if est.tag == "True":
                continue
            t0 = time.perf_counter()
            try:
                if est.tag == "Linear":
                    lin = linear_refits(problem, brb, idx, opts)
                    bad = [i for i in idx if not lin[int(i)].converged]
                    if bad:
                        cell.failures.append(f"Linear: refit failed at {len(bad)} indices {bad[:5]}")
                    for case, G in grads.items():
                        vals, _ = linear_influence_matrix(brb, lin, idx, G)
                        store(est, case, vals, np.zeros(vals.shape, dtype=bool))
                elif est.tag == "ALO":
                    for case, G in grads.items():
                        vals, broken, _ = alo_influence_matrix(problem, brb, idx, G)
                        store(est, case, vals, broken)
                else:
                    proj = make_projection(problem.d, est.k, seed)
                    for case, G in grads.items():
                        vals, broken, _ = trak_influence_matrix(problem, brb, idx, G, proj,
                                                                simplified=est.tag == "TRAKSimplified")
                        store(est, case, vals, broken)
            except (TrakAuditError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
                cell.failures.append(f"{est.label}: {exc}")
                continue
            diag[f"{est.label}_seconds"] = time.perf_counter() - t0
        nb = {lab: int(b.sum()) for (lab, _), b in cell.breakdown.items() if b.any()}
        if nb:
            diag["breakdowns"] = nb

    meta = {"n": train.n, "p": train.p, "d": spec.d, "seed": seed, "model": spec.kind.value}
    test_ids = {"new": [new_id(j) for j in range(test.n)], "self": [self_id(int(i)) for i in idx]}
    for est in estimators:
        parts = []
        for case in points:
            key = (est.label, case)
            if key not in cell.values:
                continue
            vals, broken = cell.values[key], cell.breakdown[key]
            if case == "new":
                tr = np.repeat(idx, vals.shape[1])
                te = np.tile(test_ids["new"], vals.shape[0])
            else:
                tr, te = idx, np.asarray(test_ids["self"])
            v, b = vals.ravel(), broken.ravel()
            keep = np.isfinite(v) | b  # failed refits are omitted
            parts.append((tr[keep], te[keep], v[keep], b[keep]))
        if parts:
            cat = [np.concatenate(z) for z in zip(*parts)]
            cell.tables[est.label] = InfluenceTable.from_pairs(est, cat[0], cat[1], cat[2], cat[3], meta)
    return cell


# ------------------------------------------------------------------- report

@dataclass
class ExperimentReport:
    cfg: ExperimentConfig
    cells: List[CellResult]
    correlations: Dict[tuple, Dict[tuple, float]]
    alignments: Dict[tuple, List[Tuple[str, RankAlignment]]]
    fits: Dict[str, ScalingFit]
    failures: List[str]

    def cell(self, n: int, p: int, trial: int = 0) -> CellResult:
        for c in self.cells:
            if (c.n, c.p, c.trial) == (n, p, trial):
                return c
        raise KeyError((n, p, trial))

    def pooled(self, label: str, case: str = "new", n=None, p=None) -> np.ndarray:
        out = [c.values[(label, case)].ravel() for c in self.cells
               if (label, case) in c.values and (n is None or c.n == n) and (p is None or c.p == p)]
        return np.concatenate(out) if out else np.empty(0)


def _pairwise(cell: CellResult, case: str) -> Dict[tuple, float]:
    series = {lab: v.ravel() for (lab, c), v in cell.values.items() if c == case}
    return correlation_matrix(series)


def _alignments(cell: CellResult, ks: Sequence[int]) -> List[Tuple[str, RankAlignment]]:
    labels = [lab for (lab, c) in cell.values if c == "new"]
    if not labels:
        return []
    ref = "True" if "True" in labels else labels[0]
    ref_vals = cell.values[(ref, "new")]
    out = []
    if np.isnan(ref_vals).any():
        return out
    for lab in labels:
        if lab == ref:
            continue
        vals = cell.values[(lab, "new")]
        if np.isnan(vals).any():
            continue
        for side in ("top", "bottom"):
            for k in ks:
                if k <= len(cell.train_idx):
                    out.append((lab, rank_alignment((cell.train_idx, ref_vals), (cell.train_idx, vals), k, side)))
    return out


def _magnitudes(cell: CellResult) -> Dict[str, np.ndarray]:
    """Named magnitude samples used by the scaling fits."""
    out = {}
    for case in CASES:
        v = {lab: val for (lab, c), val in cell.values.items() if c == case}
        for lab, val in v.items():
            out[f"abs({lab});{case}"] = np.abs(val).ravel()
        if "True" in v and "Linear" in v:
            out[f"abs(True-Linear);{case}"] = np.abs(v["True"] - v["Linear"]).ravel()
        if "Linear" in v and "ALO" in v:
            out[f"abs(Linear-ALO);{case}"] = np.abs(v["Linear"] - v["ALO"]).ravel()
        if "ALO" in v:
            for lab, val in v.items():
                if lab.startswith("TRAK"):
                    with np.errstate(divide="ignore", invalid="ignore"):
                        out[f"ratio({lab.split('(')[0]}/ALO)@{lab};{case}"] = (val / v["ALO"]).ravel()
    return out


def scaling_fits(cells: Sequence[CellResult], ks: Sequence[int]) -> Dict[str, ScalingFit]:
    """Fits along n (p fixed), along p (n fixed) and along k (TRAK quantities)."""
    fits = {}
    pooled: Dict[tuple, list] = {}
    for c in cells:
        for name, s in _magnitudes(c).items():
            pooled.setdefault((name, c.n, c.p), []).append(s)
    pooled = {key: np.concatenate(v) for key, v in pooled.items()}
    ns = sorted({c.n for c in cells})
    ps = sorted({c.p for c in cells})
    names = sorted({key[0] for key in pooled})

    def attempt(label, results, axis):
        try:
            fits[label] = scaling_fit(results, axis)
        except ValueError as exc:
            log.debug("no %s fit for %s: %s", axis, label, exc)

    for name in names:
        if name.startswith("ratio("):
            continue
        base, case = name.split(";")
        if "TRAK" in base:
            continue
        if len(ns) >= 3:
            for p in ps:
                res = {n: pooled[(name, n, p)] for n in ns if (name, n, p) in pooled}
                attempt(f"{base};{case};p={p}", res, "n")
        if len(ps) >= 3:
            for n in ns:
                res = {p: pooled[(name, n, p)] for p in ps if (name, n, p) in pooled}
                attempt(f"{base};{case};n={n}", res, "p")
    if len(ks) >= 3:
        for n in ns:
            for p in ps:
                for case in CASES:
                    for tag in ("TRAK", "TRAKSimplified"):
                        for kind in ("abs", "ratio"):
                            res = {}
                            for k in ks:
                                lab = f"{tag}({k})"
                                key = (f"abs({lab});{case}" if kind == "abs" else f"ratio({tag}/ALO)@{lab};{case}", n, p)
                                if key in pooled:
                                    res[k] = pooled[key]
                            if len(res) >= 3:
                                q = f"abs({tag})" if kind == "abs" else f"ratio({tag}/ALO)"
                                attempt(f"{q};{case};n={n};p={p}", res, "k")
    return fits


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None) -> ExperimentReport:
    """Run every (n, p, trial) cell of ``cfg`` and write the outputs if ``out`` is set."""
    out = out or cfg.out
    opts = cfg.solver_options()
    cells, failures = [], []
    for n in cfg.n:
        for p in cfg.p:
            spec = cfg.spec(p)
            for t in range(cfg.trials):
                seed = trial_seed(cfg.seed, t)
                tag = f"n={n} p={p} trial={t}"
                try:
                    dcfg = DesignConfig(n=n, p=p, K=cfg.K, decay=cfg.decay, seed=seed, protocol=cfg.protocol)
                    syn = generate(spec, dcfg, n_test=cfg.n_test)
                    cell = evaluate(spec, syn.train, syn.test, cfg.estimator_list(spec.d), cfg.removed, seed,
                                    cfg.dependent, opts, n, p, t)
                    cell.diagnostics["covariance_scale"] = syn.scale
                except (TrakAuditError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
                    failures.append(f"{tag}: {type(exc).__name__}: {exc}")
                    log.warning("%s failed: %s", tag, exc)
                    continue
                failures.extend(f"{tag}: {msg}" for msg in cell.failures)
                cells.append(cell)
                log.info("%s done", tag)
    report = summarize(cfg, cells, failures)
    if out:
        write_report(report, out)
    return report


def summarize(cfg: ExperimentConfig, cells: List[CellResult], failures: List[str]) -> ExperimentReport:
    correlations = {}
    alignments = {}
    for c in cells:
        for case in CASES:
            if any(cc == case for (_, cc) in c.values):
                correlations[(c.n, c.p, c.trial, case)] = _pairwise(c, case)
        alignments[(c.n, c.p, c.trial)] = _alignments(c, cfg.align_k)
    fits = scaling_fits(cells, cfg.k)
    return ExperimentReport(cfg, cells, correlations, alignments, fits, failures)


def _cell_dir(root: Path, c: CellResult) -> Path:
    return root / f"n{c.n}_p{c.p}" / f"trial{c.trial:03d}"


def write_report(report: ExperimentReport, out) -> Path:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for c in report.cells:
        d = _cell_dir(root, c)
        d.mkdir(parents=True, exist_ok=True)
        for label, table in c.tables.items():
            fname = label.replace("(", "_").replace(")", "") + ".csv"
            table.to_csv(d / fname)
        rows = ["case,estimator_a,estimator_b,pearson"]
        for case in CASES:
            for (a, b), r in report.correlations.get((c.n, c.p, c.trial, case), {}).items():
                rows.append(f"{case},{a},{b},{fmt(r)}")
        (d / "correlations.csv").write_text("\n".join(rows) + "\n", newline="")
        rows = ["estimator,side,k,exact_matches,overlap"]
        for lab, ra in report.alignments.get((c.n, c.p, c.trial), []):
            rows.append(f"{lab},{ra.side},{ra.k},{ra.exact_match_count},{fmt(ra.overlap_ratio)}")
        (d / "alignment.csv").write_text("\n".join(rows) + "\n", newline="")
    rows = ["quantity,axis,value,median,q1,q3"]
    for name in sorted(report.fits):
        f = report.fits[name]
        for v, m, lo, hi in zip(f.values, f.medians, f.q1, f.q3):
            rows.append(f"{name},{f.axis},{fmt(v)},{fmt(m)},{fmt(lo)},{fmt(hi)}")
    (root / "scaling.csv").write_text("\n".join(rows) + "\n", newline="")
    (root / "summary.txt").write_text(summary_text(report), newline="")
    return root


def summary_text(report: ExperimentReport) -> str:
    cfg = report.cfg
    lines = ["trakaudit experiment summary", ""]
    lines.append("config: " + json.dumps(cfg.to_dict(), sort_keys=True, default=str))
    lines.append(f"cells: {len(report.cells)}  failures: {len(report.failures)}")
    lines.append("")
    for c in report.cells:
        lines.append(f"[n={c.n} p={c.p} trial={c.trial}]")
        dg = {k: v for k, v in c.diagnostics.items() if not k.endswith("_seconds")}
        lines.append("  diagnostics: " + json.dumps(dg, sort_keys=True, default=_jsonable))
        for case in CASES:
            corr = report.correlations.get((c.n, c.p, c.trial, case))
            if not corr:
                continue
            labels = sorted({a for a, _ in corr})
            for i, a in enumerate(labels):
                for b in labels[i + 1:]:
                    lines.append(f"  pearson[{case}] {a} vs {b}: {corr[(a, b)]:.6f}")
        for lab, ra in report.alignments.get((c.n, c.p, c.trial), []):
            if ra.k in (1, max(cfg.align_k)):
                lines.append(f"  alignment {lab} {ra.side} k={ra.k}: exact {ra.exact_match_count}/{ra.n_test}"
                             f" overlap {ra.overlap_ratio:.3f}")
    if report.fits:
        lines.append("")
        lines.append("scaling fits (log-log slope of median magnitude):")
        for name in sorted(report.fits):
            f = report.fits[name]
            lines.append(f"  {name} vs {f.axis}: slope {f.slope:+.4f}")
    if report.failures:
        lines.append("")
        lines.append("failures:")
        lines.extend("  " + f for f in report.failures)
    return "\n".join(lines) + "\n"


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return str(x)
