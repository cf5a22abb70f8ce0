"""Command line entry point: ``trakaudit {simulate,ingest,influence,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import TrakAuditError
from .experiment import (
    ExperimentConfig,
    evaluate,
    parse_config,
    summarize,
    write_report,
)
from .metrics import correlation_matrix, rank_alignment
from .tables import INFLUENCE_HEADER, fmt, read_dataset, read_influence_csv, write_dataset

log = logging.getLogger("trakaudit")


def _load_cfg(args, extra_keys=()) -> tuple:
    raw = parse_config(Path(args.config).read_text()) if args.config else {}
    extra = {k: raw.pop(k) for k in list(raw) if k in extra_keys}
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if args.out is not None:
        raw["out"] = args.out
    if getattr(args, "estimators", None):
        raw["estimators"] = args.estimators
    if getattr(args, "k", None):
        raw["k"] = args.k
    return raw, extra


def cmd_simulate(args) -> int:
    from .experiment import run_experiment

    raw, _ = _load_cfg(args)
    cfg = ExperimentConfig.from_mapping(raw)
    out = cfg.out or "trakaudit-out"
    report = run_experiment(cfg, out)
    print(Path(out, "summary.txt").read_text(), end="")
    return 1 if not report.cells else 0


def cmd_ingest(args) -> int:
    from .ingest import binary_subset, find_cifar10, load_batches, pool_and_standardize

    raw, _ = _load_cfg(args)
    root = raw.get("cifar_dir")
    if not root:
        raise ValueError("ingest needs cifar_dir in the config")
    out = Path(raw.get("out") or "trakaudit-data")
    out.mkdir(parents=True, exist_ok=True)
    train_files, test_files = find_cifar10(root)
    train, test = load_batches(train_files), load_batches(test_files)
    binary = raw.get("classes")
    if binary:
        a, b = (int(x) for x in binary.split(","))
        train, test = binary_subset(train, a, b), binary_subset(test, a, b)
    Xtr, ytr, stats = pool_and_standardize(train)
    Xte, yte, _ = pool_and_standardize(test, stats)
    # multiclass responses are 1..K, binary responses 0/1
    offset = 0 if binary else 1
    meta = {"source": str(root), "classes": binary or "all", "label_offset": offset,
            "pooling": "4x4 average, before standardization", "scale": "bytes / 255",
            "channel_stats": stats.to_dict()}
    from .models import Dataset

    write_dataset(Dataset(Xtr, ytr + offset), out / "train.csv", dict(meta, partition="train"))
    write_dataset(Dataset(Xte, yte + offset), out / "test.csv", dict(meta, partition="test"))
    print(f"wrote {len(ytr)} training and {len(yte)} test rows to {out}")
    return 0


def cmd_influence(args) -> int:
    raw, extra = _load_cfg(args, extra_keys=("train", "test"))
    if "train" not in extra or "test" not in extra:
        raise ValueError("influence needs train and test dataset paths in the config")
    train, _ = read_dataset(extra["train"])
    test, _ = read_dataset(extra["test"])
    raw.setdefault("n", str(train.n))
    raw.setdefault("p", str(train.p))
    cfg = ExperimentConfig.from_mapping(raw)
    spec = cfg.spec(train.p)
    cell = evaluate(spec, train, test, cfg.estimator_list(spec.d), cfg.removed, cfg.seed,
                    cfg.dependent, cfg.solver_options(), train.n, train.p, 0)
    report = summarize(cfg, [cell], list(cell.failures))
    out = cfg.out or "trakaudit-out"
    write_report(report, out)
    print(Path(out, "summary.txt").read_text(), end="")
    return 0 if not cell.failures else 1


def cmd_report(args) -> int:
    raw, _ = _load_cfg(args)
    src = Path(raw.get("tables") or raw.get("out") or ".")
    ks = [int(x) for x in str(raw.get("align_k", "1,5,10")).split(",") if x]
    dirs = sorted({p.parent for p in src.rglob("*.csv") if _is_influence_csv(p)})
    if not dirs:
        raise ValueError(f"no influence tables under {src}")
    for d in dirs:
        grids = {}
        for path in sorted(d.glob("*.csv")):
            if not _is_influence_csv(path):
                continue
            for t in read_influence_csv(path):
                keep = np.char.startswith(t.test_id, "new")
                try:
                    sub = type(t)(t.estimator, t.train_index[keep], t.test_id[keep], t.value[keep],
                                  t.breakdown[keep])
                    grids[t.estimator.label] = sub
                except ValueError:
                    pass
        labels = sorted(grids)
        vals = {}
        for lab in labels:
            try:
                vals[lab] = grids[lab].grid()
            except ValueError:
                continue
        rows = ["case,estimator_a,estimator_b,pearson"]
        corr = correlation_matrix({lab: v[2].ravel() for lab, v in vals.items()})
        for (a, b), r in corr.items():
            rows.append(f"new,{a},{b},{fmt(r)}")
        (d / "correlations.csv").write_text("\n".join(rows) + "\n", newline="")
        rows = ["estimator,side,k,exact_matches,overlap"]
        ref = "True" if "True" in vals else (labels[0] if labels else None)
        for lab in vals:
            if lab == ref or np.isnan(vals[lab][2]).any() or np.isnan(vals[ref][2]).any():
                continue
            for side in ("top", "bottom"):
                for k in ks:
                    if k > len(vals[ref][0]):
                        continue
                    ra = rank_alignment((vals[ref][0], vals[ref][2]), (vals[lab][0], vals[lab][2]), k, side)
                    rows.append(f"{lab},{side},{k},{ra.exact_match_count},{fmt(ra.overlap_ratio)}")
        (d / "alignment.csv").write_text("\n".join(rows) + "\n", newline="")
        print(f"{d}:")
        for (a, b), r in corr.items():
            if a < b:
                print(f"  pearson {a} vs {b}: {r:.6f}")
    return 0


def _is_influence_csv(path: Path) -> bool:
    with path.open() as fh:
        return fh.readline().strip() == ",".join(INFLUENCE_HEADER)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trakaudit", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    cmds = {
        "simulate": (cmd_simulate, "synthetic protocol over an n x p grid"),
        "ingest": (cmd_ingest, "CIFAR binary batches to standardized feature CSVs"),
        "influence": (cmd_influence, "estimators on one train/test dataset pair"),
        "report": (cmd_report, "metrics from existing influence tables"),
    }
    for name, (fn, help_) in cmds.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--estimators", help="comma list, e.g. True,Linear,ALO,TRAK")
        sp.add_argument("--k", help="comma list of projection dimensions")
        sp.set_defaults(func=fn)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrakAuditError, ValueError, FileNotFoundError) as exc:
        print(f"trakaudit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
