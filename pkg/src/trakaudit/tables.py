"""CSV serialization for influence tables and datasets.

Numbers are written with 17 significant digits so a write/read cycle is
exact.  Line endings are LF regardless of platform.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import FormatError
from .influence import Estimator
from .models import Dataset

INFLUENCE_HEADER = ["estimator", "k", "train_index", "test_id", "value", "breakdown_flag"]


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def new_id(j: int) -> str:
    """Test id of the ``j``-th fresh test point."""
    return f"new{j:05d}"


def self_id(i: int) -> str:
    """Test id used when training row ``i`` is its own test point."""
    return f"self{i:05d}"


@dataclass
class InfluenceTable:
    """Influence values of one estimator over a (train index, test id) grid.

    Breakdown entries keep the value NaN and ``breakdown`` True; every other
    value is finite.
    """

    estimator: Estimator
    train_index: np.ndarray
    test_id: np.ndarray
    value: np.ndarray
    breakdown: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_index = np.asarray(self.train_index, dtype=int)
        self.test_id = np.asarray(self.test_id, dtype=str)
        self.value = np.asarray(self.value, dtype=float)
        self.breakdown = np.asarray(self.breakdown, dtype=bool)
        m = self.train_index.shape[0]
        if not (self.test_id.shape[0] == self.value.shape[0] == self.breakdown.shape[0] == m):
            raise ValueError("influence table columns differ in length")
        bad = ~np.isfinite(self.value) & ~self.breakdown
        if bad.any():
            raise ValueError(f"{int(bad.sum())} non-finite values outside breakdown entries")
        order = np.lexsort((self.train_index, self.test_id))
        self.train_index = self.train_index[order]
        self.test_id = self.test_id[order]
        self.value = self.value[order]
        self.breakdown = self.breakdown[order]

    @classmethod
    def from_grid(cls, estimator: Estimator, train_idx, test_ids, values, breakdown=None,
                  metadata: Optional[dict] = None) -> "InfluenceTable":
        """Build from a ``(len(train_idx), len(test_ids))`` array."""
        values = np.asarray(values, dtype=float)
        train_idx = np.asarray(train_idx, dtype=int)
        test_ids = np.asarray(test_ids, dtype=str)
        if values.shape != (train_idx.size, test_ids.size):
            raise ValueError(f"grid shape {values.shape} does not match index sizes")
        if breakdown is None:
            breakdown = np.zeros(values.shape, dtype=bool)
        ti, tj = np.meshgrid(train_idx, test_ids, indexing="ij")
        return cls(estimator, ti.ravel(), tj.ravel(), values.ravel(), np.asarray(breakdown).ravel(),
                   dict(metadata or {}))

    @classmethod
    def from_pairs(cls, estimator: Estimator, train_idx, test_ids, values, breakdown=None,
                   metadata: Optional[dict] = None) -> "InfluenceTable":
        """Build from aligned per-entry arrays (the diagonal case)."""
        values = np.asarray(values, dtype=float)
        if breakdown is None:
            breakdown = np.zeros(values.shape, dtype=bool)
        return cls(estimator, train_idx, test_ids, values, breakdown, dict(metadata or {}))

    def __len__(self):
        return self.value.shape[0]

    def keys(self) -> List[tuple]:
        return list(zip(self.test_id.tolist(), self.train_index.tolist()))

    def as_dict(self) -> Dict[tuple, float]:
        """``(train_index, test_id) -> value``."""
        return {(int(i), str(t)): float(v) for i, t, v in zip(self.train_index, self.test_id, self.value)}

    def grid(self):
        """``(train indices, test ids, values)`` with values shaped train x test."""
        tr = np.unique(self.train_index)
        te = np.unique(self.test_id)
        if tr.size * te.size != len(self):
            raise ValueError("table does not cover a full grid")
        # rows are sorted by (test_id, train_index)
        return tr, te, self.value.reshape(te.size, tr.size).T

    def valid(self) -> np.ndarray:
        return ~self.breakdown

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(INFLUENCE_HEADER)
        tag = self.estimator.tag
        k = "" if self.estimator.k is None else str(self.estimator.k)
        for i, t, v, b in zip(self.train_index, self.test_id, self.value, self.breakdown):
            w.writerow([tag, k, int(i), t, fmt(v), int(b)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, newline="")
            if self.metadata:
                Path(str(path) + ".json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")
        return text


def read_influence_csv(path) -> List[InfluenceTable]:
    """Read a CSV written by ``InfluenceTable.to_csv``; one table per estimator found."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != INFLUENCE_HEADER:
        raise FormatError(f"{path}: expected header {','.join(INFLUENCE_HEADER)}")
    groups: Dict[tuple, list] = {}
    for r in rows[1:]:
        if len(r) != len(INFLUENCE_HEADER):
            raise FormatError(f"{path}: malformed row {r}")
        groups.setdefault((r[0], r[1]), []).append(r)
    meta = {}
    side = Path(str(path) + ".json")
    if side.exists():
        meta = json.loads(side.read_text())
    out = []
    for (tag, k), rs in groups.items():
        est = Estimator(tag, int(k) if k else None)
        out.append(InfluenceTable(
            est,
            [int(r[2]) for r in rs],
            [r[3] for r in rs],
            [float(r[4]) for r in rs],
            [r[5] == "1" for r in rs],
            dict(meta),
        ))
    return out


def write_dataset(data: Dataset, path, metadata: Optional[dict] = None) -> None:
    """Columnar CSV with ``y`` first, then ``x0 .. x{p-1}``, plus a JSON sidecar."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["y"] + [f"x{j}" for j in range(data.p)])
    for yi, xi in zip(data.y, data.X):
        w.writerow([fmt(yi)] + [fmt(v) for v in xi])
    path.write_text(buf.getvalue(), newline="")
    meta = {"n": data.n, "p": data.p}
    meta.update(metadata or {})
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def read_dataset(path):
    """Inverse of ``write_dataset``; returns ``(Dataset, metadata)``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "y":
            raise FormatError(f"{path}: first column must be y")
        rows = [[float(v) for v in r] for r in reader if r]
    if not rows:
        raise FormatError(f"{path}: no data rows")
    A = np.array(rows)
    if A.shape[1] != len(header):
        raise FormatError(f"{path}: ragged rows")
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return Dataset(A[:, 1:], A[:, 0]), meta
