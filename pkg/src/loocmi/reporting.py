"""File formats: LOO weight/prediction CSVs, BoundReport JSON, summary CSVs.

Reals are written with 17 significant digits so every file round-trips
exactly; no timestamps or host details are recorded, so identical inputs
give byte-identical files.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import ParseError
from .trainers import LooPredictions, LooWeights

__all__ = [
    "BoundReport",
    "fmt_real",
    "write_weights_csv",
    "read_weights_csv",
    "write_predictions_csv",
    "read_predictions_csv",
    "write_rows_csv",
    "SUMMARY_COLUMNS",
]


def fmt_real(x) -> str:
    return format(float(x), ".17g")


def _jsonable(v):
    if v is None or isinstance(v, (bool, np.bool_, str)):
        return bool(v) if isinstance(v, np.bool_) else v
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return fmt_real(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "to_dict"):
        return _jsonable(v.to_dict())
    raise TypeError(f"cannot serialise {type(v).__name__}")


@dataclass
class BoundReport:
    """Every bound, oracle estimate and measured gap for one experiment.

    Field order is the JSON key order.
    """

    n: int
    units: str = "nats"
    experiment: str = ""
    generator: Optional[str] = None
    seed: Optional[int] = None
    p: Optional[int] = None
    model: Optional[str] = None
    optimizer: Optional[str] = None
    loss_id: Optional[str] = None
    loss_cap: Optional[float] = None
    loss_clipped: Optional[bool] = None
    loo_mode: str = "full"
    rows_used: Optional[int] = None
    ln_s_substituted: bool = False
    sigma_or_cov: Optional[dict] = None
    prediction_sigma: Optional[float] = None
    loo_cmi_upper: Optional[float] = None
    floo_cmi_upper: Optional[float] = None
    jensen_upper: Optional[float] = None
    jensen_floo_upper: Optional[float] = None
    gen_bound_weights: Optional[float] = None
    gen_bound_predictions: Optional[float] = None
    stability_bounds: Optional[dict] = None
    local_bound: Optional[float] = None
    measured_gap: Optional[float] = None
    gap: Optional[dict] = None
    train_error: Optional[float] = None
    test_error: Optional[float] = None
    noisy_test_error: Optional[dict] = None
    oracle: Optional[dict] = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        known = {f.name: f for f in fields(cls)}
        kwargs = {k: _parse_reals(v) for k, v in d.items() if k in known}
        return cls(**kwargs)

    @classmethod
    def read(cls, path) -> "BoundReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _parse_reals(v):
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    if isinstance(v, dict):
        return {k: _parse_reals(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_parse_reals(x) for x in v]
    return v


# --------------------------------------------------------------------------
# LOO weights and predictions


def write_weights_csv(loo: LooWeights, path) -> None:
    """``index,w0,...,w{K-1}``: one row per populated ``i``, then a ``full`` row."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + [f"w{k}" for k in range(loo.K)])
        for i in loo.indices:
            w.writerow([int(i)] + [fmt_real(v) for v in loo.weights[i]])
        w.writerow(["full"] + [fmt_real(v) for v in loo.full_weights])


def _read_rows(path):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(str(exc), path=path) from None
    if not rows:
        raise ParseError("empty file", path=path)
    return path, rows


def read_weights_csv(path, n: Optional[int] = None, config=None) -> LooWeights:
    """Inverse of :func:`write_weights_csv`.

    ``n`` defaults to one past the largest index; a missing ``full`` row
    gives NaN full weights, which the bound computations never use.
    """
    path, rows = _read_rows(path)
    header = rows[0]
    K = len(header) - 1
    if K < 1 or header != ["index"] + [f"w{k}" for k in range(K)]:
        raise ParseError(f"bad header {header}", line=1, path=path)
    entries, full = {}, None
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != K + 1:
            raise ParseError(f"expected {K + 1} fields, got {len(row)}", line=lineno, path=path)
        try:
            vals = [float(v) for v in row[1:]]
            if row[0] == "full":
                full = vals
                continue
            i = int(row[0])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno, path=path) from None
        if i < 0 or i in entries:
            raise ParseError(f"invalid or duplicate index {i}", line=lineno, path=path)
        entries[i] = vals
    if not entries:
        raise ParseError("no LOO rows", path=path)
    n = max(entries) + 1 if n is None else n
    W = np.full((n, K), np.nan)
    for i, vals in entries.items():
        if i >= n:
            raise ParseError(f"index {i} >= n={n}", path=path)
        W[i] = vals
    pop = np.zeros(n, dtype=bool)
    pop[list(entries)] = True
    full_w = np.array(full) if full is not None else np.zeros(K)
    return LooWeights(W, full_w, config, pop)


def write_predictions_csv(preds: LooPredictions, path) -> None:
    """``i,j,p0,...,p{d-1}`` with ``i`` the removed index."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j"] + [f"p{k}" for k in range(preds.d)])
        for r, i in enumerate(preds.indices):
            for j in range(preds.n):
                w.writerow([int(i), j] + [fmt_real(v) for v in preds.preds[r, j]])


def read_predictions_csv(path, probabilities: Optional[bool] = None) -> LooPredictions:
    """Inverse of :func:`write_predictions_csv`; every (i, j) pair must be present."""
    path, rows = _read_rows(path)
    header = rows[0]
    d = len(header) - 2
    if d < 1 or header != ["i", "j"] + [f"p{k}" for k in range(d)]:
        raise ParseError(f"bad header {header}", line=1, path=path)
    data = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise ParseError(f"expected {d + 2} fields, got {len(row)}", line=lineno, path=path)
        try:
            i, j = int(row[0]), int(row[1])
            vals = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno, path=path) from None
        if (i, j) in data:
            raise ParseError(f"duplicate entry ({i}, {j})", line=lineno, path=path)
        data[(i, j)] = vals
    if not data:
        raise ParseError("no prediction rows", path=path)
    idx = sorted({i for i, _ in data})
    n = max(j for _, j in data) + 1
    P = np.empty((len(idx), n, d))
    for r, i in enumerate(idx):
        for j in range(n):
            if (i, j) not in data:
                raise ParseError(f"missing prediction entry ({i}, {j})", path=path)
            P[r, j] = data[(i, j)]
    if probabilities is None:
        probabilities = d > 1 and bool(np.all(P >= 0)) and bool(np.all(np.abs(P.sum(axis=2) - 1) <= 1e-9))
    return LooPredictions(P, np.array(idx), probabilities)


# --------------------------------------------------------------------------
# summary tables

SUMMARY_COLUMNS = [
    "experiment", "generator", "n", "seed", "sigma", "model",
    "train_error", "test_error", "loo_cmi", "floo_cmi",
    "loo_gen_bound", "floo_gen_bound", "measured_gap",
]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else fmt_real(v)
    return str(v)


def write_rows_csv(path, columns, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])
