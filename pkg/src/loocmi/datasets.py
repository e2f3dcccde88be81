"""Synthetic datasets, leave-one-out views and CSV round-tripping."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, DomainError, ParseError

__all__ = [
    "Dataset",
    "LooView",
    "GENERATORS",
    "TEST_SEED_OFFSET",
    "make_rng",
    "generate",
    "loo_view",
    "holdout_test_set",
    "bayes_error",
    "true_theta",
    "write_csv",
    "read_csv",
]

GENERATORS = ("gaussian-blobs", "linear-regression", "xor-blobs")

# Held-out draws use seed + TEST_SEED_OFFSET on their own stream.
TEST_SEED_OFFSET = 1_000_003

# Stream identifiers for the counter-based RNG.
STREAM_TRAIN = 0
STREAM_TEST = 1
STREAM_TASK = 2

# Distribution parameters. Fixed so that every seed draws from the same task.
BLOB_MU = 0.5
XOR_MU = 1.5
REGRESSION_NOISE = 0.5
_TASK_KEY = 20_240_517


def make_rng(seed: int, stream: int = 0, index: int = 0) -> np.random.Generator:
    """Independent Philox generator keyed by ``(seed, stream, index)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable labelled sample ``z^n``.

    ``labels`` holds integer class indices for classification tasks and
    reals for regression.
    """

    features: np.ndarray
    labels: np.ndarray
    seed: int = 0
    generator_id: str = "external"
    task: str = "classification"
    n_classes: int = 2

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if self.task == "classification":
            y = np.array(self.labels)
            if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
                raise DomainError("classification labels must be integers")
            y = y.astype(np.int64)
        elif self.task == "regression":
            y = np.array(self.labels, dtype=np.float64)
        else:
            raise ConfigError(f"unknown task {self.task!r}")
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DomainError(f"features {X.shape} and labels {y.shape} disagree")
        if X.shape[0] < 1:
            raise DomainError("dataset is empty")
        if not np.all(np.isfinite(X)):
            raise DomainError("feature rows must be finite")
        if self.task == "classification":
            if np.any(y < 0) or np.any(y >= self.n_classes):
                raise DomainError(f"labels outside 0..{self.n_classes - 1}")
        elif not np.all(np.isfinite(y)):
            raise DomainError("regression labels must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.seed,
                       self.generator_id, self.task, self.n_classes)

    def permuted(self, perm: Sequence[int]) -> "Dataset":
        return self.subset(perm)


@dataclass(frozen=True, eq=False)
class LooView:
    """Read-only view of ``base`` with sample ``removed_index`` skipped."""

    base: Dataset
    removed_index: int

    @property
    def indices(self) -> np.ndarray:
        n = self.base.n
        return np.concatenate([np.arange(self.removed_index), np.arange(self.removed_index + 1, n)])

    @property
    def features(self) -> np.ndarray:
        return self.base.features[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.base.labels[self.indices]

    @property
    def n(self) -> int:
        return self.base.n - 1

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[tuple]:
        for i in self.indices:
            yield self.base.features[i], self.base.labels[i]


def loo_view(ds: Dataset, u: int) -> LooView:
    """View of ``ds`` with sample ``u`` removed."""
    if isinstance(u, (bool, np.bool_)) or int(u) != u:
        raise DomainError(f"index must be an integer, got {u!r}")
    u = int(u)
    if not 0 <= u < ds.n:
        raise DomainError(f"index {u} out of range for n={ds.n}")
    return LooView(ds, u)


def true_theta(p: int) -> np.ndarray:
    """Ground-truth regression coefficients for dimension ``p``."""
    return make_rng(_TASK_KEY, STREAM_TASK, p).standard_normal(p)


def bayes_error(generator_id: str, p: int) -> float:
    """Analytic Bayes error of the gaussian-blobs task, Phi(-mu sqrt(p))."""
    if generator_id != "gaussian-blobs":
        raise ConfigError("analytic Bayes error is only available for gaussian-blobs")
    from scipy.stats import norm

    return float(norm.cdf(-BLOB_MU * np.sqrt(p)))


def _draw(generator_id: str, rng: np.random.Generator, n: int, p: int):
    if generator_id == "gaussian-blobs":
        y = np.arange(n, dtype=np.int64) % 2
        centers = np.where(y[:, None] == 1, BLOB_MU, -BLOB_MU) * np.ones((1, p))
        X = centers + rng.standard_normal((n, p))
        return X, y, "classification"
    if generator_id == "linear-regression":
        X = rng.standard_normal((n, p))
        y = X @ true_theta(p) + REGRESSION_NOISE * rng.standard_normal(n)
        return X, y, "regression"
    if generator_id == "xor-blobs":
        if p < 2:
            raise ConfigError("xor-blobs needs p >= 2")
        cluster = np.arange(n) % 4
        s0 = np.where(cluster < 2, 1.0, -1.0)
        s1 = np.where(cluster % 2 == 0, 1.0, -1.0)
        X = rng.standard_normal((n, p))
        X[:, 0] += XOR_MU * s0
        X[:, 1] += XOR_MU * s1
        y = (s0 != s1).astype(np.int64)
        return X, y, "classification"
    raise ConfigError(f"unknown generator {generator_id!r}; expected one of {GENERATORS}")


def generate(generator_id: str, seed: int, n: int, p: int, *, stream: int = STREAM_TRAIN) -> Dataset:
    """Draw a deterministic synthetic dataset.

    Classification generators assign labels by cycling through the classes
    (clusters for xor-blobs), so class counts differ by at most one.
    """
    if generator_id not in GENERATORS:
        raise ConfigError(f"unknown generator {generator_id!r}; expected one of {GENERATORS}")
    if int(n) < 2:
        raise DomainError(f"n must be >= 2, got {n}")
    if int(p) < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    X, y, task = _draw(generator_id, make_rng(seed, stream), int(n), int(p))
    return Dataset(X, y, int(seed), generator_id, task, 2 if task == "classification" else 0)


def holdout_test_set(generator_id: str, seed: int, m: int, p: int) -> Dataset:
    """Fresh i.i.d. sample of size ``m`` for the training draw with ``seed``.

    Uses ``seed + TEST_SEED_OFFSET`` on the test stream, so it never shares
    RNG state with any training draw.
    """
    if generator_id not in GENERATORS:
        raise ConfigError(f"unknown generator {generator_id!r}")
    if int(m) < 1:
        raise DomainError("test set size must be positive")
    test_seed = int(seed) + TEST_SEED_OFFSET
    X, y, task = _draw(generator_id, make_rng(test_seed, STREAM_TEST), int(m), int(p))
    return Dataset(X, y, test_seed, generator_id, task, 2 if task == "classification" else 0)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_csv(ds: Dataset, path) -> None:
    """Write ``x0,...,x{p-1},y`` with 17 significant digits."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(ds.p)] + ["y"])
        for row, label in zip(ds.features, ds.labels):
            lab = str(int(label)) if ds.task == "classification" else _fmt(label)
            w.writerow([_fmt(v) for v in row] + [lab])


def read_csv(path, task: Optional[str] = None, n_classes: Optional[int] = None) -> Dataset:
    """Read a dataset written by :func:`write_csv`.

    ``task`` defaults to classification when every label is an integer
    literal, regression otherwise.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", path=path)
    header = rows[0]
    p = len(header) - 1
    if p < 1 or header != [f"x{k}" for k in range(p)] + ["y"]:
        raise ParseError(f"bad header {header}", line=1, path=path)
    X, raw_y = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != p + 1:
            raise ParseError(f"expected {p + 1} fields, got {len(row)}", line=lineno, path=path)
        try:
            X.append([float(v) for v in row[:p]])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno, path=path) from None
        raw_y.append(row[p])
    if task is None:
        task = "classification" if all(s.lstrip("-").isdigit() for s in raw_y) else "regression"
    try:
        y = [int(s) for s in raw_y] if task == "classification" else [float(s) for s in raw_y]
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from None
    if task == "classification" and n_classes is None:
        n_classes = max(2, max(y) + 1)
    return Dataset(np.array(X).reshape(len(X), p), np.array(y), 0, "csv", task,
                   n_classes if task == "classification" else 0)
