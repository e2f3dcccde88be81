"""Deterministic training algorithms and their leave-one-out outputs.

Every model minimises the objective

    J_S(w) = (1/N) * sum_{j in S} d(w, z_j) + lam * ||w||^2

where ``S`` is the training index set and ``N`` is the size of the *base*
dataset. On the full dataset this is the usual mean loss plus an L2
penalty; on a leave-one-out view the penalty keeps its full-data weight, so
dropping a sample removes exactly one data term. That makes ridge
leave-one-out solutions rank-one downdates of the full solution and makes
the influence approximation exact to first order.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .datasets import Dataset, LooView, loo_view, make_rng
from .exceptions import ConfigError, DomainError, NumericalError

__all__ = [
    "TrainConfig",
    "LooWeights",
    "LooPredictions",
    "SgdTrace",
    "get_model",
    "train",
    "train_loo",
    "predict",
    "predict_all",
    "per_sample_gradient",
    "hessian",
    "default_damping",
    "influence_loo",
    "sgd_divergence",
    "prediction_jacobian",
]

MODELS = ("ridge", "logistic", "mlp")
OPTIMIZERS = ("closed-form", "full-batch-gd", "sgd")
MAX_HIDDEN = 32
STREAM_SGD_ORDER = 3
STREAM_INIT = 4


@dataclass(frozen=True)
class TrainConfig:
    """Model, optimizer and seeds for a deterministic trainer.

    ``step_clip`` is sqrt(gamma): every update step is rescaled to norm at
    most ``step_clip``, which makes the update rule gamma-bounded. With
    momentum the clip applies to the post-momentum step.
    """

    model: str = "ridge"
    lam: float = 0.1
    hidden: int = 16
    optimizer: str = "closed-form"
    lr: float = 0.1
    steps: int = 200
    batch: int = 1
    step_clip: Optional[float] = None
    momentum: float = 0.0
    init_seed: int = 0
    sgd_order_seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.optimizer == "closed-form" and self.model != "ridge":
            raise ConfigError("closed-form training is only valid for ridge")
        if self.optimizer != "closed-form":
            if self.lr <= 0:
                raise ConfigError("learning rate must be positive")
            if self.steps < 1:
                raise ConfigError("steps must be >= 1")
        if self.optimizer == "sgd" and self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.step_clip is not None and self.step_clip <= 0:
            raise ConfigError("step_clip must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.model == "mlp":
            if not 1 <= self.hidden <= MAX_HIDDEN:
                raise ConfigError(f"mlp hidden units must be in [1, {MAX_HIDDEN}]")
            if self.optimizer != "full-batch-gd":
                raise ConfigError("mlp is trained with full-batch-gd only")

    @property
    def gamma(self) -> Optional[float]:
        return None if self.step_clip is None else self.step_clip ** 2


# --------------------------------------------------------------------------
# models


class _Ridge:
    """Linear regression without intercept; d(w, z) = (x^T w - y)^2."""

    name = "ridge"
    is_classifier = False

    def __init__(self, p, n_classes, config):
        self.p = p

    @property
    def n_params(self):
        return self.p

    def init(self, config):
        return np.zeros(self.p)

    def predict(self, w, X):
        return (X @ w)[:, None]

    def data_loss(self, w, X, y):
        return (X @ w - y) ** 2

    def data_grad(self, w, X, y):
        return 2.0 * (X @ w - y)[:, None] * X

    def data_hessian(self, w, X, y):
        return (2.0 / X.shape[0]) * (X.T @ X)

    def pred_jacobian(self, w, X):
        return X[:, None, :]


class _Softmax:
    """Shared pieces of the softmax classifiers."""

    is_classifier = True

    @staticmethod
    def _softmax(Z):
        Z = Z - Z.max(axis=1, keepdims=True)
        E = np.exp(Z)
        return E / E.sum(axis=1, keepdims=True)

    def predict(self, w, X):
        return self._softmax(self.logits(w, X))

    def data_loss(self, w, X, y):
        Z = self.logits(w, X)
        Z = Z - Z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(Z).sum(axis=1))
        return lse - Z[np.arange(X.shape[0]), y]

    def _residual(self, w, X, y):
        P = self.predict(w, X)
        P[np.arange(X.shape[0]), y] -= 1.0
        return P

    def data_hessian(self, w, X, y):
        # exact for linear logits, Gauss-Newton otherwise
        P = self.predict(w, X)
        J = self.logit_jacobian(w, X)
        S = P[:, :, None] * (np.eye(P.shape[1])[None] - P[:, None, :])
        return np.einsum("mck,mce,mel->kl", J, S, J) / X.shape[0]

    def pred_jacobian(self, w, X):
        P = self.predict(w, X)
        J = self.logit_jacobian(w, X)
        S = P[:, :, None] * (np.eye(P.shape[1])[None] - P[:, None, :])
        return np.einsum("mce,mek->mck", S, J)


def _augment(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


class _Logistic(_Softmax):
    """Multinomial logistic regression with bias; weights are (C, p+1) row-major."""

    name = "logistic"

    def __init__(self, p, n_classes, config):
        self.p = p
        self.C = n_classes

    @property
    def n_params(self):
        return self.C * (self.p + 1)

    def init(self, config):
        return np.zeros(self.n_params)

    def logits(self, w, X):
        return _augment(X) @ w.reshape(self.C, self.p + 1).T

    def data_grad(self, w, X, y):
        R = self._residual(w, X, y)
        Xa = _augment(X)
        return (R[:, :, None] * Xa[:, None, :]).reshape(X.shape[0], -1)

    def logit_jacobian(self, w, X):
        Xa = _augment(X)
        m, C, q = X.shape[0], self.C, self.p + 1
        J = np.zeros((m, C, C * q))
        for c in range(C):
            J[:, c, c * q:(c + 1) * q] = Xa
        return J


class _MLP(_Softmax):
    """One tanh hidden layer; parameters are [A (h, p+1), V (C, h+1)] flattened."""

    name = "mlp"

    def __init__(self, p, n_classes, config):
        self.p = p
        self.C = n_classes
        self.h = config.hidden

    @property
    def n_params(self):
        return self.h * (self.p + 1) + self.C * (self.h + 1)

    def init(self, config):
        rng = make_rng(config.init_seed, STREAM_INIT)
        A = rng.standard_normal((self.h, self.p + 1)) / np.sqrt(self.p + 1)
        V = rng.standard_normal((self.C, self.h + 1)) / np.sqrt(self.h + 1)
        return np.concatenate([A.ravel(), V.ravel()])

    def _unpack(self, w):
        k = self.h * (self.p + 1)
        return w[:k].reshape(self.h, self.p + 1), w[k:].reshape(self.C, self.h + 1)

    def _hidden(self, w, X):
        A, V = self._unpack(w)
        Xa = _augment(X)
        H = np.tanh(Xa @ A.T)
        return Xa, H, _augment(H), A, V

    def logits(self, w, X):
        _, _, Ha, _, V = self._hidden(w, X)
        return Ha @ V.T

    def data_grad(self, w, X, y):
        Xa, H, Ha, A, V = self._hidden(w, X)
        R = self._residual(w, X, y)
        gV = R[:, :, None] * Ha[:, None, :]
        dpre = (R @ V[:, :self.h]) * (1.0 - H ** 2)
        gA = dpre[:, :, None] * Xa[:, None, :]
        m = X.shape[0]
        return np.hstack([gA.reshape(m, -1), gV.reshape(m, -1)])

    def logit_jacobian(self, w, X):
        Xa, H, Ha, A, V = self._hidden(w, X)
        m, C, h, q = X.shape[0], self.C, self.h, self.p + 1
        # dz_c / dA_{k,l} = V_{c,k} (1 - a_k^2) x_l
        JA = (V[None, :, :h] * (1.0 - H ** 2)[:, None, :])[:, :, :, None] * Xa[:, None, None, :]
        JV = np.zeros((m, C, C, h + 1))
        for c in range(C):
            JV[:, c, c, :] = Ha
        return np.concatenate([JA.reshape(m, C, h * q), JV.reshape(m, C, C * (h + 1))], axis=2)


_MODEL_TYPES = {"ridge": _Ridge, "logistic": _Logistic, "mlp": _MLP}


def get_model(config: TrainConfig, p: int, n_classes: int = 2):
    """Instantiate the model described by ``config`` for ``p`` features."""
    return _MODEL_TYPES[config.model](p, n_classes, config)


def _check_task(config: TrainConfig, ds: Dataset):
    if config.model == "ridge" and ds.task != "regression":
        # ridge on class labels is allowed: labels are treated as reals
        return
    if config.model != "ridge" and ds.task != "classification":
        raise ConfigError(f"{config.model} needs a classification dataset")


# --------------------------------------------------------------------------
# training


def _arrays(data: Union[Dataset, LooView]):
    if isinstance(data, LooView):
        base = data.base
        idx = data.indices
    elif isinstance(data, Dataset):
        base = data
        idx = np.arange(data.n)
    else:
        raise DomainError(f"expected Dataset or LooView, got {type(data).__name__}")
    return base, idx


def _closed_form(X, y, N, lam):
    A = X.T @ X + N * lam * np.eye(X.shape[1])
    try:
        c = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("ridge normal equations are singular; set lam > 0") from exc
    return linalg.cho_solve(c, X.T @ y)


def _order_stream(N, excluded, seed):
    """Endless stream of base indices: seeded permutations with ``excluded`` skipped."""
    epoch = 0
    while True:
        perm = make_rng(seed, STREAM_SGD_ORDER, epoch).permutation(N)
        for j in perm:
            if j not in excluded:
                yield j
        epoch += 1


def _iterate(model, config, base, idx, record=False):
    """Run GD/SGD. Returns final weights, and the trajectory if ``record``."""
    X_all = base.features
    y_all = base.labels if model.is_classifier else base.labels.astype(np.float64)
    N = base.n
    X, y = X_all[idx], y_all[idx]
    w = model.init(config)
    v = np.zeros_like(w)
    lam = config.lam
    clip = config.step_clip
    traj = np.empty((config.steps + 1, w.size)) if record else None
    norms = np.empty(config.steps) if record else None
    if record:
        traj[0] = w
    if config.optimizer == "sgd":
        excluded = set(range(N)) - set(int(i) for i in idx)
        stream = _order_stream(N, excluded, config.sgd_order_seed)
        scale = len(idx) / N
    for t in range(config.steps):
        if config.optimizer == "sgd":
            batch = np.fromiter((next(stream) for _ in range(config.batch)), dtype=np.int64,
                                count=config.batch)
            g = scale * model.data_grad(w, X_all[batch], y_all[batch]).mean(axis=0)
        else:
            g = model.data_grad(w, X, y).sum(axis=0) / N
        g = g + 2.0 * lam * w
        v = config.momentum * v + g
        step = -config.lr * v
        if clip is not None:
            norm = np.sqrt(np.dot(step, step))
            if norm > clip:
                step = step * (clip / norm)
        w = w + step
        if record:
            traj[t + 1] = w
            norms[t] = np.sqrt(np.dot(step, step))
    if not np.all(np.isfinite(w)):
        raise NumericalError("training diverged (non-finite weights); lower the learning rate")
    return w, traj, norms


def train(data: Union[Dataset, LooView], config: TrainConfig) -> np.ndarray:
    """Train on a dataset or leave-one-out view; returns the weight vector.

    Identical inputs give bit-identical weights.
    """
    base, idx = _arrays(data)
    _check_task(config, base)
    model = get_model(config, base.p, max(base.n_classes, 2))
    if config.optimizer == "closed-form":
        return _closed_form(base.features[idx], base.labels[idx].astype(np.float64), base.n, config.lam)
    w, _, _ = _iterate(model, config, base, idx)
    return w


@dataclass(frozen=True, eq=False)
class LooWeights:
    """Leave-one-out weights: row ``i`` is ``w_{-i}``; absent rows are NaN.

    ``flagged`` lists rows that could not be computed (e.g. leverage-one
    samples in the exact ridge oracle).
    """

    weights: np.ndarray
    full_weights: np.ndarray
    config: Optional[TrainConfig] = None
    populated: Optional[np.ndarray] = None
    flagged: tuple = ()

    def __post_init__(self):
        W = np.array(self.weights, dtype=np.float64)
        if W.ndim != 2:
            raise DomainError("weights must be an n x K matrix")
        pop = ~np.isnan(W).any(axis=1) if self.populated is None else np.array(self.populated, dtype=bool)
        if pop.shape != (W.shape[0],):
            raise DomainError("populated mask has the wrong length")
        if not np.all(np.isfinite(W[pop])):
            raise DomainError("populated LOO rows must be finite")
        W[~pop] = np.nan
        full = np.array(self.full_weights, dtype=np.float64).ravel()
        if full.size != W.shape[1]:
            raise DomainError("full_weights length differs from K")
        for a in (W, pop, full):
            a.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "populated", pop)
        object.__setattr__(self, "full_weights", full)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def K(self) -> int:
        return self.weights.shape[1]

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.populated)

    @property
    def is_subset(self) -> bool:
        return bool(not self.populated.all())

    def rows(self) -> np.ndarray:
        """Populated rows in ascending index order."""
        return self.weights[self.populated]


@dataclass(frozen=True, eq=False)
class LooPredictions:
    """``preds[r, j]`` is the prediction of ``w_{-indices[r]}`` on ``x_j``."""

    preds: np.ndarray
    indices: Optional[np.ndarray] = None
    probabilities: bool = False

    def __post_init__(self):
        P = np.array(self.preds, dtype=np.float64)
        if P.ndim == 2:
            P = P[:, :, None]
        if P.ndim != 3:
            raise DomainError("preds must be an s x n x d tensor")
        if not np.all(np.isfinite(P)):
            raise DomainError("predictions must be finite")
        idx = np.arange(P.shape[0]) if self.indices is None else np.array(self.indices, dtype=np.int64)
        if idx.shape != (P.shape[0],):
            raise DomainError("indices length must match the number of prediction rows")
        if self.probabilities:
            if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-9):
                raise DomainError("probability predictions must lie in the simplex")
        P.setflags(write=False)
        idx.setflags(write=False)
        object.__setattr__(self, "preds", P)
        object.__setattr__(self, "indices", idx)

    @property
    def n(self) -> int:
        return self.preds.shape[1]

    @property
    def d(self) -> int:
        return self.preds.shape[2]

    @property
    def is_subset(self) -> bool:
        return self.preds.shape[0] < self.n

    def flattened(self) -> np.ndarray:
        """Rows flattened in (sample j, output coordinate) order."""
        return self.preds.reshape(self.preds.shape[0], -1)


def train_loo(ds: Dataset, config: TrainConfig, subset: Optional[Sequence[int]] = None,
              threads: int = 1) -> LooWeights:
    """Retrain once per removed index (all ``n``, or just ``subset``).

    Rows are independent, so ``threads`` never changes the result.
    """
    if subset is None:
        rows = list(range(ds.n))
    else:
        rows = [int(i) for i in subset]
        if len(set(rows)) != len(rows):
            raise DomainError("subset indices must be distinct")
        for i in rows:
            if not 0 <= i < ds.n:
                raise DomainError(f"subset index {i} out of range for n={ds.n}")
        rows.sort()

    def one(i):
        try:
            return train(loo_view(ds, i), config)
        except NumericalError as exc:
            err = NumericalError(f"LOO row {i}: {exc}")
            err.index = i
            raise err from exc

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, rows))
    else:
        results = [one(i) for i in rows]
    full = train(ds, config)
    W = np.full((ds.n, full.size), np.nan)
    for i, w in zip(rows, results):
        W[i] = w
    pop = np.zeros(ds.n, dtype=bool)
    pop[rows] = True
    return LooWeights(W, full, config, pop)


def predict(w, X, config: TrainConfig, n_classes: int = 2) -> np.ndarray:
    """Model outputs of weights ``w`` on rows of ``X``; shape ``(m, d)``."""
    X = np.asarray(X, dtype=np.float64)
    model = get_model(config, X.shape[1], n_classes)
    return model.predict(np.asarray(w, dtype=np.float64), X)


def predict_all(ds: Dataset, loo: LooWeights, rows: Optional[Sequence[int]] = None) -> LooPredictions:
    """Predictions of every requested ``w_{-i}`` on the whole dataset."""
    if loo.config is None:
        raise DomainError("LooWeights carries no TrainConfig; cannot evaluate the model")
    rows = loo.indices if rows is None else np.asarray(rows, dtype=np.int64)
    for i in rows:
        if not (0 <= i < loo.n) or not loo.populated[i]:
            raise DomainError(f"LOO row {int(i)} is absent")
    model = get_model(loo.config, ds.p, max(ds.n_classes, 2))
    P = np.stack([model.predict(loo.weights[i], ds.features) for i in rows])
    return LooPredictions(P, rows, probabilities=model.is_classifier)


# --------------------------------------------------------------------------
# local quantities


def _model_for(config, ds):
    return get_model(config, ds.p, max(ds.n_classes, 2))


def per_sample_gradient(w, x, y, config: TrainConfig, include_penalty: bool = True) -> np.ndarray:
    """Gradient of ``d(w, z) + lam ||w||^2`` for one sample ``z = (x, y)``.

    With the penalty included these gradients average to zero at the
    optimum of the full-data objective.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    model = get_model(config, x.shape[1])
    yy = np.atleast_1d(y).astype(np.int64 if model.is_classifier else np.float64)
    loss = model.data_loss(w, x, yy)
    if not np.all(np.isfinite(loss)):
        raise NumericalError("non-finite loss at w")
    g = model.data_grad(w, x, yy)[0]
    if include_penalty:
        g = g + 2.0 * config.lam * w
    return g


def per_sample_gradients(w, ds: Dataset, config: TrainConfig, include_penalty: bool = False) -> np.ndarray:
    """All per-sample gradients as an ``(n, K)`` matrix."""
    model = _model_for(config, ds)
    w = np.asarray(w, dtype=np.float64)
    y = ds.labels if model.is_classifier else ds.labels.astype(np.float64)
    if not np.all(np.isfinite(model.data_loss(w, ds.features, y))):
        raise NumericalError("non-finite loss at w")
    G = model.data_grad(w, ds.features, y)
    if include_penalty:
        G = G + 2.0 * config.lam * w
    return G


def hessian(w, ds: Dataset, config: TrainConfig) -> np.ndarray:
    """Hessian of the mean objective at ``w``.

    Exact for ridge and logistic; the Gauss-Newton surrogate for the MLP.
    """
    model = _model_for(config, ds)
    w = np.asarray(w, dtype=np.float64)
    y = ds.labels if model.is_classifier else ds.labels.astype(np.float64)
    H = model.data_hessian(w, ds.features, y) + 2.0 * config.lam * np.eye(w.size)
    if not np.all(np.isfinite(H)):
        raise NumericalError("non-finite Hessian")
    return 0.5 * (H + H.T)


def default_damping(H) -> float:
    """1e-4 * trace(H) / K."""
    H = np.asarray(H)
    return 1e-4 * float(np.trace(H)) / H.shape[0]


def influence_loo(w_star, ds: Dataset, config: TrainConfig, damping: Optional[float] = None,
                  H: Optional[np.ndarray] = None) -> np.ndarray:
    """First-order leave-one-out shifts ``g_i ~ w*_{-i} - w*``.

    ``g_i = (1/n) (H + damping I)^{-1} grad d(z_i, w*)`` with ``H`` the
    Hessian of the mean objective; one Cholesky factorization, ``n`` solves.
    """
    w_star = np.asarray(w_star, dtype=np.float64)
    if H is None:
        H = hessian(w_star, ds, config)
    if damping is None:
        damping = default_damping(H)
    G = per_sample_gradients(w_star, ds, config, include_penalty=False)
    try:
        c = linalg.cho_factor(H + damping * np.eye(H.shape[0]), lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("damped Hessian is not positive definite; increase damping") from exc
    return linalg.cho_solve(c, G.T).T / ds.n


def prediction_jacobian(w, X, config: TrainConfig, n_classes: int = 2) -> np.ndarray:
    """Jacobian of the flattened predictions on ``X`` w.r.t. the weights; ``(m*d, K)``."""
    X = np.asarray(X, dtype=np.float64)
    model = get_model(config, X.shape[1], n_classes)
    J = model.pred_jacobian(np.asarray(w, dtype=np.float64), X)
    return J.reshape(-1, J.shape[-1])


# --------------------------------------------------------------------------
# SGD stability


@dataclass(frozen=True, eq=False)
class SgdTrace:
    """Per-step update norms (max over both runs) and divergence ``delta_t``.

    ``delta[t]`` is ``||w_{t+1} - w'_{t+1}||``; both runs start at the same
    weights so the implicit ``delta_0`` is zero.
    """

    update_norms: np.ndarray
    delta: np.ndarray
    gamma: float

    @property
    def T(self) -> int:
        return self.delta.size

    @property
    def bound(self) -> float:
        """2 T sqrt(gamma)."""
        return 2.0 * self.T * np.sqrt(self.gamma)


def sgd_divergence(ds: Dataset, config: TrainConfig, i: int, j: int) -> SgdTrace:
    """Run the clipped optimizer on the ``-i`` and ``-j`` views in lockstep."""
    if config.step_clip is None:
        raise ConfigError("sgd_divergence needs step_clip (a gamma-bounded update)")
    if config.optimizer == "closed-form":
        raise ConfigError("sgd_divergence needs an iterative optimizer")
    model = _model_for(config, ds)
    runs = []
    for r in (i, j):
        base, idx = _arrays(loo_view(ds, r))
        _, traj, norms = _iterate(model, config, base, idx, record=True)
        runs.append((traj, norms))
    (ta, na), (tb, nb) = runs
    diff = ta[1:] - tb[1:]
    delta = np.sqrt(np.einsum("tk,tk->t", diff, diff))
    return SgdTrace(np.maximum(na, nb), delta, config.gamma)
