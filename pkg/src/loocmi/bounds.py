"""Closed-form leave-one-out CMI bounds and the generalization bounds built on them."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .exceptions import ConfigError, DomainError
from .losses import per_sample_loss
from .numerics import CovSpec, c_n, log_sum_exp, pairwise_kl, pairwise_sq_mahalanobis
from .trainers import LooPredictions, LooWeights, get_model

__all__ = [
    "LossTable",
    "StabilityProfile",
    "StabilityBounds",
    "GapEstimate",
    "loo_cv",
    "lemma1_bound",
    "verify_lemma1",
    "cmi_upper_from_kl",
    "cmi_upper",
    "loo_cmi_upper",
    "floo_cmi_upper",
    "jensen_cmi_upper",
    "gen_bound_from_cmi",
    "stability_bounds",
    "measure_stability",
    "local_bound",
    "measured_gap",
    "matched_prediction_sigma",
]

RANGE_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class LossTable:
    """Per-sample losses in [0, 1] and the id of the loss that produced them."""

    values: np.ndarray
    loss_id: str = "unspecified"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size < 2:
            raise DomainError("a loss table needs n >= 2 entries")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise DomainError("losses must lie in [0, 1]; clip upstream and record the cap")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.size


def loo_cv(losses: LossTable, u: int) -> float:
    """Mean loss over the samples other than ``u`` minus the loss on ``u``."""
    v = losses.values
    n = v.size
    if isinstance(u, (bool, np.bool_)) or int(u) != u or not 0 <= int(u) < n:
        raise DomainError(f"index {u!r} out of range for n={n}")
    u = int(u)
    return float((math.fsum(v) - v[u]) / (n - 1) - v[u])


def lemma1_bound(n: int, t: float) -> float:
    """exp(t^2 c_n^2 / 8)."""
    return math.exp(t * t * c_n(n) ** 2 / 8.0)


def verify_lemma1(n: int, t: float, grid_step: float = 0.05) -> dict:
    """Brute-force the loo-cv moment generating function over a loss grid.

    Maximizes ``E_u exp(t * loo_cv(l, u))`` over ``l in {0, step, ..., 1}^n``
    and compares with ``exp(t^2 c_n^2 / 8)``.
    """
    if not 2 <= n <= 5:
        raise ConfigError(f"grid brute force supports 2 <= n <= 5, got {n}")
    if t <= 0:
        raise DomainError("t must be positive")
    steps = round(1.0 / grid_step)
    if steps < 1 or abs(steps * grid_step - 1.0) > 1e-9:
        raise ConfigError(f"grid_step must divide 1, got {grid_step}")
    grid = np.arange(steps + 1) / steps
    # every loss vector as a row; (steps+1)^n rows
    L = np.array(list(itertools.product(grid, repeat=n)))
    total = L.sum(axis=1, keepdims=True)
    cv = (total - L) / (n - 1) - L
    mgf = np.exp(t * cv).mean(axis=1)
    k = int(np.argmax(mgf))
    bound = lemma1_bound(n, t)
    max_mgf = float(mgf[k])
    return {"n": n, "t": float(t), "max_mgf": max_mgf, "bound": bound,
            "argmax": L[k].tolist(), "holds": bool(max_mgf <= bound)}


# --------------------------------------------------------------------------
# CMI upper bounds


def cmi_upper_from_kl(kl: np.ndarray) -> float:
    """``ln s - (1/s) sum_i ln sum_j exp(-KL_ij)`` for an s x s KL matrix."""
    kl = np.asarray(kl, dtype=np.float64)
    s = kl.shape[0]
    if s < 2 or kl.shape != (s, s):
        raise DomainError("need a square KL matrix with at least two rows")
    row_lse = log_sum_exp(-kl, axis=1)
    val = math.log(s) - math.fsum(row_lse) / s
    # each row holds an exp(0) term, so the value is in [0, ln s] up to rounding
    return float(min(max(val, 0.0), math.log(s)))


def cmi_upper(means, cov: CovSpec) -> float:
    """Theorem-form upper bound for a Gaussian location mixture with shared ``cov``."""
    return cmi_upper_from_kl(pairwise_kl(means, cov))


def _weight_rows(loo: Union[LooWeights, np.ndarray]) -> np.ndarray:
    if isinstance(loo, LooWeights):
        rows = loo.rows()
    else:
        rows = np.asarray(loo, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[:, None]
    if rows.shape[0] < 2:
        raise DomainError("need at least two populated LOO rows")
    return rows


def loo_cmi_upper(loo: Union[LooWeights, np.ndarray], cov: CovSpec) -> float:
    """Upper bound on loo-CMI of the weights under N(0, cov) noise, in nats.

    With a subset of rows the average and the inner sum both run over the
    populated rows and ``ln s`` replaces ``ln n``.
    """
    return cmi_upper(_weight_rows(loo), cov)


def _pred_rows(preds: Union[LooPredictions, np.ndarray]) -> np.ndarray:
    if isinstance(preds, LooPredictions):
        rows = preds.flattened()
    else:
        P = np.asarray(preds, dtype=np.float64)
        if P.ndim == 2:
            P = P[:, :, None]
        if P.ndim != 3:
            raise DomainError("predictions must be an s x n x d tensor")
        rows = P.reshape(P.shape[0], -1)
    if rows.shape[0] < 2:
        raise DomainError("need at least two prediction rows")
    if not np.all(np.isfinite(rows)):
        raise DomainError("prediction tensor has missing or non-finite entries")
    return rows


def floo_cmi_upper(preds: Union[LooPredictions, np.ndarray], sigma: float) -> float:
    """Upper bound on floo-CMI with isotropic prediction noise ``sigma``.

    Rows are flattened sample-major: ``(j ascending, output coordinate ascending)``.
    The removed sample's own prediction is included.
    """
    return cmi_upper(_pred_rows(preds), CovSpec.isotropic(sigma))


def jensen_cmi_upper(means, cov: CovSpec) -> float:
    """Convexity baseline: the average pairwise KL. Never below :func:`cmi_upper`."""
    if isinstance(means, LooWeights):
        rows = means.rows()
    elif isinstance(means, LooPredictions):
        rows = means.flattened()
    else:
        rows = _weight_rows(means)
    kl = pairwise_kl(rows, cov)
    return float(math.fsum(kl.ravel()) / kl.size)


def gen_bound_from_cmi(cmi: float, n: int) -> float:
    """``(c_n / sqrt 2) * sqrt(cmi)``."""
    if not cmi >= 0:
        raise DomainError(f"cmi must be non-negative, got {cmi}")
    return c_n(n) / math.sqrt(2.0) * math.sqrt(cmi)


# --------------------------------------------------------------------------
# stability


@dataclass(frozen=True)
class StabilityProfile:
    """Stability constants of a trainer.

    Values from :func:`measure_stability` are empirical maxima over the
    available LOO pairs, hence lower bounds on the definitional suprema.
    """

    epsilon: float = 0.0
    beta: float = 0.0
    beta1: float = 0.0
    lipschitz_L: float = 1.0
    gamma: float = 0.0
    T: int = 0
    d: int = 1
    empirical: bool = False

    def __post_init__(self):
        for name in ("epsilon", "beta", "beta1", "gamma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and non-negative, got {v}")
        if not (np.isfinite(self.lipschitz_L) and self.lipschitz_L > 0):
            raise DomainError("lipschitz_L must be positive")
        if self.T < 0 or self.d < 1:
            raise DomainError("T must be >= 0 and d >= 1")


@dataclass(frozen=True)
class StabilityBounds:
    thm5: float
    thm6: float
    n: int
    T: int
    gamma: float

    def lemma5(self, sigma: float) -> float:
        """SGD bound ``c_n T sqrt(gamma) / sigma`` for isotropic weight noise."""
        if not sigma > 0:
            raise DomainError("sigma must be positive")
        return math.sqrt(c_n(self.n) ** 2 * self.T ** 2 * self.gamma / sigma ** 2)


def stability_bounds(profile: StabilityProfile, cov: CovSpec, n: int, K: Optional[int] = None) -> StabilityBounds:
    """Deterministic-algorithm bounds from stability constants.

    ``thm5 = sqrt(4 c_n eps L sqrt(tr Sigma))`` and
    ``thm6 = sqrt(4 c_n L sqrt(n d (n beta^2 + 2 beta1^2)))``. ``K`` is only
    needed for the trace of isotropic noise.
    """
    cn = c_n(n)
    L = profile.lipschitz_L
    thm5 = math.sqrt(4.0 * cn * profile.epsilon * L * math.sqrt(cov.trace(K)))
    inner = n * profile.d * (n * profile.beta ** 2 + 2.0 * profile.beta1 ** 2)
    thm6 = math.sqrt(4.0 * cn * L * math.sqrt(inner))
    return StabilityBounds(thm5, thm6, n, profile.T, profile.gamma)


def measure_stability(loo: Union[LooWeights, LooPredictions], cov: Optional[CovSpec] = None,
                      probe_preds=None, lipschitz_L: float = 1.0) -> StabilityProfile:
    """Empirical stability constants from LOO outputs.

    For weights: ``epsilon = max_{i,j} sqrt(a^T Sigma^{-1} a)`` with
    ``a = w_{-i} - w_{-j}``. For predictions: ``beta`` is the largest change
    on samples shared by both training sets, and ``beta1`` the largest
    change on ``probe_preds`` (``(s, m, d)`` outputs on fresh inputs).
    """
    if isinstance(loo, LooWeights):
        if cov is None:
            raise DomainError("weight stability needs a covariance")
        D = pairwise_sq_mahalanobis(loo.rows(), cov)
        return StabilityProfile(epsilon=float(np.sqrt(D.max())), lipschitz_L=lipschitz_L,
                                d=1, empirical=True)
    if not isinstance(loo, LooPredictions):
        raise DomainError("expected LooWeights or LooPredictions")
    P = loo.preds
    idx = loo.indices
    s, n, d = P.shape
    beta2 = 0.0
    for a in range(s):
        diff = P[a][None] - P  # (s, n, d)
        sq = np.einsum("snd,snd->sn", diff, diff)
        # samples removed in either run are not shared
        sq[:, idx[a]] = 0.0
        sq[np.arange(s), idx] = 0.0
        beta2 = max(beta2, float(sq.max()))
    beta1 = 0.0
    if probe_preds is not None:
        Q = np.asarray(probe_preds, dtype=np.float64)
        if Q.ndim == 2:
            Q = Q[:, :, None]
        for a in range(Q.shape[0]):
            diff = Q[a][None] - Q
            beta1 = max(beta1, float(np.sqrt(np.einsum("smd,smd->sm", diff, diff).max())))
    return StabilityProfile(beta=math.sqrt(beta2), beta1=beta1, lipschitz_L=lipschitz_L,
                            d=d, empirical=True)


def local_bound(g, H) -> float:
    """Influence-function bound: Theorem form with ``g_i`` and ``Sigma^{-1} = H``."""
    H = np.asarray(H, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] < 2:
        raise DomainError("need at least two influence vectors")
    H = 0.5 * (H + H.T)
    evals = np.linalg.eigvalsh(H)
    if evals.min() < -1e-12 * max(1.0, abs(evals).max()):
        raise DomainError("Hessian is not PSD after damping")
    if evals.max() <= 0.0:
        # flat limit: every exponent vanishes
        return 0.0
    # PSD quadratic form evaluated directly; a singular H is allowed here
    diff_kl = np.empty((g.shape[0], g.shape[0]))
    for i in range(g.shape[0]):
        d = g[i][None, :] - g
        diff_kl[i] = 0.5 * np.einsum("jk,jk->j", d @ H, d)
    np.fill_diagonal(diff_kl, 0.0)
    return cmi_upper_from_kl(np.maximum(diff_kl, 0.0))


# --------------------------------------------------------------------------
# measured generalization gap


@dataclass(frozen=True)
class GapEstimate:
    """LOO-based and held-out estimates of the generalization gap."""

    loo_gap: float
    loo_std_err: float
    heldout_gap: Optional[float]
    heldout_std_err: Optional[float]
    train_loss: Optional[float]
    test_loss: Optional[float]
    loss_id: str


def measured_gap(loo: LooWeights, ds, test=None, loss_id: str = "zero-one", cap=None) -> GapEstimate:
    """Estimate the gap two ways.

    The LOO estimate is ``|mean_u loo_cv(losses of w_{-u}, u)|`` over the
    populated rows; its standard error is the sample standard deviation of
    the per-``u`` values over ``sqrt(s)``. The held-out estimate compares the
    full-data model's test and training losses.
    """
    if loo.config is None:
        raise DomainError("LooWeights carries no TrainConfig")
    model = get_model(loo.config, ds.p, max(ds.n_classes, 2))
    vals = []
    for u in loo.indices:
        preds = model.predict(loo.weights[u], ds.features)
        table = LossTable(per_sample_loss(preds, ds.labels, loss_id, cap), loss_id)
        vals.append(loo_cv(table, u))
    vals = np.array(vals)
    s = vals.size
    loo_gap = abs(math.fsum(vals) / s)
    se = float(np.std(vals, ddof=1) / math.sqrt(s)) if s > 1 else float("inf")
    held = held_se = tr = te = None
    if test is not None:
        tr_l = per_sample_loss(model.predict(loo.full_weights, ds.features), ds.labels, loss_id, cap)
        te_l = per_sample_loss(model.predict(loo.full_weights, test.features), test.labels, loss_id, cap)
        tr, te = float(tr_l.mean()), float(te_l.mean())
        held = abs(te - tr)
        held_se = float(math.sqrt(np.var(te_l, ddof=1) / te_l.size + np.var(tr_l, ddof=1) / tr_l.size))
    return GapEstimate(min(loo_gap, 1.0), se, held, held_se, tr, te, loss_id)


def matched_prediction_sigma(jacobian, cov: CovSpec) -> float:
    """Prediction noise that makes prediction CMI a processed version of weight CMI.

    With ``A = J Sigma^{1/2}`` and ``sigma = ||A||_2`` the map from whitened
    noisy weights to ``h / sigma`` is a contraction, so the isotropic
    prediction noise splits as ``A Z + Z'`` with ``Z'`` independent. Exact
    for linear predictors; a first-order match otherwise.
    """
    J = np.asarray(jacobian, dtype=np.float64)
    cov.check_dim(J.shape[1])
    # A = J Sigma^{1/2}: columns of J scaled by the unwhitening map
    A = cov.unwhiten(np.eye(J.shape[1])).T
    s = np.linalg.norm(J @ A, ord=2)
    if not s > 0:
        raise DomainError("predictions do not depend on the weights")
    return float(s)
