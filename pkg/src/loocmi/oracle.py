"""Independent ground truth for the closed-form bounds.

Monte-Carlo mutual information of Gaussian location mixtures, and the
exact leave-one-out ridge solutions by rank-one downdates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .datasets import Dataset, make_rng
from .exceptions import DomainError, NumericalError
from .numerics import CovSpec
from .trainers import LooPredictions, LooWeights, TrainConfig

__all__ = ["McEstimate", "mc_cmi", "mc_floo_cmi", "exact_loo_ridge", "DEFAULT_SAMPLES"]

DEFAULT_SAMPLES = 20_000
MIN_SAMPLES = 1000
STREAM_MC = 5
_CHUNK = 4096


@dataclass(frozen=True)
class McEstimate:
    """Monte-Carlo estimate of a conditional mutual information, in nats."""

    value: float
    std_err: float
    samples: int
    seed: int

    def to_dict(self) -> dict:
        return {"value": self.value, "std_err": self.std_err,
                "samples": self.samples, "seed": self.seed}


def _stratum(Y: np.ndarray, u: int, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Per-draw log density ratio ln p(w|u) - ln mean_j p(w|j), whitened space."""
    n, K = Y.shape
    out = np.empty(samples)
    for start in range(0, samples, _CHUNK):
        stop = min(start + _CHUNK, samples)
        Z = rng.standard_normal((stop - start, K))
        W = Y[u] + Z
        diff = W[:, None, :] - Y[None, :, :]
        logp = -0.5 * np.einsum("mjk,mjk->mj", diff, diff)
        mx = logp.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        out[start:stop] = -0.5 * np.einsum("mk,mk->m", Z, Z) - lse + math.log(n)
    # the sum over j contains the u-th term, so each draw is at most ln n
    return np.minimum(out, math.log(n))


def mc_cmi(means, cov: CovSpec, samples: int = DEFAULT_SAMPLES, seed: int = 0) -> McEstimate:
    """Estimate I(W; U) for W | U=u ~ N(means[u], cov) with U uniform.

    Stratified: exactly ``samples`` draws per component, each from its own
    RNG substream. The value is the mean of stratum means in index order;
    ``std_err`` is the standard error of that stratified mean.
    """
    M = np.asarray(means, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2 or M.shape[0] < 1:
        raise DomainError("means must be an n x K array")
    if samples < MIN_SAMPLES:
        raise DomainError(f"samples must be >= {MIN_SAMPLES}")
    n = M.shape[0]
    Y = cov.whiten(M)
    stratum_means = np.empty(n)
    stratum_vars = np.empty(n)
    for u in range(n):
        vals = _stratum(Y, u, samples, make_rng(seed, STREAM_MC, u))
        stratum_means[u] = vals.mean()
        stratum_vars[u] = vals.var(ddof=1)
    value = math.fsum(stratum_means) / n
    std_err = math.sqrt(math.fsum(stratum_vars) / samples) / n
    return McEstimate(float(value), float(std_err), int(samples), int(seed))


def mc_floo_cmi(preds, sigma: float, samples: int = DEFAULT_SAMPLES, seed: int = 0) -> McEstimate:
    """:func:`mc_cmi` on flattened prediction rows with isotropic ``sigma``."""
    if isinstance(preds, LooPredictions):
        rows = preds.flattened()
    else:
        P = np.asarray(preds, dtype=np.float64)
        rows = P.reshape(P.shape[0], -1)
    return mc_cmi(rows, CovSpec.isotropic(sigma), samples, seed)


def exact_loo_ridge(ds: Dataset, lam: float, leverage_tol: float = 1e-10) -> LooWeights:
    """All leave-one-out ridge solutions from one factorization.

    With ``A = X^T X + n lam I`` and residual ``r_i = y_i - x_i^T w*``,
    ``w_{-i} = w* - A^{-1} x_i r_i / (1 - h_i)`` where ``h_i = x_i^T A^{-1} x_i``.
    Samples with leverage ``h_i`` within ``leverage_tol`` of one are flagged
    and left absent.
    """
    if lam < 0:
        raise DomainError("lam must be non-negative")
    X = ds.features
    y = ds.labels.astype(np.float64)
    n, p = X.shape
    A = X.T @ X + n * lam * np.eye(p)
    try:
        c = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("design is singular; use lam > 0") from exc
    w = linalg.cho_solve(c, X.T @ y)
    AinvX = linalg.cho_solve(c, X.T).T  # row i = A^{-1} x_i
    h = np.einsum("ik,ik->i", X, AinvX)
    r = y - X @ w
    denom = 1.0 - h
    flagged = np.flatnonzero(np.abs(denom) <= leverage_tol)
    ok = np.abs(denom) > leverage_tol
    W = np.full((n, p), np.nan)
    W[ok] = w - AinvX[ok] * (r[ok] / denom[ok])[:, None]
    config = TrainConfig(model="ridge", lam=lam, optimizer="closed-form")
    return LooWeights(W, w, config, ok, tuple(int(i) for i in flagged))
