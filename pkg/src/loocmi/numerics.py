"""Numerically stable primitives shared by every bound.

All information quantities are in nats.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .exceptions import DomainError

__all__ = [
    "CovSpec",
    "c_n",
    "log_sum_exp",
    "gaussian_kl",
    "pairwise_kl",
    "pairwise_sq_mahalanobis",
]

# Rows per block when forming pairwise differences; bounds peak memory at
# _BLOCK * n * K doubles without changing any entry's value.
_BLOCK = 64


def c_n(n: int) -> float:
    """Return the leave-one-out constant ``n / (n - 1)``."""
    if isinstance(n, (bool, np.bool_)) or int(n) != n:
        raise DomainError(f"n must be an integer, got {n!r}")
    n = int(n)
    if n < 2:
        raise DomainError(f"leave-one-out needs n >= 2, got n={n}")
    return n / (n - 1)


def log_sum_exp(values, axis: Optional[int] = None):
    """Return ``ln(sum(exp(values)))`` computed with a max shift.

    Entries may be ``-inf`` as long as at least one is finite.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("log_sum_exp of an empty vector is undefined")
    if np.any(np.isnan(v)) or np.any(v == np.inf):
        raise DomainError("log_sum_exp requires entries in [-inf, inf)")
    if axis is None and not np.any(np.isfinite(v)):
        raise DomainError("log_sum_exp needs at least one finite entry")
    out = logsumexp(v, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class CovSpec:
    """Covariance of the synthetic Gaussian noise.

    Exactly one representation is populated, chosen by ``kind``:

    * ``"isotropic"``: ``sigma`` (standard deviation), Sigma = sigma^2 I
    * ``"diagonal"``: ``alpha`` (variances), Sigma = diag(alpha)
    * ``"full-inverse"``: ``precision`` P, used directly as Sigma^{-1}

    Use the :meth:`isotropic`, :meth:`diagonal` and :meth:`full_inverse`
    constructors; they validate positivity.
    """

    kind: str
    sigma: Optional[float] = None
    alpha: Optional[np.ndarray] = None
    precision: Optional[np.ndarray] = None
    _chol: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def isotropic(cls, sigma: float) -> "CovSpec":
        sigma = float(sigma)
        if not np.isfinite(sigma) or sigma <= 0:
            raise DomainError(f"isotropic sigma must be positive, got {sigma}")
        return cls("isotropic", sigma=sigma)

    @classmethod
    def diagonal(cls, alpha) -> "CovSpec":
        a = np.array(alpha, dtype=np.float64).ravel()
        if a.size == 0 or not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise DomainError("diagonal variances must be finite and positive")
        a.setflags(write=False)
        return cls("diagonal", alpha=a)

    @classmethod
    def full_inverse(cls, precision) -> "CovSpec":
        P = np.array(precision, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise DomainError(f"precision must be a square matrix, got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise DomainError("precision has non-finite entries")
        if not np.allclose(P, P.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(P).max())):
            raise DomainError("precision matrix is not symmetric")
        P = 0.5 * (P + P.T)
        try:
            L = linalg.cholesky(P, lower=True)
        except linalg.LinAlgError as exc:
            raise DomainError("precision matrix is not positive definite") from exc
        P.setflags(write=False)
        L.setflags(write=False)
        return cls("full-inverse", precision=P, _chol=L)

    @property
    def dim(self) -> Optional[int]:
        """Dimension K, or ``None`` for isotropic noise (any K)."""
        if self.kind == "diagonal":
            return self.alpha.size
        if self.kind == "full-inverse":
            return self.precision.shape[0]
        return None

    def check_dim(self, K: int) -> None:
        d = self.dim
        if d is not None and d != K:
            raise DomainError(f"covariance has dimension {d}, vectors have {K}")

    def trace(self, K: Optional[int] = None) -> float:
        """Trace of Sigma (not of its inverse)."""
        if self.kind == "isotropic":
            if K is None:
                raise DomainError("trace of isotropic covariance needs K")
            return K * self.sigma ** 2
        if self.kind == "diagonal":
            return float(np.sum(self.alpha))
        Linv = linalg.solve_triangular(self._chol, np.eye(self.dim), lower=True)
        return float(np.sum(Linv * Linv))

    def whiten(self, X) -> np.ndarray:
        """Map rows of ``X`` so Mahalanobis distance becomes Euclidean.

        For full-inverse P = L L^T the map is ``x -> L^T x``.
        """
        X = np.asarray(X, dtype=np.float64)
        self.check_dim(X.shape[-1])
        if self.kind == "isotropic":
            return X / self.sigma
        if self.kind == "diagonal":
            return X / np.sqrt(self.alpha)
        return X @ self._chol

    def unwhiten(self, Y) -> np.ndarray:
        """Inverse of :meth:`whiten`; turns standard normals into N(0, Sigma) draws."""
        Y = np.asarray(Y, dtype=np.float64)
        if self.kind == "isotropic":
            return Y * self.sigma
        if self.kind == "diagonal":
            return Y * np.sqrt(self.alpha)
        # x = L^{-T} y
        return linalg.solve_triangular(self._chol, Y.T, lower=True, trans="T").T

    def scaled(self, c: float) -> "CovSpec":
        """Return the covariance of ``c * N`` for ``N ~ N(0, Sigma)``."""
        c = float(c)
        if c <= 0:
            raise DomainError("scale must be positive")
        if self.kind == "isotropic":
            return CovSpec.isotropic(self.sigma * c)
        if self.kind == "diagonal":
            return CovSpec.diagonal(self.alpha * c * c)
        return CovSpec.full_inverse(self.precision / (c * c))

    def to_dict(self) -> dict:
        if self.kind == "isotropic":
            return {"kind": "isotropic", "sigma": self.sigma}
        if self.kind == "diagonal":
            return {"kind": "diagonal", "alpha": self.alpha.tolist()}
        return {"kind": "full-inverse", "precision": self.precision.tolist()}


def _as_matrix(means) -> np.ndarray:
    M = np.asarray(means, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise DomainError(f"means must be an n x K array, got shape {M.shape}")
    return M


def gaussian_kl(mean_a, mean_b, cov: CovSpec) -> float:
    """KL between N(mean_a, Sigma) and N(mean_b, Sigma), in nats."""
    a = np.atleast_1d(np.asarray(mean_a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(mean_b, dtype=np.float64))
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError(f"mean shapes differ: {a.shape} vs {b.shape}")
    diff = cov.whiten(a - b)
    return 0.5 * float(np.dot(diff, diff))


def pairwise_sq_mahalanobis(means, cov: CovSpec) -> np.ndarray:
    """n x n matrix of (m_i - m_j)^T Sigma^{-1} (m_i - m_j).

    Differences are formed explicitly (no Gram-matrix expansion), so the
    diagonal is exactly zero and the matrix is exactly symmetric.
    """
    M = _as_matrix(means)
    Y = cov.whiten(M)
    n = Y.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        diff = Y[start:stop, None, :] - Y[None, :, :]
        out[start:stop] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def pairwise_kl(means, cov: CovSpec) -> np.ndarray:
    """Pairwise equal-covariance Gaussian KL matrix (nats)."""
    M = _as_matrix(means)
    if M.shape[0] < 2:
        raise DomainError("pairwise_kl needs at least two mean vectors")
    return 0.5 * pairwise_sq_mahalanobis(M, cov)
