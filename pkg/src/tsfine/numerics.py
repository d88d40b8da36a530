"""Dense linear algebra and small statistical helpers.

Everything here is a pure function of its inputs. Matrices are plain
``numpy.ndarray`` objects; ``solve_lls`` additionally accepts stacks of
matrices so the feature extractor can fit many regressions in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc

from .errors import EmptyInput, NotSpd, RankDeficient

__all__ = [
    "SpdFactorization",
    "cholesky",
    "sym_inv_sqrt",
    "solve_lls",
    "empirical_quantile",
    "chi2_quantile",
]


@dataclass(frozen=True)
class SpdFactorization:
    """Lower Cholesky factor ``lower`` with ``lower @ lower.T == a``."""

    lower: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _check_symmetric(a, rtol=1e-10):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSpd(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotSpd("matrix has non-finite entries")
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    if np.abs(a - a.T).max() > rtol * scale:
        raise NotSpd("matrix is not symmetric")
    return a


def cholesky(a) -> SpdFactorization:
    a = _check_symmetric(a)
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotSpd("non-positive pivot in Cholesky factorization") from exc
    if np.any(np.diag(lower) <= 0):
        raise NotSpd("non-positive pivot in Cholesky factorization")
    return SpdFactorization(lower)


def sym_inv_sqrt(s) -> np.ndarray:
    """Symmetric inverse square root ``W`` of an SPD matrix, ``W s W = I``.

    Uses the eigendecomposition so that ``W`` is itself symmetric.
    """
    s = _check_symmetric(s)
    s = 0.5 * (s + s.T)
    evals, evecs = np.linalg.eigh(s)
    if evals[0] <= 0:
        raise NotSpd(f"non-positive eigenvalue {evals[0]:.3e}")
    w = (evecs / np.sqrt(evals)) @ evecs.T
    return 0.5 * (w + w.T)


def solve_lls(a, b, rcond=None) -> np.ndarray:
    """Least-squares solution of ``a @ x ~= b`` via a reduced QR factorization.

    ``a`` may be a single ``(m, n)`` matrix or a stack ``(..., m, n)`` with
    matching ``b`` of shape ``(..., m)``. Raises ``RankDeficient`` when the
    triangular factor has a diagonal entry below ``rcond * max|diag|``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = a.shape[-2:]
    if m < n:
        raise RankDeficient(f"underdetermined system ({m} rows < {n} cols)")
    if rcond is None:
        rcond = max(m, n) * np.finfo(float).eps
    q, r = np.linalg.qr(a, mode="reduced")
    diag = np.abs(np.diagonal(r, axis1=-2, axis2=-1))
    dmax = diag.max(axis=-1, keepdims=True)
    if np.any(diag <= rcond * np.maximum(dmax, np.finfo(float).tiny)) or np.any(dmax == 0):
        raise RankDeficient("numerical rank below column count")
    qtb = np.einsum("...mn,...m->...n", q, b)
    return np.linalg.solve(r, qtb[..., None])[..., 0]


def empirical_quantile(samples, level: float) -> float:
    """The ``ceil(level * K)``-th smallest of ``K`` samples.

    Takes the higher order statistic so thresholds built from it err on the
    conservative side.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise EmptyInput("empirical_quantile needs at least one sample")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    # guard against 0.9 * 100 -> 90.00000000000001
    rank = math.ceil(level * x.size - 1e-9)
    rank = min(max(rank, 1), x.size)
    return float(x[rank - 1])


def chi2_cdf(q: float, dof: int) -> float:
    if q <= 0:
        return 0.0
    return float(gammainc(0.5 * dof, 0.5 * q))


def chi2_quantile(dof: int, coverage: float, tol: float = 1e-10) -> float:
    """Chi-squared quantile by bisection on the regularized lower gamma function."""
    if dof < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if not 0.0 < coverage < 1.0:
        raise ValueError(f"coverage must lie in (0, 1), got {coverage}")
    lo, hi = 0.0, max(1.0, float(dof))
    while chi2_cdf(hi, dof) < coverage:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < coverage:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
