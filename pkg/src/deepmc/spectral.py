"""Dense spectral helpers: thin SVD, effective rank, PSD powers, vec/kron."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import (
    DegenerateSpectrumError,
    InvalidInputError,
    NumericalFailureError,
)

# singular values below ZERO_RTOL * sigma_max count as exact zeros
ZERO_RTOL = 1e-12


class Svd(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self):
        return (self.u * self.sigma) @ self.vt


class SpectralMeasures(NamedTuple):
    effective_rank: float
    nuclear_norm: float
    frobenius_norm: float
    top_singular_values: np.ndarray


def _as_finite_matrix(matrix, name="matrix"):
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or min(a.shape) < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def svd(matrix, method="lapack") -> Svd:
    """Thin SVD with singular values sorted non-increasing.

    ``method="lapack"`` calls the LAPACK divide-and-conquer driver through
    numpy; ``method="jacobi"`` runs the self-contained one-sided Jacobi
    routine in :func:`jacobi_svd`. Both are deterministic for a fixed input.
    """
    a = _as_finite_matrix(matrix)
    if method == "jacobi":
        return jacobi_svd(a)
    if method != "lapack":
        raise InvalidInputError(f"unknown svd method {method!r}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"LAPACK SVD did not converge: {exc}") from exc
    return Svd(u, s, vt)


def _complete_orthonormal(q, total):
    """Extend the orthonormal columns of ``q`` to ``total`` columns."""
    m, k = q.shape
    if k == total:
        return q
    basis, _ = np.linalg.qr(np.hstack([q, np.eye(m)]))
    return np.hstack([q, basis[:, k:total]])


def jacobi_svd(matrix, tol=1e-12, max_sweeps=None) -> Svd:
    """One-sided (Hestenes) Jacobi SVD.

    Columns are rotated pairwise until every pair is orthogonal to within
    ``tol`` relative to the product of their norms. Raises
    :class:`NumericalFailureError` after ``max_sweeps`` sweeps
    (default ``100 * min(m, n)``).
    """
    a = _as_finite_matrix(matrix)
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    m, n = a.shape
    if max_sweeps is None:
        max_sweeps = 100 * n
    work = a.copy()
    v = np.eye(n)
    off = np.inf
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = work[:, p] @ work[:, p]
                beta = work[:, q] @ work[:, q]
                gamma = work[:, p] @ work[:, q]
                if alpha == 0.0 or beta == 0.0:
                    continue
                ratio = abs(gamma) / np.sqrt(alpha * beta)
                off = max(off, ratio)
                if ratio <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wp = work[:, p].copy()
                work[:, p] = c * wp - s * work[:, q]
                work[:, q] = s * wp + c * work[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if off <= tol:
            break
    else:
        raise NumericalFailureError(
            f"Jacobi SVD did not converge in {max_sweeps} sweeps", residual=off
        )

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    cutoff = ZERO_RTOL * sigma[0] if sigma[0] > 0 else 0.0
    nonzero = int(np.sum(sigma > cutoff)) if sigma[0] > 0 else 0
    u = work[:, :nonzero] / sigma[:nonzero]
    u = _complete_orthonormal(u, n)
    if transposed:
        return Svd(v, sigma, u.T)
    return Svd(u, sigma, v.T)


def effective_rank(sigma) -> float:
    """exp of the Shannon entropy (natural log) of sigma / ||sigma||_1."""
    s = np.abs(np.asarray(sigma, dtype=float).ravel())
    if s.size == 0 or not np.any(s > 0):
        raise DegenerateSpectrumError("effective rank of an all-zero spectrum is undefined")
    s = np.where(s > ZERO_RTOL * s.max(), s, 0.0)
    p = s[s > 0] / s.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def spectral_measures(matrix, top=10) -> SpectralMeasures:
    s = np.linalg.svd(_as_finite_matrix(matrix), compute_uv=False)
    return SpectralMeasures(
        effective_rank=effective_rank(s),
        nuclear_norm=float(s.sum()),
        frobenius_norm=float(np.sqrt(np.sum(s * s))),
        top_singular_values=s[:top].copy(),
    )


def psd_fractional_power(matrix, exponent, sym_tol=1e-8, neg_tol=1e-10):
    """V diag(lambda**exponent) V^T for a symmetric PSD matrix.

    Eigenvalues within roundoff of zero are clamped to 0, so exponent 0
    yields the orthogonal projector onto the range rather than the identity.
    """
    a = _as_finite_matrix(matrix)
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"matrix must be square, got {a.shape}")
    if not 0.0 <= exponent <= 1.0:
        raise InvalidInputError(f"exponent must lie in [0, 1], got {exponent}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > sym_tol * scale:
        raise InvalidInputError("matrix is not symmetric within tolerance")
    lam, vecs = np.linalg.eigh(0.5 * (a + a.T))
    if lam.min() < -neg_tol * scale:
        raise InvalidInputError(f"matrix is not PSD (min eigenvalue {lam.min():.3e})")
    lam_max = max(lam.max(), 0.0)
    keep = lam > max(ZERO_RTOL * lam_max, 0.0)
    powered = np.zeros_like(lam)
    powered[keep] = lam[keep] ** exponent
    return (vecs * powered) @ vecs.T


def vec(matrix):
    """Column-major (Fortran order) vectorisation."""
    return np.asarray(matrix).reshape(-1, order="F")


def unvec(vector, shape):
    return np.asarray(vector).reshape(shape, order="F")


def kron(a, b):
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
