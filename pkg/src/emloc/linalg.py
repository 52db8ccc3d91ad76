"""Dense float64 kernels with fixed, testable contracts.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every
public function validates its inputs, returns finite results, and is
deterministic for a fixed BLAS thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "LinalgError",
    "DimensionError",
    "NotPositiveDefiniteError",
    "SingularMatrixError",
    "ConvergenceError",
    "SvdResult",
    "as_matrix",
    "matmul",
    "svd",
    "truncated_svd",
    "cholesky",
    "solve_lower_triangular",
    "gram_schmidt",
]

SYMMETRY_TOL = 1e-10
DIAG_TOL = 1e-12


class LinalgError(ValueError):
    """Base class for numerical-kernel failures."""


class DimensionError(LinalgError):
    pass


class NotPositiveDefiniteError(LinalgError):
    pass


class SingularMatrixError(LinalgError):
    pass


class ConvergenceError(LinalgError):
    pass


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ vt``.

    ``u`` is m x k with orthonormal columns, ``sigma`` has k non-negative,
    non-increasing entries and ``vt`` is k x n with orthonormal rows.
    """

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite, non-empty 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionError(f"{name} must be non-empty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinalgError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _canonical_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Largest-magnitude entry of each u column made non-negative; argmax
    # returns the first index on ties, i.e. the lowest row.
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    signs = np.where(flip, -1.0, 1.0)
    return u * signs, vt * signs[:, None]


def svd(a) -> SvdResult:
    """Full thin SVD with k = min(rows, cols) and a canonical sign convention.

    Backed by LAPACK ``gesdd``, falling back to ``gesvd`` if the divide and
    conquer driver fails to converge. Raises :class:`ConvergenceError` if both
    drivers fail.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    k = min(m, n)
    if not np.any(a):
        return SvdResult(np.eye(m, k), np.zeros(k), np.eye(k, n))
    try:
        u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        try:
            u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"SVD did not converge: {exc}") from exc
    u, vt = _canonical_signs(u, vt)
    return SvdResult(np.ascontiguousarray(u), s, np.ascontiguousarray(vt))


def truncated_svd(a, n: int) -> SvdResult:
    """Top-``n`` singular triples of ``a`` (the Eckart-Young optimum)."""
    a = as_matrix(a, "a")
    k = min(a.shape)
    if not 1 <= n <= k:
        raise LinalgError(f"rank {n} out of range [1, {k}]")
    full = svd(a)
    return SvdResult(full.u[:, :n].copy(), full.sigma[:n].copy(), full.vt[:n].copy())


def cholesky(a) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises :class:`NotPositiveDefiniteError` when ``a`` is not (numerically)
    positive definite; callers are expected to regularise and retry.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"cholesky needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise LinalgError("cholesky input is not symmetric")
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("not positive definite") from exc
    if np.any(np.diag(low) <= 0) or not np.all(np.isfinite(low)):
        raise NotPositiveDefiniteError("not positive definite")
    return low


def solve_lower_triangular(l, b, *, transpose: bool = False) -> np.ndarray:
    """Solve ``l @ x = b`` (or ``l.T @ x = b`` with ``transpose=True``)."""
    l = as_matrix(l, "l")
    b = as_matrix(b, "b")
    if l.shape[0] != l.shape[1]:
        raise DimensionError(f"triangular factor must be square, got {l.shape}")
    if l.shape[0] != b.shape[0]:
        raise DimensionError(f"cannot solve {l.shape} against {b.shape}")
    diag = np.abs(np.diag(l))
    if diag.max() == 0 or diag.min() <= DIAG_TOL * diag.max():
        raise SingularMatrixError("zero or near-zero diagonal entry")
    return scipy.linalg.solve_triangular(l, b, lower=True, trans="T" if transpose else "N")


def gram_schmidt(a) -> tuple[np.ndarray, np.ndarray]:
    """Modified Gram-Schmidt: ``a = q @ r`` with orthonormal ``q`` columns.

    Written out explicitly (no Householder) so it can act as an independent
    check on SVD-based orthonormalisation. Requires full column rank.
    """
    a = as_matrix(a, "a")
    m, k = a.shape
    if k > m:
        raise DimensionError(f"need rows >= cols, got {a.shape}")
    q = a.copy()
    r = np.zeros((k, k))
    scale = max(float(np.linalg.norm(a)), np.finfo(float).tiny)
    for j in range(k):
        for i in range(j):
            r[i, j] = q[:, i] @ q[:, j]
            q[:, j] -= r[i, j] * q[:, i]
        norm = np.linalg.norm(q[:, j])
        if norm <= 1e-12 * scale:
            raise SingularMatrixError("columns are linearly dependent")
        r[j, j] = norm
        q[:, j] /= norm
    return q, r
