"""Dense symmetric-positive-definite solves via Cholesky factorization.

The factorization is written out column by column (rather than delegated to
LAPACK) so that a failure can report which pivot went non-positive; the
triangular solves use scipy.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular


class NotSPDError(ValueError):
    """Matrix failed the symmetric-positive-definite checks."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


def cholesky_factor(a: np.ndarray, sym_tol: float = 1e-10) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Symmetry is enforced to ``sym_tol`` (scaled by the largest entry); a
    non-positive pivot raises NotSPDError carrying the failing index.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()) if a.size else 1.0)
    asym = float(np.abs(a - a.T).max()) if a.size else 0.0
    if asym > sym_tol * scale:
        raise NotSPDError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if d <= 0.0 or not np.isfinite(d):
            raise NotSPDError(f"non-positive pivot {d:.3e} at index {j}", pivot=j)
        L[j, j] = np.sqrt(d)
        if j + 1 < n:
            L[j + 1 :, j] = (a[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def solve_with_factor(chol_lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given the lower Cholesky factor of A."""
    y = solve_triangular(chol_lower, b, lower=True)
    return solve_triangular(chol_lower.T, y, lower=False)


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b for symmetric positive-definite A."""
    return solve_with_factor(cholesky_factor(a), np.asarray(b, dtype=np.float64))


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Explicit inverse of an SPD matrix (for small verification paths only)."""
    L = cholesky_factor(a)
    x = solve_triangular(L, np.eye(a.shape[0]), lower=True)
    return x.T @ x
