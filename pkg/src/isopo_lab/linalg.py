"""Dense double-precision helpers for microbatch-sized symmetric problems.

Matrices are plain 2-D float64 numpy arrays (row-major). The symmetric
eigensolver is a cyclic Jacobi iteration: the Gram matrices built from a
microbatch are at most ~64 x 64, where Jacobi is simple, provably convergent
and more than fast enough. No attempt is made at general BLAS performance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, SingularMatrixError

# Relative tolerance for accepting an input as symmetric.
SYMMETRY_RTOL = 1e-12
# Jacobi stops once the off-diagonal Frobenius norm falls below this times ||M||.
OFFDIAG_RTOL = 1e-12
_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix.

    ``eigenvalues`` are ascending; ``eigenvectors`` holds the matching
    orthonormal eigenvectors as columns.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ContractViolation(f"{name} has non-finite entries")
    return m


def frobenius_dot(a, b) -> float:
    """Entry-wise dot product sum_ij A_ij * B_ij of two equally shaped matrices."""
    am = _as_matrix(a, "a")
    bm = _as_matrix(b, "b")
    if am.shape != bm.shape:
        raise ContractViolation(f"shape mismatch: {am.shape} vs {bm.shape}")
    return float(np.sum(am * bm))


def sym_eigh(mat) -> SymEig:
    """Eigendecompose a symmetric real matrix by cyclic Jacobi rotations.

    Raises ContractViolation for non-square or asymmetric input. The result
    satisfies ||M U - U diag(D)||_F <= ~1e-12 ||M||_F, well inside the 1e-8
    contract, and U is orthonormal to machine precision.
    """
    m = _as_matrix(mat)
    n, n2 = m.shape
    if n != n2:
        raise ContractViolation(f"matrix must be square, got {m.shape}")
    norm = float(np.linalg.norm(m))
    if float(np.linalg.norm(m - m.T)) > SYMMETRY_RTOL * max(norm, 1e-300):
        raise ContractViolation("matrix is not symmetric to 1e-12 relative")

    a = 0.5 * (m + m.T)  # exact symmetrization of representable asymmetry
    u = np.eye(n)
    if n == 1:
        return SymEig(np.array([a[0, 0]]), u)

    tol = OFFDIAG_RTOL * norm
    skip = tol / (n + 1)  # skipped entries cannot push off-norm above tol
    converged = norm == 0.0

    def offdiag_norm() -> float:
        # computed directly (not ||A||^2 - ||diag||^2, which cancels badly)
        off = a.copy()
        np.fill_diagonal(off, 0.0)
        return float(np.linalg.norm(off))

    for _ in range(_MAX_SWEEPS):
        if offdiag_norm() <= tol:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = 0.5 * (aqq - app) / apq
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                # stable closed forms for the rotated 2x2 block
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0

                u_p = u[:, p].copy()
                u_q = u[:, q].copy()
                u[:, p] = c * u_p - s * u_q
                u[:, q] = s * u_p + c * u_q
    if not converged and offdiag_norm() > tol:
        raise ArithmeticError(f"Jacobi did not converge in {_MAX_SWEEPS} sweeps")

    d = np.diag(a).copy()
    order = np.argsort(d, kind="stable")
    return SymEig(d[order], u[:, order])


def solve_tikhonov(eig: SymEig, c: float, b) -> np.ndarray:
    """Apply (M + c I)^-1 to ``b`` given the eigendecomposition of M.

    Returns U diag(1/(D_i + c)) U^T b. Requires c >= 0; if c == 0 every
    eigenvalue must be strictly positive, otherwise SingularMatrixError.
    """
    if c < 0:
        raise ContractViolation(f"regularization must be nonnegative, got {c}")
    vec = np.asarray(b, dtype=float)
    d = eig.eigenvalues
    if vec.shape != (d.shape[0],):
        raise ContractViolation(f"rhs shape {vec.shape} does not match dimension {d.shape[0]}")
    denom = d + c
    if np.any(denom <= 0.0):
        raise SingularMatrixError(
            f"eigenvalue {d.min():.3e} with regularization {c:.3e} is not invertible"
        )
    u = eig.eigenvectors
    return u @ ((u.T @ vec) / denom)
