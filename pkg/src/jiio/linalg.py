"""Dense linear-algebra kernels: LU solve, ridge least squares, power iteration.

Everything is float64 and sized for the desk-scale problems in this
package (dimensions up to a few hundred), so plain dense factorizations
are adequate.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NoConvergence, SingularMatrix, ZeroWeight
from .rng import SeededRng


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def solve_dense(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b by LU with partial pivoting.

    Raises SingularMatrix when a pivot falls below 1e-14 * max|A|.
    """
    A = _check_finite("A", A)
    b = _check_finite("b", b)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    n = A.shape[0]
    if b.shape != (n,):
        raise DimensionMismatch(f"b must have length {n}, got {b.shape}")
    lu = A.copy()
    x = b.copy()
    pivot_floor = 1e-14 * np.abs(A).max() if n else 0.0
    perm = np.arange(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if np.abs(lu[p, k]) < pivot_floor or lu[p, k] == 0.0:
            raise SingularMatrix(f"pivot {abs(lu[p, k]):.3e} below threshold at column {k}")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            x[[k, p]] = x[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        factors = lu[k + 1:, k] / lu[k, k]
        lu[k + 1:, k] = factors
        lu[k + 1:, k + 1:] -= np.outer(factors, lu[k, k + 1:])
        x[k + 1:] -= factors * x[k]
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - lu[k, k + 1:] @ x[k + 1:]) / lu[k, k]
    return x


def lstsq_ridge(A: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    """Return argmin_g ||A g - b||^2 + lam ||g||^2.

    The lam > 0 path solves the equivalent augmented least-squares system,
    which matches the normal equations (A^T A + lam I) g = A^T b to
    rounding while staying well conditioned.  With lam = 0 the normal
    equations are solved directly and may raise SingularMatrix.
    """
    A = _check_finite("A", A)
    b = _check_finite("b", b)
    if A.ndim != 2:
        raise DimensionMismatch(f"A must be 2-D, got {A.shape}")
    m, k = A.shape
    if b.shape != (m,):
        raise DimensionMismatch(f"b must have length {m}, got {b.shape}")
    if lam < 0:
        raise ValueError("ridge parameter must be nonnegative")
    if lam == 0.0:
        return solve_dense(A.T @ A, A.T @ b)
    aug = np.vstack([A, np.sqrt(lam) * np.eye(k)])
    rhs = np.concatenate([b, np.zeros(k)])
    sol, _, _, _ = np.linalg.lstsq(aug, rhs, rcond=None)
    return sol


def spectral_norm(W: np.ndarray, max_iter: int = 500, tol: float = 1e-9,
                  rng: SeededRng | None = None) -> float:
    """Largest singular value of W by power iteration on W^T W."""
    W = _check_finite("W", W)
    if W.ndim != 2:
        raise DimensionMismatch(f"W must be 2-D, got {W.shape}")
    if not np.any(W):
        raise ZeroWeight("spectral_norm of an all-zero matrix")
    if rng is None:
        rng = SeededRng(0x5EC7)
    v = rng.standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            # start vector fell in the null space; re-draw
            v = rng.standard_normal(W.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = W.T @ u
        nv = np.linalg.norm(v)
        v /= nv
        sigma_new = nv / nu
        # stop well inside tol so the returned estimate itself is tol-accurate
        if abs(sigma_new - sigma) <= 0.25 * tol * max(sigma_new, 1e-300):
            return float(sigma_new)
        sigma = sigma_new
    raise NoConvergence(f"power iteration did not stabilize in {max_iter} iterations")
