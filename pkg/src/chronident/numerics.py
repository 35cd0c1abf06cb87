"""Shared numerical kernels.

All solvers go through orthogonal (SVD-based) decompositions; normal
equations are never formed for solving. The weighted least-squares path
optionally equilibrates columns because downstream regressors mix basis
functions spanning many orders of magnitude in tau.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DivergedError

__all__ = [
    "LsDiagnostics",
    "weighted_least_squares",
    "left_null_space",
    "pinv_solve",
    "gauss_newton",
]


@dataclass
class LsDiagnostics:
    residual_norm: float
    condition_number: float
    rank: int
    iterations: int = 0


def weighted_least_squares(
    A: np.ndarray,
    b: np.ndarray,
    w: np.ndarray,
    equilibrate: bool = True,
) -> tuple[np.ndarray, LsDiagnostics]:
    """Minimize ||W^{1/2} (b - A x)||^2 with W = diag(w), w > 0.

    Solved via SVD of W^{1/2} A (minimum-norm solution when rank
    deficient). With ``equilibrate`` each column is scaled to unit norm
    before the solve and the solution is unscaled afterwards, which keeps
    the decomposition well conditioned for regressors whose columns span
    tau^-2 .. tau^2.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    if A.ndim != 2 or A.shape[0] != b.size:
        raise ValueError(f"incompatible shapes A {A.shape}, b {b.shape}")
    if w.size != b.size:
        raise ValueError(f"weight vector has length {w.size}, expected {b.size}")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")

    sqrt_w = np.sqrt(w)
    B = A * sqrt_w[:, None]
    rhs = b * sqrt_w

    if equilibrate:
        col_scale = np.linalg.norm(B, axis=0)
        col_scale[col_scale == 0.0] = 1.0
    else:
        col_scale = np.ones(A.shape[1])

    y, _, rank, sv = np.linalg.lstsq(B / col_scale, rhs, rcond=1e-12)
    x = y / col_scale

    cond = float(sv[0] / sv[rank - 1]) if rank > 0 else np.inf
    resid = float(np.linalg.norm(rhs - B @ x))
    return x, LsDiagnostics(residual_norm=resid, condition_number=cond, rank=int(rank))


def left_null_space(M: np.ndarray, tol_rel: float = 1e-10) -> np.ndarray:
    """Orthonormal rows spanning {v : v^T M = 0}.

    Rank is decided at ``tol_rel * sigma_max``. Returns an array of shape
    (rows(M) - rank, rows(M)); empty (0, rows) when M has full row rank.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.size == 0:
        raise ValueError("M must be a nonempty 2-D array")
    U, s, _ = np.linalg.svd(M, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(s > tol_rel * s[0]))
    return U[:, rank:].T.copy()


def pinv_solve(A: np.ndarray, b: np.ndarray, rcond: float = 1e-12) -> np.ndarray:
    """Minimum-norm least-squares solution x = A^+ b.

    Singular values below ``rcond * sigma_max`` are treated as zero, so the
    call is always defined (A = 0 gives x = 0).
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    x, _, _, _ = np.linalg.lstsq(A, b, rcond=rcond)
    return x


def gauss_newton(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    max_iter: int = 100,
    gtol: float = 1e-12,
) -> tuple[np.ndarray, LsDiagnostics]:
    """Damped Gauss-Newton for min ||residual(x)||^2.

    The step is the minimum-norm solution of J dx = -r; it is halved (at
    most 30 times) until the residual norm decreases. Terminates when
    ||J^T r|| <= gtol or after ``max_iter`` iterations.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = np.asarray(residual_fn(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise DivergedError("residual is not finite at the starting point")
    cost = float(r @ r)
    iterations = 0
    rank = 0
    cond = 1.0

    for iterations in range(1, max_iter + 1):
        J = np.asarray(jacobian_fn(x), dtype=float)
        grad = J.T @ r
        if np.linalg.norm(grad) <= gtol:
            iterations -= 1
            break
        step, _, rank, sv = np.linalg.lstsq(J, -r, rcond=1e-12)
        cond = float(sv[0] / sv[rank - 1]) if rank > 0 else np.inf

        alpha = 1.0
        for _ in range(31):
            x_new = x + alpha * step
            r_new = np.asarray(residual_fn(x_new), dtype=float)
            if not np.all(np.isfinite(r_new)):
                raise DivergedError("residual became non-finite during line search")
            cost_new = float(r_new @ r_new)
            if cost_new < cost or np.allclose(step, 0.0):
                break
            alpha *= 0.5
        else:
            break  # no decrease possible, accept current point
        if cost_new >= cost:
            break
        x, r, cost = x_new, r_new, cost_new

    return x, LsDiagnostics(
        residual_norm=float(np.sqrt(cost)),
        condition_number=cond,
        rank=int(rank),
        iterations=iterations,
    )
