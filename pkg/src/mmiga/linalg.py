"""Sparse SPD solves (preconditioned CG) and banded direct solves.

The conjugate gradient loop is written out explicitly so iteration counts,
breakdown detection and bit-reproducibility are under our control; matrices
are stored in scipy compressed-row form. Banded systems (Greville collocation
matrices are banded and totally positive) go through LAPACK's banded solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import BreakdownError, ConvergenceError, SingularMatrixError

__all__ = ["LinearSolverSettings", "cg_solve", "banded_solve"]


@dataclass(frozen=True)
class LinearSolverSettings:
    """Iterative-solver knobs: relative residual, iteration cap, preconditioner."""

    tol: float = 1e-10
    maxit: int | None = None  # defaults to 10 * n
    precond: str = "diagonal"  # "none" or "diagonal"

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.precond not in ("none", "diagonal"):
            raise ValueError(f"unknown preconditioner {self.precond!r}")


def cg_solve(A, b, tol=1e-10, maxit=None, precond="diagonal", callback=None):
    """Conjugate gradients for SPD A; returns (x, iterations).

    Stops when ||b - A x|| <= tol * ||b||. Raises ConvergenceError when the
    iteration cap is hit and BreakdownError on a nonpositive curvature
    direction (A not SPD). ``callback(x)`` is invoked after every iteration.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if maxit is None:
        maxit = 10 * n
    if precond == "diagonal":
        d = A.diagonal() if sp.issparse(A) else np.diag(A)
        if np.any(d <= 0):
            raise BreakdownError("nonpositive diagonal entry; matrix is not SPD")
        dinv = 1.0 / d
    elif precond == "none":
        dinv = None
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")

    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0.0:
        return x, 0
    r = b.copy()
    z = r * dinv if dinv is not None else r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            raise BreakdownError(
                f"zero/negative curvature (p·Ap = {pAp:.3e}) at iteration {it}"
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if callback is not None:
            callback(x.copy())
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it
        z = r * dinv if dinv is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"conjugate gradients: no convergence in {maxit} iterations "
        f"(relative residual {np.linalg.norm(r) / bnorm:.3e})"
    )


def _to_banded(B):
    """Extract (l, u, ab) diagonal-ordered band storage from a dense matrix."""
    B = np.asarray(B, dtype=float)
    n = B.shape[0]
    nz = np.argwhere(B != 0.0)
    if nz.size == 0:
        raise SingularMatrixError("zero matrix")
    offsets = nz[:, 1] - nz[:, 0]
    u = max(int(offsets.max()), 0)
    l = max(int(-offsets.min()), 0)
    ab = np.zeros((l + u + 1, n))
    for d in range(-l, u + 1):
        diag = np.diagonal(B, offset=d)
        if d >= 0:
            ab[u - d, d:] = diag
        else:
            ab[u - d, : n + d] = diag
    return l, u, ab


def banded_solve(B, rhs):
    """Direct solve of a banded system for one or more right-hand sides.

    ``B`` is given densely (the bands are detected); the residual is verified
    against 1e-12 * ||rhs|| so a numerically singular system is reported
    rather than silently returned.
    """
    B = np.asarray(B, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    l, u, ab = _to_banded(B)
    try:
        x = scipy.linalg.solve_banded((l, u), ab, rhs)
    except scipy.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("banded solve produced non-finite values")
    resid = np.linalg.norm(B @ x - rhs)
    if resid > 1e-12 * max(np.linalg.norm(rhs), 1e-300):
        raise SingularMatrixError(
            f"banded solve residual {resid:.3e} exceeds tolerance; matrix ill-conditioned"
        )
    return x
