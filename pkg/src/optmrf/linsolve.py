"""Hessian solves for the adjoint vector.

The Hessian of the energy is sparse, symmetric and possibly indefinite.
The default path factorizes it directly (sparse LU, with a few steps of
iterative refinement); if that cannot reach the requested residual, MINRES
is tried on the matrix-free operator.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
import scipy.sparse.linalg as spla

from .model import FoEModel, _prepare, hessian_apply, hessian_assemble

log = logging.getLogger(__name__)


class SingularSystemError(ArithmeticError):
    """The Hessian is numerically singular at the requested accuracy."""


def relative_residual(model: FoEModel, x_star, lam: float, p, rhs) -> float:
    """``||H p - rhs|| / ||rhs||`` with the matrix-free Hessian (0 when ``rhs = 0``)."""
    rhs = np.asarray(rhs, dtype=float)
    nb = float(np.linalg.norm(rhs))
    r = float(np.linalg.norm(hessian_apply(model, x_star, p, lam) - rhs))
    return r / nb if nb > 0 else r


def _direct(model, x_star, lam, rhs, tol, refine=3):
    h = hessian_assemble(model, x_star, lam)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            lu = spla.splu(h)
    except (RuntimeError, spla.MatrixRankWarning) as exc:
        raise SingularSystemError(f"Hessian factorization failed: {exc}") from exc
    b = rhs.ravel()
    p = lu.solve(b)
    if not np.all(np.isfinite(p)):
        raise SingularSystemError("Hessian factorization produced non-finite values")
    p = p.reshape(rhs.shape)
    res = relative_residual(model, x_star, lam, p, rhs)
    for _ in range(refine):
        if res <= tol:
            break
        r = rhs - hessian_apply(model, x_star, p, lam)
        p_new = p + lu.solve(r.ravel()).reshape(rhs.shape)
        res_new = relative_residual(model, x_star, lam, p_new, rhs)
        if not res_new < res:
            break
        p, res = p_new, res_new
    return p, res


def _minres(model, x_star, lam, rhs, tol, x0=None):
    n = rhs.size
    shape = rhs.shape
    op = spla.LinearOperator(
        (n, n), matvec=lambda v: hessian_apply(model, x_star, v.reshape(shape), lam).ravel(),
        dtype=float)
    p, info = spla.minres(op, rhs.ravel(), x0=None if x0 is None else x0.ravel(),
                          rtol=0.1 * tol, maxiter=20 * n)
    p = p.reshape(shape)
    return p, relative_residual(model, x_star, lam, p, rhs)


def solve_hessian(model: FoEModel, x_star, lam: float, rhs, tol: float = 1e-10,
                  method: str = "auto"):
    """Solve ``H_E(x_star) p = rhs``.

    ``method`` is ``"direct"``, ``"minres"`` or ``"auto"`` (direct, then MINRES
    if the residual is still above ``tol``).  Returns ``(p, residual)`` with the
    relative residual recomputed from the returned ``p``; raises
    :class:`SingularSystemError` if ``tol`` cannot be met.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if method not in ("auto", "direct", "minres"):
        raise ValueError(f"unknown method {method!r}")
    x_star, rhs = _prepare(model, x_star, rhs)
    if not np.any(rhs):
        return np.zeros_like(rhs), 0.0

    p = None
    res = np.inf
    if method in ("auto", "direct"):
        try:
            p, res = _direct(model, x_star, lam, rhs, tol)
        except SingularSystemError:
            if method == "direct":
                raise
            log.info("direct Hessian solve failed, falling back to MINRES")
    if res > tol and method in ("auto", "minres"):
        p_it, res_it = _minres(model, x_star, lam, rhs, tol, x0=p)
        if res_it < res:
            p, res = p_it, res_it
    if p is None or not res <= tol:
        raise SingularSystemError(f"Hessian solve reached relative residual {res:.3e} > {tol:.1e}")
    return p, res
