"""Lower-level solver: minimize the FoE energy over the image.

Limited-memory BFGS with a strong-Wolfe line search.  The search works on
``E(x + a d) - E(x)`` computed as in :func:`~optmrf.model.energy_change`, which
stays accurate long after ``E`` itself has run out of digits, so tight
tolerances such as 1e-10 (normalized gradient, gray-value units) are
reachable.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import FoEModel, _check_fits, _check_image, _LineEvaluator, energy


class Termination(str, enum.Enum):
    TOLERANCE = "tolerance"
    MAX_ITERS = "max_iters"
    LINE_SEARCH_FAILURE = "line_search_failure"


@dataclass(frozen=True)
class InnerSolveConfig:
    epsilon_l: float = 1e-5
    max_iters: int = 5000
    lbfgs_memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9

    def __post_init__(self):
        if not self.epsilon_l > 0:
            raise ValueError(f"epsilon_l must be positive, got {self.epsilon_l}")
        if self.max_iters < 1 or self.lbfgs_memory < 1:
            raise ValueError("max_iters and lbfgs_memory must be at least 1")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search needs 0 < c1 < c2 < 1")


@dataclass
class SolveReport:
    """Outcome of one solve.

    ``energy_trace[k]`` is the energy after ``k`` accepted steps, accumulated
    from the exact starting energy with the cancellation-free step
    differences, so it is non-increasing by construction.
    """

    iterations: int
    final_normalized_grad: float
    converged: bool
    termination_reason: Termination
    energy_trace: list = field(default_factory=list)
    grad_trace: list = field(default_factory=list)

    def rows(self):
        for k, (e, g) in enumerate(zip(self.energy_trace, self.grad_trace)):
            yield k, e, g

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "energy", "normalized_grad"])
            for k, e, g in self.rows():
                w.writerow([k, repr(e), repr(g)])


class _LineSearchFailed(Exception):
    pass


def _cubic_min(a0, f0, d0, a1, f1, d1):
    """Minimizer of the cubic interpolating (a0, f0, d0) and (a1, f1, d1), or None."""
    d1_ = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1)
    rad = d1_ * d1_ - d0 * d1
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), a1 - a0)
    denom = d1 - d0 + 2.0 * d2
    if denom == 0:
        return None
    return a1 - (a1 - a0) * (d1 + d2 - d1_) / denom


def _strong_wolfe(phi, dphi, d0, a_init, c1, c2, max_evals=40):
    """Strong-Wolfe step for ``phi(a)`` with ``phi(0) = 0``, ``phi'(0) = d0 < 0``.

    Returns ``(a, phi(a), extra)`` where ``extra`` is whatever ``dphi``
    returned alongside the derivative at ``a``.
    """
    a_prev, f_prev, g_prev = 0.0, 0.0, d0
    a = a_init
    evals = 0

    def zoom(lo, f_lo, g_lo, hi, f_hi, g_hi):
        nonlocal evals
        while evals < max_evals:
            a_j = _cubic_min(lo, f_lo, g_lo, hi, f_hi, g_hi)
            width = abs(hi - lo)
            if a_j is None or not (min(lo, hi) + 0.1 * width <= a_j <= max(lo, hi) - 0.1 * width):
                a_j = 0.5 * (lo + hi)
            if a_j == lo or a_j == hi:
                break
            f_j = phi(a_j)
            evals += 1
            if f_j > c1 * a_j * d0 or f_j >= f_lo:
                hi, f_hi, g_hi = a_j, f_j, dphi(a_j)[0]
                continue
            g_j, extra = dphi(a_j)
            if abs(g_j) <= -c2 * d0:
                return a_j, f_j, extra
            if g_j * (hi - lo) >= 0:
                hi, f_hi, g_hi = lo, f_lo, g_lo
            lo, f_lo, g_lo = a_j, f_j, g_j
        # accept the best sufficient-decrease point found, if any
        if lo > 0 and f_lo <= c1 * lo * d0:
            return lo, f_lo, dphi(lo)[1]
        raise _LineSearchFailed

    while evals < max_evals:
        f_a = phi(a)
        evals += 1
        if not math.isfinite(f_a):
            a = 0.5 * (a_prev + a)
            continue
        if f_a > c1 * a * d0 or (evals > 1 and f_a >= f_prev):
            return zoom(a_prev, f_prev, g_prev, a, f_a, dphi(a)[0])
        g_a, extra = dphi(a)
        if abs(g_a) <= -c2 * d0:
            return a, f_a, extra
        if g_a >= 0:
            return zoom(a, f_a, g_a, a_prev, f_prev, g_prev)
        a_prev, f_prev, g_prev = a, f_a, g_a
        a = 2.0 * a
    raise _LineSearchFailed


def minimize_energy(model: FoEModel, f, lam: float, x0, cfg: InnerSolveConfig):
    """Minimize the energy over ``x`` from ``x0``.

    Returns ``(x_star, report)``.  ``report.converged`` is true exactly when
    ``||grad E(x_star)||_2 / sqrt(N_p) <= cfg.epsilon_l``.  A stalled line
    search is reported rather than raised; NaN raises ``FloatingPointError``.
    """
    f = _check_image(f, "f")
    x = _check_image(x0, "x0").copy()
    if x.shape != f.shape:
        raise ValueError(f"x0 has shape {x.shape} but f has shape {f.shape}")
    _check_fits(x.shape, model.m)
    sqrt_n = math.sqrt(x.size)
    ev = _LineEvaluator(model, f, lam)

    def grad(v, z):
        g = ev.gradient(v, z)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite energy gradient")
        return g

    e = energy(model, x, f, lam)
    z = ev.responses(x)
    g = grad(x, z)
    gnorm = float(np.linalg.norm(g)) / sqrt_n
    energies, gnorms = [e], [gnorm]
    memory: deque = deque(maxlen=cfg.lbfgs_memory)
    reason = Termination.MAX_ITERS
    it = 0

    while True:
        if gnorm <= cfg.epsilon_l:
            reason = Termination.TOLERANCE
            break
        if it >= cfg.max_iters:
            reason = Termination.MAX_ITERS
            break

        d = _two_loop(g, memory)
        slope = float(np.vdot(g, d))
        if not slope < 0:
            memory.clear()
            d = -g
            slope = -float(np.vdot(g, g))
        a_init = 1.0 if memory else min(1.0, 1.0 / float(np.max(np.abs(g))))
        zd = ev.responses(d)
        rd = float(np.vdot(x - f, d))
        dd = float(np.vdot(d, d))

        def phi(a):
            return ev.change(z, zd, rd, dd, a)

        def dphi(a):
            xa = x + a * d
            za = ev.responses(xa)
            ga = grad(xa, za)
            return float(np.vdot(ga, d)), (ga, za)

        try:
            a, de, (g_new, z_new) = _strong_wolfe(phi, dphi, slope, a_init, cfg.c1, cfg.c2)
        except _LineSearchFailed:
            if memory:
                # retry once from steepest descent before giving up
                memory.clear()
                continue
            reason = Termination.LINE_SEARCH_FAILURE
            break
        if not math.isfinite(de):
            raise FloatingPointError("non-finite energy during line search")

        s = a * d
        x = x + s
        y = g_new - g
        sy = float(np.vdot(s, y))
        if sy > 1e-300:
            memory.append((s, y, 1.0 / sy))
        g, z = g_new, z_new
        e = e + de
        gnorm = float(np.linalg.norm(g)) / sqrt_n
        energies.append(e)
        gnorms.append(gnorm)
        it += 1

    report = SolveReport(
        iterations=it,
        final_normalized_grad=gnorm,
        converged=gnorm <= cfg.epsilon_l,
        termination_reason=reason,
        energy_trace=energies,
        grad_trace=gnorms,
    )
    return x, report


def _two_loop(g, memory):
    q = -g.copy()
    if not memory:
        return q
    alphas = []
    for s, y, r in reversed(memory):
        a = r * float(np.vdot(s, q))
        alphas.append(a)
        q -= a * y
    s, y, r = memory[-1]
    q *= 1.0 / (r * float(np.vdot(y, y)))
    for (s, y, r), a in zip(memory, reversed(alphas)):
        b = r * float(np.vdot(y, q))
        q += (a - b) * s
    return q


def denoise(model: FoEModel, f, sigma: float, cfg: InnerSolveConfig, return_report=False):
    """MAP denoising with the data weight ``lam = 25 / sigma``, started at ``f``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x, report = minimize_energy(model, f, 25.0 / sigma, f, cfg)
    return (x, report) if return_report else x
