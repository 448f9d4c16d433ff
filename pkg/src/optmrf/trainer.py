"""Loss-specific training of the FoE prior by bi-level optimization.

For a training pair ``(f, g)`` the lower-level problem gives
``x*(theta) = argmin_x E(x; f, theta)`` (data weight fixed to 1) and the
upper level minimizes ``L = 1/2 ||x* - g||^2``.  Differentiating the
stationarity condition ``grad_x E(x*) = 0`` gives, with
``H p = -(x* - g)``,

    dL/dalpha_i  = <K_i^T rho'(K_i x*), p>
    dL/dbeta_ij  = alpha_i <B_j^T rho'(K_i x*) + K_i^T D_i B_j x*, p>

where ``D_i = diag(rho''(K_i x*))``.  The outer problem is solved with
bound-constrained L-BFGS (``alpha >= 0``).
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .inner import InnerSolveConfig, SolveReport, minimize_energy
from .linsolve import SingularSystemError, solve_hessian
from .model import FoEModel, _check_image, _patches, _responses, rho_prime, rho_second

log = logging.getLogger(__name__)

TRAIN_LAMBDA = 1.0


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingSample:
    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        f = _check_image(self.f, "f")
        g = _check_image(self.g, "g")
        if f.shape != g.shape:
            raise ValueError(f"noisy patch {f.shape} and clean patch {g.shape} differ in shape")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "g", g)


@dataclass(frozen=True)
class TrainConfig:
    inner: InnerSolveConfig = field(default_factory=InnerSolveConfig)
    outer_max_iters: int = 500
    outer_rel_tol: float = 1e-5
    adjoint_tol: float = 1e-10
    seed: int = 0
    warm_start: bool = False
    workers: int = 1
    max_fail_fraction: float = 0.25

    def __post_init__(self):
        if not (self.outer_rel_tol > 0 and self.adjoint_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.outer_max_iters < 1:
            raise ValueError("outer_max_iters must be at least 1")


@dataclass
class GradientPack:
    d_alpha: np.ndarray
    d_beta: np.ndarray
    loss: float
    per_sample_reports: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    # lower-level solutions in sample order, None for skipped samples
    x_stars: list = field(default_factory=list, repr=False)

    def __add__(self, other: "GradientPack") -> "GradientPack":
        n = len(self.x_stars)
        return GradientPack(self.d_alpha + other.d_alpha, self.d_beta + other.d_beta,
                            self.loss + other.loss,
                            self.per_sample_reports + other.per_sample_reports,
                            self.skipped + [n + k for k in other.skipped],
                            self.x_stars + other.x_stars)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_alpha, self.d_beta.ravel()])


def loss(x_star, g) -> float:
    """Half squared distance to the ground truth."""
    x_star = np.asarray(x_star, dtype=float)
    g = np.asarray(g, dtype=float)
    if x_star.shape != g.shape:
        raise ValueError(f"shape mismatch: {x_star.shape} vs {g.shape}")
    return 0.5 * float(np.sum(np.square(x_star - g)))


def implicit_gradients(model: FoEModel, x_star, g, adjoint_tol=1e-10):
    """Loss gradients at a lower-level solution ``x_star``.

    Returns ``(d_alpha, d_beta, adjoint_residual)``.  The gradients are exact
    for the given ``x_star`` only to the extent it is stationary.
    """
    x_star = np.asarray(x_star, dtype=float)
    r = x_star - g
    p, res = solve_hessian(model, x_star, TRAIN_LAMBDA, -r, tol=adjoint_tol)
    z = _responses(model, x_star)
    kp = _responses(model, p)
    d1 = rho_prime(z)
    d2kp = rho_second(z) * kp
    bmat = model.basis.matrix
    bx = _patches(x_star, model.m) @ bmat.T
    bp = _patches(p, model.m) @ bmat.T
    d_alpha = np.sum(d1 * kp, axis=0)
    d_beta = model.alpha[:, None] * (d1.T @ bp + d2kp.T @ bx)
    return d_alpha, d_beta, res


def sample_gradients(model: FoEModel, sample: TrainingSample, cfg: TrainConfig, x0=None):
    """Loss and parameter gradients for one training pair.

    Raises :class:`~optmrf.linsolve.SingularSystemError` if the Hessian at
    the lower-level solution cannot be solved; callers summing over a
    dataset skip such samples.
    """
    start = sample.f if x0 is None else x0
    x_star, report = minimize_energy(model, sample.f, TRAIN_LAMBDA, start, cfg.inner)
    if not report.converged:
        log.info("inner solve stopped at normalized gradient %.3e (%s)",
                 report.final_normalized_grad, report.termination_reason.value)
    d_alpha, d_beta, _ = implicit_gradients(model, x_star, sample.g, cfg.adjoint_tol)
    return GradientPack(d_alpha, d_beta, loss(x_star, sample.g), [report], x_stars=[x_star])


def _skipped(model: FoEModel) -> GradientPack:
    return GradientPack(np.zeros(model.n_filters), np.zeros_like(model.beta), 0.0,
                        skipped=[0], x_stars=[None])


def dataset_gradients(model: FoEModel, samples, cfg: TrainConfig, x0s=None):
    """Sum of per-sample packs in sample order.

    Samples whose Hessian is singular are skipped and listed in
    ``pack.skipped``.  Raises :class:`TrainingError` when every sample is
    skipped or when more than ``cfg.max_fail_fraction`` of the inner solves
    did not reach tolerance.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one training sample")

    def work(k):
        try:
            return sample_gradients(model, samples[k], cfg, None if x0s is None else x0s[k])
        except SingularSystemError as exc:
            log.warning("sample %d skipped: %s", k, exc)
            return None

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            packs = list(pool.map(work, range(len(samples))))
    else:
        packs = [work(k) for k in range(len(samples))]

    total = packs[0] if packs[0] is not None else _skipped(model)
    for pack in packs[1:]:
        total = total + (pack if pack is not None else _skipped(model))
    if len(total.skipped) == len(samples):
        raise TrainingError("every training sample had a singular Hessian")
    failed = sum(not r.converged for r in total.per_sample_reports)
    if failed > cfg.max_fail_fraction * len(samples):
        raise TrainingError(f"{failed} of {len(samples)} inner solves missed tolerance "
                            f"{cfg.inner.epsilon_l:g}")
    return total


@dataclass
class TrainHistory:
    """Per accepted outer iterate: loss and bookkeeping; ``losses[0]`` is the start."""

    losses: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    reason: str = ""
    evaluations: int = 0

    CSV_COLUMNS = ("outer_iter", "loss", "grad_inf_norm", "mean_inner_iters", "wall_seconds")


def _pack_params(model: FoEModel) -> np.ndarray:
    return np.concatenate([model.alpha, model.beta.ravel()])


def _unpack_params(model: FoEModel, theta: np.ndarray) -> FoEModel:
    nf = model.n_filters
    alpha = np.maximum(theta[:nf], 0.0)
    return model.replace(alpha=alpha, beta=theta[nf:].reshape(model.beta.shape))


def projected_lbfgs(fun, x0, nonneg, max_iters=500, rel_tol=1e-5, memory=10, c1=1e-4,
                    max_backtracks=30, callback=None, recoverable=(ArithmeticError,)):
    """Minimize ``fun`` subject to ``x[nonneg] >= 0``.

    ``fun(x)`` returns ``(value, gradient)``.  Each step takes the L-BFGS
    direction on the free variables (those not pinned at the bound by a
    positive gradient), projects trial points onto the feasible set and
    backtracks until the Armijo condition holds.  If that fails the memory
    is dropped and the step is retried once along the projected gradient.
    A trial point whose evaluation raises one of ``recoverable`` counts as
    rejected.

    Returns ``(x, value, reason)`` with ``reason`` one of ``"tolerance"``
    (relative decrease below ``rel_tol`` or zero projected gradient),
    ``"max_iters"`` or ``"no_feasible_step"``.
    """
    nonneg = np.asarray(nonneg, dtype=bool)

    def project(v):
        return np.where(nonneg, np.maximum(v, 0.0), v)

    x = project(np.asarray(x0, dtype=float))
    f, g = fun(x)
    if callback is not None:
        callback(x, f, g)
    pairs: deque = deque(maxlen=memory)
    reason = "max_iters"
    for _ in range(max_iters):
        free = ~(nonneg & (x <= 0.0) & (g > 0.0))
        pg = np.where(free, g, 0.0)
        if not np.any(pg):
            reason = "tolerance"
            break
        d = np.where(free, _lbfgs_direction(pg, pairs), 0.0)
        if not float(pg @ d) < 0:
            pairs.clear()
            d = -pg
        accepted, xt, ft, gt = _backtrack(fun, project, x, f, g, d, 1.0 if pairs else None,
                                          c1, max_backtracks, recoverable)
        if not accepted and pairs:
            # stale curvature pairs: restart once from steepest descent
            log.info("outer L-BFGS step failed, retrying along the gradient")
            pairs.clear()
            accepted, xt, ft, gt = _backtrack(fun, project, x, f, g, -pg, None,
                                              c1, max_backtracks, recoverable)
        if not accepted:
            reason = "no_feasible_step"
            break
        s, y = xt - x, gt - g
        sy = float(s @ y)
        if sy > 1e-12 * float(y @ y):
            pairs.append((s, y, 1.0 / sy))
        rel = (f - ft) / max(abs(f), abs(ft), 1.0)
        x, f, g = xt, ft, gt
        if callback is not None:
            callback(x, f, g)
        if rel < rel_tol:
            reason = "tolerance"
            break
    return x, f, reason


def _backtrack(fun, project, x, f, g, d, t, c1, max_backtracks, recoverable):
    if t is None:
        t = min(1.0, 1.0 / float(np.max(np.abs(d))))
    xt, ft, gt = x, f, g
    for _ in range(max_backtracks):
        xt = project(x + t * d)
        slope = float(g @ (xt - x))
        try:
            ft, gt = fun(xt)
        except recoverable as exc:
            log.info("outer trial step %.3e rejected: %s", t, exc)
            t *= 0.1
            continue
        if math.isfinite(ft) and slope < 0 and ft <= f + c1 * slope:
            return True, xt, ft, gt
        # safeguarded quadratic backtrack on the projected path
        denom = 2.0 * (ft - f - slope) if math.isfinite(ft) else 0.0
        shrink = -slope / denom if denom > 0 else 0.1
        t *= min(0.5, max(0.1, shrink))
    return False, xt, ft, gt


def _lbfgs_direction(g, pairs):
    q = -g.copy()
    if not pairs:
        return q
    coeffs = []
    for s, y, r in reversed(pairs):
        a = r * float(s @ q)
        coeffs.append(a)
        q -= a * y
    s, y, r = pairs[-1]
    q *= 1.0 / (r * float(y @ y))
    for (s, y, r), a in zip(pairs, reversed(coeffs)):
        q += (a - r * float(y @ q)) * s
    return q


def train(init: FoEModel, samples, cfg: TrainConfig, on_iteration=None):
    """Fit ``(alpha, beta)`` to the summed loss with a projected L-BFGS outer loop.

    Stops when the relative loss change drops below ``cfg.outer_rel_tol``,
    after ``cfg.outer_max_iters`` iterations, or when no step decreasing the
    loss is found.  Returns ``(model, history)``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one training sample")
    t0 = time.perf_counter()
    warm = [None] * len(samples)
    history = TrainHistory()
    last = {}

    def fun(theta):
        model = _unpack_params(init, theta)
        pack = dataset_gradients(model, samples, cfg, warm if cfg.warm_start else None)
        history.evaluations += 1
        last["pack"] = pack
        return pack.loss, pack.flat

    def record(theta, f, g):
        pack = last["pack"]
        if cfg.warm_start:
            warm[:] = [w if x is None else x for w, x in zip(warm, pack.x_stars)]
        iters = [r.iterations for r in pack.per_sample_reports]
        history.losses.append(f)
        history.rows.append((len(history.rows), f, float(np.max(np.abs(g))),
                             float(np.mean(iters)), time.perf_counter() - t0))
        if on_iteration is not None:
            on_iteration(history.rows[-1])

    nonneg = np.zeros(init.n_filters + init.beta.size, dtype=bool)
    nonneg[:init.n_filters] = True
    theta, _, history.reason = projected_lbfgs(
        fun, _pack_params(init), nonneg, max_iters=cfg.outer_max_iters,
        rel_tol=cfg.outer_rel_tol, callback=record,
        recoverable=(TrainingError, ArithmeticError))
    log.info("outer loop stopped after %d iterations: %s", len(history.rows) - 1, history.reason)
    return _unpack_params(init, theta), history


def relative_error(analytic, reference, floor=1e-6, atol=0.0):
    """Componentwise ``|a - r| / max(|a|, |r|, floor * max|r|)``.

    Differences at or below ``atol`` count as zero; this absorbs the
    finite-difference noise on coordinates whose true derivative is zero.
    """
    analytic = np.asarray(analytic, dtype=float)
    reference = np.asarray(reference, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(reference)),
                       floor * float(np.max(np.abs(reference), initial=0.0)))
    diff = np.abs(analytic - reference)
    diff[diff <= atol] = 0.0
    return np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)


# one-sided stencils of matching order, weights on f(0), f(eps), f(2 eps), ...
_FORWARD = {2: (-1.5, 2.0, -0.5), 4: (-25 / 12, 4.0, -3.0, 4 / 3, -0.25)}


def finite_difference_gradients(model: FoEModel, samples, cfg: TrainConfig, eps=1e-4, order=4):
    """Central differences of the summed loss, re-solving the lower level each time.

    ``order`` selects the 2-point (error ~ eps^2) or 4-point (~ eps^4)
    central stencil.  In gray-value units the loss bends on a ``beta`` scale
    of about 1/255, so the 2-point stencil at eps = 1e-4 carries ~1e-3
    truncation error on its own.  Weights within reach of the ``alpha >= 0``
    bound use a one-sided stencil of the same order.  The energy is
    nonconvex, so each perturbed solve starts from the unperturbed solution
    to stay on the same branch of local minimizers.
    Returns the flat ``(alpha, beta)`` gradient estimate.
    """
    samples = list(samples)
    theta0 = _pack_params(model)
    starts = [minimize_energy(model, s.f, TRAIN_LAMBDA, s.f, cfg.inner)[0] for s in samples]

    def total_loss(theta):
        m = model.replace(alpha=theta[:model.n_filters],
                          beta=theta[model.n_filters:].reshape(model.beta.shape))
        out = 0.0
        for s, x0 in zip(samples, starts):
            x, _ = minimize_energy(m, s.f, TRAIN_LAMBDA, x0, cfg.inner)
            out += loss(x, s.g)
        return out

    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    grad = np.zeros_like(theta0)
    base = None
    for k in range(theta0.size):
        e = np.zeros_like(theta0)
        e[k] = eps
        if k < model.n_filters and theta0[k] < order * eps:
            # too close to the alpha >= 0 bound for a central stencil: one-sided
            if base is None:
                base = total_loss(theta0)
            vals = [base] + [total_loss(theta0 + j * e) for j in range(1, order + 1)]
            weights = _FORWARD[order]
            grad[k] = sum(w * v for w, v in zip(weights, vals)) / eps
            continue
        d1 = total_loss(theta0 + e) - total_loss(theta0 - e)
        if order == 2:
            grad[k] = d1 / (2.0 * eps)
        else:
            d2 = total_loss(theta0 + 2 * e) - total_loss(theta0 - 2 * e)
            grad[k] = (8.0 * d1 - d2) / (12.0 * eps)
    return grad


def evaluate_loss(model: FoEModel, samples, inner: InnerSolveConfig) -> float:
    """Summed training loss of ``model`` with lower-level solves at ``inner`` accuracy."""
    out = 0.0
    for s in samples:
        x, _ = minimize_energy(model, s.f, TRAIN_LAMBDA, s.f, inner)
        out += loss(x, s.g)
    return out


__all__ = [
    "GradientPack", "SolveReport", "TrainConfig", "TrainHistory", "TrainingError",
    "TrainingSample", "dataset_gradients", "evaluate_loss", "finite_difference_gradients",
    "implicit_gradients", "loss", "relative_error", "sample_gradients", "train",
]
