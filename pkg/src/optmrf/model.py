"""Field-of-Experts energy with a Lorentzian potential.

Images are plain 2-D float arrays in gray-value units ([0, 255] nominal,
never clamped here).  Filters are odd, square kernels built as linear
combinations of a fixed orthonormal, mean-zero basis.  All linear filter
operators use periodic boundaries, so every ``K`` is square and its
transpose is the correlation with the same taps.

The energy is

    E(x) = sum_i alpha_i sum_p rho((K_i x)_p) + lam/2 ||x - f||^2,

with ``rho(z) = log(1 + z^2)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MODEL_MAGIC = "foe-model v1"


# -- potential --------------------------------------------------------------

def rho(z):
    """Lorentzian potential ``log(1 + z^2)``."""
    return np.log1p(np.square(z))


def rho_prime(z):
    z = np.asarray(z, dtype=float)
    return 2.0 * z / (1.0 + z * z)


def rho_second(z):
    z = np.asarray(z, dtype=float)
    z2 = z * z
    return 2.0 * (1.0 - z2) / np.square(1.0 + z2)


# -- basis and model --------------------------------------------------------

@dataclass(frozen=True)
class FilterBasis:
    """Ordered stack of ``m x m`` basis kernels, shape ``(n_basis, m, m)``."""

    kernels: np.ndarray
    name: str = "dct"

    def __post_init__(self):
        k = np.array(self.kernels, dtype=float)
        if k.ndim != 3 or k.shape[1] != k.shape[2]:
            raise ValueError(f"basis kernels must have shape (n, m, m), got {k.shape}")
        if k.shape[1] % 2 == 0:
            raise ValueError(f"kernel side must be odd, got {k.shape[1]}")
        k.setflags(write=False)
        object.__setattr__(self, "kernels", k)

    @property
    def m(self) -> int:
        return self.kernels.shape[1]

    @property
    def size(self) -> int:
        return self.kernels.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        """Basis kernels flattened row-major, shape ``(n_basis, m*m)``."""
        return self.kernels.reshape(self.size, -1)


def build_dct_basis(m: int) -> FilterBasis:
    """Return the ``m*m - 1`` non-constant 2-D DCT-II kernels.

    Kernels have unit tap norm and are ordered row-major over the
    frequency pair ``(u, v)``, skipping ``(0, 0)``.
    """
    if not isinstance(m, (int, np.integer)) or m < 3 or m % 2 == 0:
        raise ValueError(f"DCT basis side must be an odd integer >= 3, got {m!r}")
    n = np.arange(m)
    scale = np.full(m, np.sqrt(2.0 / m))
    scale[0] = np.sqrt(1.0 / m)
    # rows are frequencies, columns are sample positions
    c = scale[:, None] * np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * m))
    kernels = [np.outer(c[u], c[v]) for u in range(m) for v in range(m) if (u, v) != (0, 0)]
    return FilterBasis(np.stack(kernels), name="dct")


@dataclass(frozen=True)
class FoEModel:
    """Learnable prior: filter weights ``alpha`` and basis coefficients ``beta``.

    ``beta[i]`` holds the coefficients of filter ``i`` in ``basis``;
    ``alpha`` must be nonnegative.
    """

    basis: FilterBasis
    beta: np.ndarray
    alpha: np.ndarray
    filters: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float, ndmin=2)
        alpha = np.array(self.alpha, dtype=float, ndmin=1)
        if beta.shape[1] != self.basis.size:
            raise ValueError(f"beta has {beta.shape[1]} columns, basis has {self.basis.size} kernels")
        if alpha.shape != (beta.shape[0],):
            raise ValueError(f"alpha shape {alpha.shape} does not match {beta.shape[0]} filters")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(alpha))):
            raise ValueError("model parameters must be finite")
        if np.any(alpha < 0):
            raise ValueError("alpha must be nonnegative")
        filters = (beta @ self.basis.matrix).reshape(-1, self.basis.m, self.basis.m)
        for a in (beta, alpha, filters):
            a.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "filters", filters)

    @property
    def n_filters(self) -> int:
        return self.beta.shape[0]

    @property
    def m(self) -> int:
        return self.basis.m

    @classmethod
    def initial(cls, basis: FilterBasis, n_filters: int, alpha0: float = 0.01) -> "FoEModel":
        """Filter ``i`` starts as basis kernel ``i mod n_basis`` with weight ``alpha0``."""
        beta = np.zeros((n_filters, basis.size))
        beta[np.arange(n_filters), np.arange(n_filters) % basis.size] = 1.0
        return cls(basis, beta, np.full(n_filters, float(alpha0)))

    def replace(self, alpha=None, beta=None) -> "FoEModel":
        return FoEModel(self.basis,
                        self.beta if beta is None else beta,
                        self.alpha if alpha is None else alpha)


def assemble_filter(model: FoEModel, i: int) -> np.ndarray:
    """Kernel ``K_i = sum_j beta_ij B_j`` as an ``m x m`` array."""
    if not 0 <= i < model.n_filters:
        raise IndexError(f"filter index {i} out of range for {model.n_filters} filters")
    return np.array(model.filters[i])


# -- periodic convolution ---------------------------------------------------

@functools.lru_cache(maxsize=64)
def _gather_index(h: int, w: int, m: int) -> np.ndarray:
    """Flat source index for each (pixel, tap): ``x[p - offset(tap)]`` wrapped."""
    r = m // 2
    rows = np.arange(h)[:, None, None, None]
    cols = np.arange(w)[None, :, None, None]
    a = np.arange(m)[None, None, :, None]
    b = np.arange(m)[None, None, None, :]
    idx = ((rows - a + r) % h) * w + (cols - b + r) % w
    idx = idx.reshape(h * w, m * m)
    idx.setflags(write=False)
    return idx


def _check_image(x, name="image") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def _check_fits(shape, m):
    if shape[0] < m or shape[1] < m:
        raise ValueError(f"image {shape[0]}x{shape[1]} is smaller than the {m}x{m} kernel")


def _check_kernel(k) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got shape {k.shape}")
    return k


def _patches(x: np.ndarray, m: int) -> np.ndarray:
    """Periodic patch matrix, shape ``(h*w, m*m)``; ``patches @ k.ravel()`` is ``k * x``."""
    return x.ravel()[_gather_index(x.shape[0], x.shape[1], m)]


def _scatter(w: np.ndarray, shape, m: int) -> np.ndarray:
    """Adjoint of :func:`_patches` for a ``(h*w, m*m)`` array."""
    idx = _gather_index(shape[0], shape[1], m)
    return np.bincount(idx.ravel(), weights=w.ravel(), minlength=shape[0] * shape[1]).reshape(shape)


def conv_apply(k, x) -> np.ndarray:
    """Periodic convolution ``k * x`` (kernel centered on its middle tap)."""
    k = _check_kernel(k)
    x = _check_image(x)
    _check_fits(x.shape, k.shape[0])
    return (_patches(x, k.shape[0]) @ k.ravel()).reshape(x.shape)


def conv_adjoint(k, y) -> np.ndarray:
    """Exact transpose of :func:`conv_apply` for the same kernel."""
    k = _check_kernel(k)
    y = _check_image(y)
    _check_fits(y.shape, k.shape[0])
    m = k.shape[0]
    return _scatter(y.reshape(-1, 1) * k.ravel()[None, :], y.shape, m)


def filter_matrix(k, shape) -> sp.csr_matrix:
    """Sparse ``N_p x N_p`` matrix of :func:`conv_apply` on images of ``shape``."""
    k = _check_kernel(k)
    _check_fits(shape, k.shape[0])
    n = shape[0] * shape[1]
    idx = _gather_index(shape[0], shape[1], k.shape[0])
    rows = np.repeat(np.arange(n), idx.shape[1])
    data = np.tile(k.ravel(), n)
    return sp.csr_matrix((data, (rows, idx.ravel())), shape=(n, n))


# -- energy and derivatives -------------------------------------------------

def _prepare(model: FoEModel, x, f=None):
    x = _check_image(x, "x")
    _check_fits(x.shape, model.m)
    if f is not None:
        f = _check_image(f, "f")
        if f.shape != x.shape:
            raise ValueError(f"x has shape {x.shape} but f has shape {f.shape}")
    return x, f


def _responses(model: FoEModel, x: np.ndarray) -> np.ndarray:
    """Filter responses ``(K_i x)_p`` stacked as ``(N_p, N_f)``."""
    return _patches(x, model.m) @ model.filters.reshape(model.n_filters, -1).T


def _responses_adjoint(model: FoEModel, u: np.ndarray, shape) -> np.ndarray:
    """``sum_i K_i^T u[:, i]`` for a ``(N_p, N_f)`` array ``u``."""
    return _scatter(u @ model.filters.reshape(model.n_filters, -1), shape, model.m)


def energy(model: FoEModel, x, f, lam: float) -> float:
    x, f = _prepare(model, x, f)
    z = _responses(model, x)
    prior = float(np.sum(rho(z) @ model.alpha))
    return prior + 0.5 * lam * float(np.sum(np.square(x - f)))


def energy_gradient(model: FoEModel, x, f, lam: float) -> np.ndarray:
    x, f = _prepare(model, x, f)
    z = _responses(model, x)
    return _responses_adjoint(model, rho_prime(z) * model.alpha, x.shape) + lam * (x - f)


def energy_change(model: FoEModel, x, d, f, lam: float, step: float) -> float:
    """``E(x + step*d) - E(x)`` evaluated without cancellation.

    Near a minimizer the difference is far below the rounding error of
    ``E`` itself, so line searches compare steps with this instead.
    """
    x, f = _prepare(model, x, f)
    d = np.asarray(d, dtype=float)
    z = _responses(model, x)
    w = step * _responses(model, d)
    # log(1 + (z+w)^2) - log(1 + z^2) = log1p(w (2z + w) / (1 + z^2))
    prior = float(np.sum(np.log1p(w * (2.0 * z + w) / (1.0 + z * z)) @ model.alpha))
    r = x - f
    data = lam * (step * float(np.vdot(r, d)) + 0.5 * step * step * float(np.vdot(d, d)))
    return prior + data


class _LineEvaluator:
    """Energy changes and gradients along search lines without re-validation.

    Used inside the inner solver, where the same model, data and shape are
    evaluated thousands of times.  Results are identical to
    :func:`energy_change` and :func:`energy_gradient`.
    """

    def __init__(self, model: FoEModel, f: np.ndarray, lam: float):
        self.f = f
        self.lam = lam
        self.alpha = model.alpha
        self.kmat = model.filters.reshape(model.n_filters, -1)
        self.idx = _gather_index(f.shape[0], f.shape[1], model.m)
        self.flat_idx = self.idx.ravel()

    def responses(self, x):
        return x.ravel()[self.idx] @ self.kmat.T

    def gradient(self, x, z):
        w = (rho_prime(z) * self.alpha) @ self.kmat
        g = np.bincount(self.flat_idx, weights=w.ravel(), minlength=x.size).reshape(x.shape)
        return g + self.lam * (x - self.f)

    def change(self, z, zd, rd, dd, step):
        """``E(x + step d) - E(x)`` given ``z = Kx``, ``zd = Kd``, ``rd = <x - f, d>``, ``dd = <d, d>``."""
        w = step * zd
        prior = float(np.sum(np.log1p(w * (2.0 * z + w) / (1.0 + z * z)) @ self.alpha))
        return prior + self.lam * (step * rd + 0.5 * step * step * dd)


def hessian_apply(model: FoEModel, x, v, lam: float) -> np.ndarray:
    """``H_E(x) v`` with ``H_E = sum_i alpha_i K_i^T diag(rho''(K_i x)) K_i + lam I``."""
    x, v = _prepare(model, x, v)
    curv = rho_second(_responses(model, x)) * model.alpha
    return _responses_adjoint(model, curv * _responses(model, v), x.shape) + lam * v


def hessian_assemble(model: FoEModel, x, lam: float) -> sp.csc_matrix:
    """Sparse symmetric ``H_E(x)``; may be indefinite."""
    x, _ = _prepare(model, x)
    n = x.size
    curv = rho_second(_responses(model, x)) * model.alpha
    h = lam * sp.identity(n, format="csr")
    for i in range(model.n_filters):
        if model.alpha[i] == 0.0:
            continue
        k = filter_matrix(model.filters[i], x.shape)
        h = h + k.T @ sp.diags(curv[:, i]) @ k
    h = h.tocsc()
    # symmetrize away rounding-order differences between (i,j) and (j,i)
    return ((h + h.T) * 0.5).tocsc()


# -- model file -------------------------------------------------------------

def save_model(path, model: FoEModel) -> None:
    if model.basis.name != "dct":
        raise ValueError(f"only dct bases can be written, got {model.basis.name!r}")
    lines = [MODEL_MAGIC, f"m={model.m} Nf={model.n_filters} basis={model.basis.name}"]
    for a, row in zip(model.alpha, model.beta):
        lines.append(" ".join(format(float(v), ".17g") for v in (a, *row)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> FoEModel:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (expected header {MODEL_MAGIC!r})")
    try:
        fields = dict(item.split("=", 1) for item in text[1].split())
        m, nf, name = int(fields["m"]), int(fields["Nf"]), fields["basis"]
    except (IndexError, KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed model description line") from exc
    if name != "dct":
        raise ValueError(f"{path}: unsupported basis {name!r}")
    basis = build_dct_basis(m)
    rows = [line.split() for line in text[2:] if line.strip()]
    if len(rows) != nf or any(len(r) != basis.size + 1 for r in rows):
        raise ValueError(f"{path}: expected {nf} filter lines of {basis.size + 1} values")
    values = np.array(rows, dtype=float)
    return FoEModel(basis, values[:, 1:], values[:, 0])
