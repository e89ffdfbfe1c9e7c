"""Diagonal-covariance Gaussians and finite mixtures.

Covers densities, products of Gaussians, Dirichlet-weighted aggregation of
per-datapoint mixtures into one global mixture, sampling, and the K!-component
mixture over concatenated slots.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, UnsupportedSizeError

LOG_2PI = math.log(2.0 * math.pi)
WEIGHT_TOL = 1e-9
MAX_CONCAT_SLOTS = 8


def _vector(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True).reshape(-1)
    if arr.size == 0:
        raise ContractError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self) -> None:
        mean = _vector(self.mean, "mean")
        var = _vector(self.var, "var")
        if mean.shape != var.shape:
            raise ContractError(f"mean/var length mismatch: {mean.size} vs {var.size}")
        if np.any(var <= 0):
            raise ContractError("variances must be strictly positive")
        mean.flags.writeable = False
        var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.size


def _check_dim(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != d:
        raise ContractError(f"expected points of dimension {d}, got shape {x.shape}")
    return x


def _diag_logpdf(x, mean, var):
    return -0.5 * np.sum(LOG_2PI + np.log(var) + (x - mean) ** 2 / var, axis=-1)


def log_density(g: DiagGaussian, x) -> np.ndarray | float:
    """Log density of ``g`` at ``x``; ``x`` may carry leading batch axes."""
    x = _check_dim(x, g.dim)
    out = _diag_logpdf(x, g.mean, g.var)
    return float(out) if np.ndim(out) == 0 else out


class GaussianMixture:
    """Finite mixture of diagonal Gaussians stored as stacked arrays.

    ``means`` and ``vars`` are ``(K, d)``; ``weights`` is ``(K,)``.
    """

    def __init__(self, weights, means, vars) -> None:  # noqa: A002
        w = np.array(weights, dtype=np.float64, copy=True).reshape(-1)
        mu = np.array(means, dtype=np.float64, copy=True)
        s2 = np.array(vars, dtype=np.float64, copy=True)
        if mu.ndim != 2 or s2.shape != mu.shape:
            raise ContractError(f"means/vars must be (K, d) and equal, got {mu.shape}, {s2.shape}")
        if w.size == 0 or w.size != mu.shape[0]:
            raise ContractError("weights must match a non-empty component list")
        if mu.shape[1] < 1:
            raise ContractError("dimension must be >= 1")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(s2))):
            raise ContractError("mixture parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ContractError(f"weights must be a probability vector (sum={w.sum()!r})")
        if np.any(s2 <= 0):
            raise ContractError("variances must be strictly positive")
        for arr in (w, mu, s2):
            arr.flags.writeable = False
        self.weights = w
        self.means = mu
        self.vars = s2

    @classmethod
    def from_components(cls, weights, components: Sequence[DiagGaussian]) -> GaussianMixture:
        if not components:
            raise ContractError("components must be non-empty")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ContractError(f"components disagree on dimension: {sorted(dims)}")
        return cls(weights, [c.mean for c in components], [c.var for c in components])

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[DiagGaussian]:
        return [DiagGaussian(m, v) for m, v in zip(self.means, self.vars)]

    def component_log_densities(self, x) -> np.ndarray:
        """``(..., K)`` log densities of every component at ``x``."""
        x = _check_dim(x, self.dim)
        return _diag_logpdf(x[..., None, :], self.means, self.vars)

    def __repr__(self) -> str:
        return f"GaussianMixture(K={self.n_components}, d={self.dim})"


def mixture_log_density(m: GaussianMixture, x) -> np.ndarray | float:
    with np.errstate(divide="ignore"):
        log_w = np.log(m.weights)
    out = logsumexp(m.component_log_densities(x) + log_w, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def gaussian_product(a: DiagGaussian, b: DiagGaussian) -> tuple[DiagGaussian, float]:
    """Normalized product of two Gaussians and its normalizer ``c``.

    ``c = integral N_a(z) N_b(z) dz = N(mean_a; mean_b, var_a + var_b)``.
    """
    if a.dim != b.dim:
        raise ContractError(f"dimension mismatch: {a.dim} vs {b.dim}")
    var = 1.0 / (1.0 / a.var + 1.0 / b.var)
    mean = var * (a.mean / a.var + b.mean / b.var)
    log_c = _diag_logpdf(a.mean, b.mean, a.var + b.var)
    return DiagGaussian(mean, var), float(np.exp(log_c))


def _product_log_count(a: DiagGaussian, b: DiagGaussian) -> float:
    return float(_diag_logpdf(a.mean, b.mean, a.var + b.var))


def dirichlet_posterior_weights(alpha, counts) -> np.ndarray:
    """Posterior-mean mixing weights ``(alpha + c) / sum(alpha + c)``."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    counts = np.asarray(counts, dtype=np.float64).reshape(-1)
    if alpha.size == 0:
        raise ContractError("alpha must be non-empty")
    if alpha.shape != counts.shape:
        raise ContractError("alpha and counts must have equal length")
    if np.any(alpha <= 0) or np.any(counts < 0):
        raise ContractError("alpha must be positive and counts nonnegative")
    post = alpha + counts
    return post / post.sum()


@dataclass
class AggregatePosterior:
    """Per-datapoint mixtures, their updated weights, and the flattened mixture."""

    locals: list[GaussianMixture]
    weights: np.ndarray  # (M, K) updated per-datapoint weights
    flattened: GaussianMixture
    mode: str = "dirac"
    n_datapoints: int = field(init=False)

    def __post_init__(self) -> None:
        self.n_datapoints = len(self.locals)


def aggregate_posterior(
    locals: Sequence[GaussianMixture],  # noqa: A002
    encodings: Sequence | None = None,
    mode: str = "dirac",
    alpha: float = 1.0,
) -> AggregatePosterior:
    """Marginalize per-datapoint slot mixtures into one M*K-component mixture.

    ``dirac`` mode keeps each local mixture as is (deterministic encoder).
    ``gaussian`` mode multiplies each component with the datapoint's encoding
    ``q(z|x_i)`` (a :class:`DiagGaussian`) and reweights with Dirichlet
    pseudo-counts under a symmetric prior ``alpha``.
    """
    if not locals:
        raise ContractError("need at least one local mixture")
    K, d = locals[0].n_components, locals[0].dim
    for m in locals:
        if m.n_components != K or m.dim != d:
            raise ContractError("local mixtures must share K and d")
    M = len(locals)
    if mode == "dirac":
        if encodings is not None:
            if len(encodings) != M:
                raise ContractError("one encoding per datapoint required")
            for e in encodings:
                _check_dim(np.asarray(e), d)
        weights = np.stack([m.weights for m in locals])
        means = np.stack([m.means for m in locals])
        vars_ = np.stack([m.vars for m in locals])
    elif mode == "gaussian":
        if encodings is None or len(encodings) != M:
            raise ContractError("gaussian mode needs one DiagGaussian encoding per datapoint")
        weights = np.empty((M, K))
        means = np.empty((M, K, d))
        vars_ = np.empty((M, K, d))
        alpha_vec = np.full(K, float(alpha))
        for i, (m, enc) in enumerate(zip(locals, encodings)):
            if not isinstance(enc, DiagGaussian) or enc.dim != d:
                raise ContractError("gaussian mode encodings must be DiagGaussian of dim d")
            log_counts = np.empty(K)
            for k, comp in enumerate(m.components):
                prod, _ = gaussian_product(comp, enc)
                means[i, k] = prod.mean
                vars_[i, k] = prod.var
                log_counts[k] = _product_log_count(comp, enc)
            weights[i] = dirichlet_posterior_weights(alpha_vec, np.exp(log_counts))
    else:
        raise ContractError(f"unknown aggregation mode {mode!r}")
    flat_w = (weights / M).reshape(-1)
    # absorb the rounding of the 1/M scaling so the flattened weights validate
    flat_w = flat_w / flat_w.sum()
    flattened = GaussianMixture(flat_w, means.reshape(M * K, d), vars_.reshape(M * K, d))
    if mode == "dirac":
        out_locals = list(locals)
    else:
        out_locals = [GaussianMixture(weights[i], means[i], vars_[i]) for i in range(M)]
    return AggregatePosterior(out_locals, weights, flattened, mode)


def sample_mixture(m: GaussianMixture, rng: np.random.Generator, size: int | None = None):
    """Draw one point (``size=None``) or ``size`` points from ``m``."""
    n = 1 if size is None else int(size)
    idx = rng.choice(m.n_components, size=n, p=m.weights)
    noise = rng.standard_normal((n, m.dim))
    out = m.means[idx] + np.sqrt(m.vars[idx]) * noise
    return out[0] if size is None else out


def pushforward_diag(m: GaussianMixture, scale, shift) -> GaussianMixture:
    """Image of ``m`` under ``x -> scale * x + shift`` (per-dimension affine)."""
    scale = _check_dim(np.asarray(scale, dtype=np.float64), m.dim)
    shift = _check_dim(np.asarray(shift, dtype=np.float64), m.dim)
    if np.any(scale == 0):
        raise ContractError("scale must be invertible")
    return GaussianMixture(m.weights, m.means * scale + shift, m.vars * scale**2)


def permutation_from_index(index: int, K: int) -> tuple[int, ...]:
    """The ``index``-th permutation of ``range(K)`` in lexicographic order."""
    if not 0 <= index < math.factorial(K):
        raise ContractError(f"permutation index {index} out of range for K={K}")
    pool = list(range(K))
    perm = []
    for pos in range(K, 0, -1):
        block = math.factorial(pos - 1)
        q, index = divmod(index, block)
        perm.append(pool.pop(q))
    return tuple(perm)


class ConcatSlotMixture:
    """Mixture over concatenated slots ``(s_1, ..., s_K)`` in ``R^{K d}``.

    Every ordering of the K base components is one mixture component with
    weight 1/K!; components are built on demand from a permutation index.
    """

    def __init__(self, base: GaussianMixture) -> None:
        self.base = base

    @property
    def n_slots(self) -> int:
        return self.base.n_components

    @property
    def dim(self) -> int:
        return self.n_slots * self.base.dim

    @property
    def n_components(self) -> int:
        return math.factorial(self.n_slots)

    def component(self, index: int) -> DiagGaussian:
        perm = list(permutation_from_index(index, self.n_slots))
        return DiagGaussian(self.base.means[perm].reshape(-1), self.base.vars[perm].reshape(-1))

    def component_means(self) -> np.ndarray:
        """``(K!, K d)`` means of all components, in permutation-index order.

        Materializes every component, so it is limited to K <= 6.
        """
        if self.n_slots > 6:
            raise UnsupportedSizeError("component_means materializes K! rows; only K <= 6 is allowed")
        perms = np.array(list(itertools.permutations(range(self.n_slots))), dtype=np.intp)
        return self.base.means[perms].reshape(len(perms), -1)

    def _guard(self) -> None:
        if self.n_slots > MAX_CONCAT_SLOTS:
            raise UnsupportedSizeError(
                f"K={self.n_slots} gives {self.n_components} components; limit is K <= {MAX_CONCAT_SLOTS}"
            )


def concat_mixture_sample(c: ConcatSlotMixture, rng: np.random.Generator, size: int | None = None):
    """Uniform random slot order, independent Gaussian draw per slot."""
    n = 1 if size is None else int(size)
    K, d = c.n_slots, c.base.dim
    perms = np.argsort(rng.random((n, K)), axis=1)
    noise = rng.standard_normal((n, K, d))
    out = (c.base.means[perms] + np.sqrt(c.base.vars[perms]) * noise).reshape(n, K * d)
    return out[0] if size is None else out


def concat_mixture_log_density(c: ConcatSlotMixture, x) -> np.ndarray | float:
    c._guard()
    K, d = c.n_slots, c.base.dim
    x = _check_dim(x, K * d)
    blocks = x.reshape(x.shape[:-1] + (K, d))
    # table[..., k, j]: log density of block j under slot k
    table = _diag_logpdf(blocks[..., None, :, :], c.base.means[:, None, :], c.base.vars[:, None, :])
    perms = np.array(list(itertools.permutations(range(K))), dtype=np.intp)
    per_perm = table[..., perms, np.arange(K)].sum(axis=-1)
    out = logsumexp(per_perm, axis=-1) - math.lgamma(K + 1)
    return float(out) if np.ndim(out) == 0 else out


# -- grid quadrature helpers --------------------------------------------------


def grid_density_2d(m: GaussianMixture, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Density on the tensor grid ``xs x ys``; returns ``(len(ys), len(xs))``.

    Diagonal components factor per axis, so the grid is one matrix product.
    """
    if m.dim != 2:
        raise ContractError("grid_density_2d needs a 2-D mixture")
    sx = np.sqrt(m.vars[:, 0])[:, None]
    sy = np.sqrt(m.vars[:, 1])[:, None]
    gx = np.exp(-0.5 * ((xs[None, :] - m.means[:, :1]) / sx) ** 2) / (sx * math.sqrt(2 * math.pi))
    gy = np.exp(-0.5 * ((ys[None, :] - m.means[:, 1:]) / sy) ** 2) / (sy * math.sqrt(2 * math.pi))
    return (gy * m.weights[:, None]).T @ gx


def box_mass(m: GaussianMixture, lo, hi) -> float:
    """Exact probability mass of ``m`` inside the axis-aligned box ``[lo, hi]``."""
    from scipy.special import ndtr

    lo = _check_dim(np.asarray(lo, dtype=np.float64), m.dim)
    hi = _check_dim(np.asarray(hi, dtype=np.float64), m.dim)
    sd = np.sqrt(m.vars)
    per_axis = ndtr((hi - m.means) / sd) - ndtr((lo - m.means) / sd)
    return float(np.sum(m.weights * np.prod(per_axis, axis=1)))


def _axis_trapezoid(means: np.ndarray, sd: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Trapezoid integral of each 1-D Gaussian over ``grid``."""
    out = np.empty(len(means))
    chunk = max(1, 4_000_000 // len(grid))
    for start in range(0, len(means), chunk):
        mu = means[start : start + chunk, None]
        s = sd[start : start + chunk, None]
        g = np.exp(-0.5 * ((grid[None, :] - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        out[start : start + chunk] = np.trapezoid(g, grid, axis=1)
    return out


def grid_integral_2d(m: GaussianMixture, xs: np.ndarray, ys: np.ndarray) -> float:
    """Trapezoid integral of the density over the tensor grid ``xs x ys``.

    Equal to integrating :func:`grid_density_2d`, but the rule factors per
    axis for diagonal components, so the cost is linear in the grid size.
    """
    if m.dim != 2:
        raise ContractError("grid_integral_2d needs a 2-D mixture")
    sd = np.sqrt(m.vars)
    tx = _axis_trapezoid(m.means[:, 0], sd[:, 0], np.asarray(xs, dtype=np.float64))
    ty = _axis_trapezoid(m.means[:, 1], sd[:, 1], np.asarray(ys, dtype=np.float64))
    return float(np.sum(m.weights * tx * ty))


def grid_normalization_2d(
    m: GaussianMixture, n: int = 801, pad: float = 6.0, max_n: int = 250001
) -> tuple[float, float]:
    """Trapezoid integral of the density over a padded bounding box.

    The grid has at least ``n`` points per axis and is refined (up to
    ``max_n``) until its spacing is no wider than the narrowest component's
    standard deviation. Returns ``(integral, box_mass)``; the ratio is the
    coverage-adjusted normalization.
    """
    sd = np.sqrt(m.vars)
    lo = (m.means - pad * sd).min(axis=0)
    hi = (m.means + pad * sd).max(axis=0)
    need = np.ceil((hi - lo) / sd.min(axis=0)).astype(int) + 1
    nx, ny = (int(min(max(n, k), max_n)) for k in need)
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    return grid_integral_2d(m, xs, ys), box_mass(m, lo, hi)
