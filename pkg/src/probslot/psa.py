"""Probabilistic slot attention: per-datapoint Gaussian-mixture routing.

Each forward pass fits a K-component diagonal GMM to a set of N encoded
features by alternating a responsibility (attention) step and a closed-form
parameter update. All functions accept an optional leading batch axis and
work on plain arrays or on :mod:`~probslot.autodiff` variables.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .gmm import GaussianMixture

VAR_FLOOR = 1e-8
# keeps log(pi) finite once a slot's responsibilities underflow
PI_FLOOR = 1e-300
LOG_2PI = math.log(2.0 * math.pi)


class Variant(str, enum.Enum):
    BASE = "base"  # keys = values = features
    PROJ = "proj"  # keys = W_k z, values = W_v z, projected once
    VALUE_PROJ = "value_proj"  # values re-projected inside every update


@dataclass
class PsaParams:
    w_q: object
    w_k: object
    w_v: object
    variant: Variant = Variant.BASE

    def __post_init__(self) -> None:
        self.variant = Variant(self.variant)
        shapes = {ad.value_of(w).shape for w in (self.w_q, self.w_k, self.w_v)}
        if len(shapes) != 1:
            raise ContractError(f"projection matrices disagree in shape: {shapes}")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ContractError(f"projection matrices must be square, got {shape}")
        for w in (self.w_q, self.w_k, self.w_v):
            if not np.all(np.isfinite(ad.value_of(w))):
                raise ContractError("projection matrices must be finite")
        if self.variant is Variant.BASE:
            eye = np.eye(shape[0])
            if not (
                np.array_equal(ad.value_of(self.w_k), eye)
                and np.array_equal(ad.value_of(self.w_v), eye)
            ):
                raise ContractError("base variant requires identity key/value projections")

    @property
    def dim(self) -> int:
        return ad.value_of(self.w_q).shape[0]

    @classmethod
    def identity(cls, d: int, variant: Variant | str = Variant.BASE) -> PsaParams:
        eye = np.eye(d)
        return cls(eye.copy(), eye.copy(), eye.copy(), Variant(variant))


@dataclass
class PsaState:
    pi: object  # (..., K)
    mu: object  # (..., K, d)
    var: object  # (..., K, d)
    iteration: int = 0

    def numpy(self) -> PsaState:
        return PsaState(
            ad.value_of(self.pi), ad.value_of(self.mu), ad.value_of(self.var), self.iteration
        )

    def permuted(self, perm) -> PsaState:
        """Reorder slots (unbatched or batched, same order for every item)."""
        s = self.numpy()
        return PsaState(s.pi[..., perm], s.mu[..., perm, :], s.var[..., perm, :], s.iteration)

    def to_mixture(self) -> GaussianMixture:
        s = self.numpy()
        if s.mu.ndim != 2:
            raise ContractError("to_mixture needs an unbatched state; use to_mixtures")
        return GaussianMixture(s.pi / s.pi.sum(), s.mu, s.var)

    def to_mixtures(self) -> list[GaussianMixture]:
        s = self.numpy()
        if s.mu.ndim == 2:
            return [self.to_mixture()]
        return [GaussianMixture(p / p.sum(), m, v) for p, m, v in zip(s.pi, s.mu, s.var)]


@dataclass
class AttentionMatrix:
    a: object  # (..., N, K) responsibilities, rows sum to 1
    a_hat: object  # (..., N, K) columns sum to 1
    # slot-major (..., K, N) copies used by the update step
    a_t: object = field(default=None, repr=False)
    a_hat_t: object = field(default=None, repr=False)

    def slot_major(self):
        if self.a_t is None:
            self.a_t = ad.swapaxes(self.a, -1, -2)
            self.a_hat_t = ad.swapaxes(self.a_hat, -1, -2)
        return self.a_t, self.a_hat_t


@dataclass
class SlotSet:
    slots: np.ndarray  # (..., K, d)
    active: np.ndarray  # (..., K) bool


class PsaResult(NamedTuple):
    state: PsaState
    attention: AttentionMatrix
    local: object  # GaussianMixture, or a list of them for batched input


def psa_init(
    K: int,
    d: int,
    rng: np.random.Generator,
    batch_shape: tuple[int, ...] = (),
    loc=0.0,
    scale=1.0,
) -> PsaState:
    """Uniform weights, standard-normal means, unit variances.

    ``loc``/``scale`` shift and stretch the initial means (and scale the
    initial variances); the defaults give the standard initialization.
    """
    if K < 1 or d < 1:
        raise ContractError(f"need K >= 1 and d >= 1, got K={K}, d={d}")
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (d,))
    loc = np.broadcast_to(np.asarray(loc, dtype=np.float64), (d,))
    shape = tuple(batch_shape) + (K, d)
    mu = rng.standard_normal(shape) * scale + loc
    pi = np.full(tuple(batch_shape) + (K,), 1.0 / K)
    var = np.broadcast_to(scale**2, shape).copy()
    return PsaState(pi, mu, var, 0)


def _rowwise_linear(x, w):
    """``x @ w.T`` computed so every row sees identical arithmetic.

    BLAS kernels may round rows differently depending on their position;
    summing an explicit broadcast keeps results independent of slot order.
    """
    return ad.sum(ad.mul(ad.expand_dims(x, -2), w), axis=-1)


def _log_gauss(x, mean, var):
    """Log density of x (..., N, 1, d) under mean/var (..., 1, K, d) -> (..., N, K)."""
    sq = ad.div(ad.square(ad.sub(x, mean)), var)
    return ad.mul(-0.5, ad.sum(ad.add(ad.add(sq, ad.log(var)), LOG_2PI), axis=-1))


def _t(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


def _small_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum over a short axis by adding slices in order (much faster than
    ``ndarray.sum`` for lengths like 2 or 5)."""
    x = np.moveaxis(x, axis, 0)
    out = x[0].copy()
    for piece in x[1:]:
        out += piece
    return out


def _sorted_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum over a short axis in ascending order of the summands.

    The result is bitwise independent of the order of the entries along
    ``axis``. Uses an odd-even transposition network on whole slices.
    """
    rows = list(np.moveaxis(x, axis, 0))
    k = len(rows)
    for rnd in range(k):
        for i in range(rnd % 2, k - 1, 2):
            lo = np.minimum(rows[i], rows[i + 1])
            rows[i + 1] = np.maximum(rows[i], rows[i + 1])
            rows[i] = lo
    out = rows[0].copy()
    for r in rows[1:]:
        out += r
    return out


def _log_responsibilities(keys, q, var, pi):
    """Slot-major ``log A``: (..., K, N) for keys (..., N, d) and slots (..., K, d).

    One fused op working in a (..., K, d, N) layout so the long point axis is
    contiguous. Every (k, n) entry sees the same elementwise arithmetic and
    the normalizer adds slots in sorted order, so permuting slots permutes
    the output exactly.
    """
    kv, qv, vv, pv = (ad.value_of(t) for t in (keys, q, var, pi))
    d = kv.shape[-1]
    diff = _t(kv)[..., None, :, :] - qv[..., :, :, None]  # (..., K, d, N)
    inv = 1.0 / vv
    log_norm = _small_sum(np.log(vv), -1) + d * LOG_2PI  # (..., K)
    sq = diff * diff
    maha = _small_sum(sq * inv[..., None], -2)  # (..., K, N)
    log_joint = -0.5 * (maha + log_norm[..., None]) + np.log(pv)[..., None]
    top = np.max(log_joint, axis=-2, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    log_a = log_joint - (top + np.log(_sorted_sum(np.exp(log_joint - top), -2))[..., None, :])
    a = np.exp(log_a)
    ad._tally(8 * sq.size)

    def vjp(g):
        gl = g - a * _small_sum(g, -2)[..., None, :]  # through log-softmax
        gl *= -0.5  # through the -1/2 Mahalanobis and norm terms
        r = diff * (inv[..., None] * gl[..., None, :])  # (..., K, d, N)
        g_keys = _t(2.0 * _small_sum(r, -3))
        g_q = -2.0 * r.sum(-1)
        s1 = gl.sum(-1)
        s2 = (sq * gl[..., None, :]).sum(-1)
        g_var = inv * s1[..., None] - inv * inv * s2
        g_pi = -2.0 * s1 / pv
        return g_keys, g_q, g_var, g_pi

    return ad.primitive(log_a, (keys, q, var, pi), vjp)


def _weighted_mean(w, values):
    """``mu_k = sum_n w_kn v_n`` for slot-major w (..., K, N), values (..., N, d)."""
    w_t, vv = ad.value_of(w), ad.value_of(values)
    v_t = _t(vv)
    out = (w_t[..., :, None, :] * v_t[..., None, :, :]).sum(-1)
    ad._tally(2 * w_t.shape[-2] * v_t.size)

    def vjp(g):
        g_w = _small_sum(g[..., None] * v_t[..., None, :, :], -2)  # (..., K, N)
        g_v = _small_sum(w_t[..., :, None, :] * g[..., None], -3)  # (..., d, N)
        return g_w, _t(g_v)

    return ad.primitive(out, (w, values), vjp)


def _weighted_spread(w, values, mu):
    """``sum_n w_kn (v_n - mu_k)^2`` per coordinate -> (..., K, d)."""
    wv, vv, mv = (ad.value_of(t) for t in (w, values, mu))
    w_t = wv[..., :, None, :]  # (..., K, 1, N)
    resid = _t(vv)[..., None, :, :] - mv[..., None]  # (..., K, d, N)
    sq = resid * resid
    out = (w_t * sq).sum(-1)
    ad._tally(4 * sq.size)

    def vjp(g):
        g_w = _small_sum(sq * g[..., None], -2)
        wr = 2.0 * w_t * resid * g[..., None]
        return g_w, _t(_small_sum(wr, -3)), -wr.sum(-1)

    return ad.primitive(out, (w, values, mu), vjp)


def e_step(state: PsaState, keys, params: PsaParams) -> AttentionMatrix:
    """Responsibilities of each slot for each key, in log space."""
    q = _rowwise_linear(state.mu, params.w_q)
    log_a = _log_responsibilities(keys, q, state.var, state.pi)
    log_a_hat = ad.sub(log_a, ad.logsumexp(log_a, axis=-1, keepdims=True))
    a, a_hat = ad.exp(log_a), ad.exp(log_a_hat)
    return AttentionMatrix(ad.swapaxes(a, -1, -2), ad.swapaxes(a_hat, -1, -2), a, a_hat)


def m_step(attn: AttentionMatrix, values, iteration: int = 0) -> PsaState:
    """Closed-form slot update from attention and values."""
    a_t, a_hat_t = attn.slot_major()
    mu = _weighted_mean(a_hat_t, values)
    var = ad.maximum(_weighted_spread(a_hat_t, values, mu), VAR_FLOOR)
    n = ad.value_of(a_t).shape[-1]
    pi = ad.maximum(ad.div(ad.sum(a_t, axis=-1), float(n)), PI_FLOOR)
    return PsaState(pi, mu, var, iteration + 1)


def run_psa(z, params: PsaParams, init: PsaState, T: int) -> tuple[PsaState, AttentionMatrix]:
    """T routing iterations from a given initial state (differentiable)."""
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    zv = ad.value_of(z)
    if zv.shape[-1] != params.dim:
        raise ContractError(f"features have dim {zv.shape[-1]}, params expect {params.dim}")
    if not np.all(np.isfinite(zv)):
        raise ContractError("features must be finite")
    if params.variant is Variant.BASE:
        keys = values = z
    else:
        keys = _rowwise_linear(z, params.w_k)
        values = _rowwise_linear(z, params.w_v) if params.variant is Variant.PROJ else None
    state = init
    attn = None
    for _ in range(T):
        attn = e_step(state, keys, params)
        v = values if values is not None else _rowwise_linear(z, params.w_v)
        state = m_step(attn, v, state.iteration)
    return state, attn


def psa_forward(
    z,
    params: PsaParams,
    K: int,
    T: int,
    rng: np.random.Generator | None = None,
    init: PsaState | None = None,
) -> PsaResult:
    """Full routing pass: random (or given) init, then T EM-style iterations."""
    zv = ad.value_of(z)
    if zv.ndim < 2:
        raise ContractError("z must be (N, d) or (B, N, d)")
    if init is None:
        if rng is None:
            raise ContractError("either rng or init is required")
        init = psa_init(K, zv.shape[-1], rng, batch_shape=zv.shape[:-2])
    state, attn = run_psa(z, params, init, T)
    local = None
    if not isinstance(state.mu, ad.Var):
        local = state.to_mixture() if zv.ndim == 2 else state.to_mixtures()
    return PsaResult(state, attn, local)


def ard_prune(state: PsaState, tau: float) -> SlotSet:
    """Mark slots whose mixing weight exceeds ``tau`` as active."""
    if not 0.0 <= tau < 1.0:
        raise ContractError(f"tau must be in [0, 1), got {tau}")
    s = state.numpy()
    return SlotSet(s.mu.copy(), s.pi > tau)


def sample_slots(state: PsaState, rng: np.random.Generator, mode: str = "mean") -> SlotSet:
    s = state.numpy()
    active = np.ones(s.pi.shape, dtype=bool)
    if mode == "mean":
        return SlotSet(s.mu.copy(), active)
    if mode == "sample":
        return SlotSet(s.mu + np.sqrt(s.var) * rng.standard_normal(s.mu.shape), active)
    raise ContractError(f"unknown slot mode {mode!r}")


def gmm_log_likelihood(z, state: PsaState) -> np.ndarray:
    """Data log-likelihood ``sum_n log sum_k pi_k N(z_n; mu_k, var_k)``."""
    s = state.numpy()
    zv = np.asarray(z, dtype=np.float64)
    log_p = _log_gauss(zv[..., :, None, :], s.mu[..., None, :, :], s.var[..., None, :, :])
    from scipy.special import logsumexp

    return logsumexp(log_p + np.log(s.pi)[..., None, :], axis=-1).sum(axis=-1)
