"""Identifiability and binding metrics.

SMCC and R² compare two batches of slot representations up to a slot
permutation and one global affine map. ARI scores a hard clustering against
reference labels. Compositional contrast measures how much each output
coordinate of a decoder mixes information from several slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .errors import ContractError, NumericalError

RIDGE = 1e-8


@dataclass(frozen=True)
class SlotBatch:
    slots: np.ndarray  # (M, K, d)

    def __post_init__(self) -> None:
        s = np.array(self.slots, dtype=np.float64)
        if s.ndim != 3 or 0 in s.shape:
            raise ContractError(f"slot batch must be a non-empty (M, K, d) array, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ContractError("slot batch must be finite")
        s.flags.writeable = False
        object.__setattr__(self, "slots", s)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.slots.shape

    def permuted(self, perm) -> SlotBatch:
        return SlotBatch(self.slots[:, perm, :])


@dataclass(frozen=True)
class Matching:
    permutation: np.ndarray  # row k is matched to column permutation[k]
    cost: float

    def __post_init__(self) -> None:
        p = np.asarray(self.permutation, dtype=np.int64)
        if sorted(p.tolist()) != list(range(len(p))):
            raise ContractError("matching is not a bijection")
        object.__setattr__(self, "permutation", p)


def hungarian(cost) -> Matching:
    """Minimum-cost perfect matching of rows to columns."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ContractError(f"cost must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(c)
    perm = cols[np.argsort(rows)]
    return Matching(perm, float(c[np.arange(len(perm)), perm].sum()))


@dataclass(frozen=True)
class AffineFit:
    A: np.ndarray  # (d_in, d_out); prediction is X @ A + c
    c: np.ndarray
    regularized: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.A + self.c


def affine_fit(X, Y, weights=None) -> AffineFit:
    """Least-squares ``Y ~ X A + c`` (optionally row-weighted).

    A rank-deficient design falls back to a ridge solve and sets
    ``regularized``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ContractError(f"need paired 2D arrays, got {X.shape} and {Y.shape}")
    d = X.shape[1]
    if len(X) <= d:
        raise ContractError(f"need more rows than dimensions, got {len(X)} <= {d}")
    design = np.hstack([X, np.ones((len(X), 1))])
    target = Y
    if weights is not None:
        w = np.sqrt(np.asarray(weights, dtype=np.float64))
        if w.shape != (len(X),) or np.any(~np.isfinite(w)):
            raise ContractError("weights must be a finite vector, one per row")
        design = design * w[:, None]
        target = Y * w[:, None]
    sol, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    regularized = rank < d + 1
    if regularized:
        gram = design.T @ design + RIDGE * np.eye(d + 1)
        sol = np.linalg.solve(gram, design.T @ target)
    return AffineFit(sol[:d], sol[d], regularized)


def _fit_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """cost[k, l] = unexplained variance fraction of a[:, k] from b[:, l] under an affine fit."""
    M, K, d = a.shape
    cost = np.empty((K, K))
    ones = np.ones((M, 1))
    for l in range(K):
        design = np.hstack([b[:, l, :], ones])
        pinv = np.linalg.pinv(design)
        for k in range(K):
            y = a[:, k, :]
            resid = y - design @ (pinv @ y)
            total = ((y - y.mean(0)) ** 2).sum()
            cost[k, l] = (resid**2).sum() / total if total > 0 else 1.0
    return cost


@dataclass
class AlignmentReport:
    smcc: float
    r2: float
    matching: Matching
    fit: AffineFit
    # (slot, coordinate) series with zero variance; their correlation counts as 0
    degenerate: list[tuple[int, int]] = field(default_factory=list)
    corr: np.ndarray | None = None  # (K, d)


def align(a: SlotBatch, b: SlotBatch) -> AlignmentReport:
    """Match b's slots to a's, fit one affine map b -> a, then score.

    The matching cost is affine invariant (see ``_fit_cost``), so any member
    of a's equivalence class is matched back exactly.
    """
    if a.shape != b.shape:
        raise ContractError(f"slot batches differ in shape: {a.shape} vs {b.shape}")
    M, K, d = a.shape
    if M < 2:
        raise ContractError("need at least two datapoints")
    sa, sb = a.slots, b.slots
    matching = hungarian(_fit_cost(sa, sb)) if K > 1 else Matching(np.zeros(1, dtype=np.int64), 0.0)
    sb = sb[:, matching.permutation, :]
    fit = affine_fit(sb.reshape(M * K, d), sa.reshape(M * K, d))
    pred = fit.apply(sb.reshape(M * K, d)).reshape(M, K, d)

    corr = np.zeros((K, d))
    degenerate = []
    for k in range(K):
        for j in range(d):
            x, y = sa[:, k, j] - sa[:, k, j].mean(), pred[:, k, j] - pred[:, k, j].mean()
            denom = math.sqrt(float((x * x).sum()) * float((y * y).sum()))
            if denom <= 1e-300:
                degenerate.append((k, j))
                continue
            corr[k, j] = float((x * y).sum()) / denom

    r2s = []
    for k in range(K):
        total = float(((sa[:, k] - sa[:, k].mean(0)) ** 2).sum())
        resid = float(((sa[:, k] - pred[:, k]) ** 2).sum())
        r2s.append(1.0 - resid / total if total > 0 else 0.0)
    return AlignmentReport(float(np.clip(corr.mean(), -1.0, 1.0)), float(np.mean(r2s)), matching, fit, degenerate, corr)


def smcc(a: SlotBatch, b: SlotBatch) -> float:
    """Slot mean correlation coefficient of b against a."""
    return align(a, b).smcc


def r2(a: SlotBatch, b: SlotBatch) -> float:
    """Slot-averaged coefficient of determination of aligned b against a."""
    return align(a, b).r2


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index via the contingency table."""
    la = np.asarray(labels_a)
    lb = np.asarray(labels_b)
    if la.shape != lb.shape or la.ndim != 1:
        raise ContractError("label vectors must be 1D and of equal length")
    n = len(la)
    if n < 2:
        return 1.0
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def pairs(x):
        x = x.astype(np.float64)
        return float((x * (x - 1) / 2).sum())

    index = pairs(table)
    sum_a = pairs(table.sum(1))
    sum_b = pairs(table.sum(0))
    expected = sum_a * sum_b / (n * (n - 1) / 2)
    top = 0.5 * (sum_a + sum_b)
    if top == expected:
        # both partitions trivial (one cluster or all singletons) and equal
        return 1.0
    return (index - expected) / (top - expected)


# -- compositional contrast ------------------------------------------------------


@dataclass
class ContrastReport:
    value: float
    jacobian: np.ndarray  # (D, K, d)
    retried: bool = False
    on_kink: bool = False  # still on an activation boundary after the retry


def _jacobian_reverse(f: Callable, s: np.ndarray, D: int) -> tuple[np.ndarray, bool]:
    jac = np.zeros((D,) + s.shape)
    kink = False
    for n in range(D):
        tape = ad.Tape()
        sv = tape.var(s)
        out = ad.reshape(f(sv), (-1,))
        if ad.value_of(out).shape != (D,):
            raise ContractError(f"decoder produced {ad.value_of(out).shape[0]} outputs, expected {D}")
        tape.backward(ad.take(out, n))
        kink = kink or tape.kink_hit
        jac[n] = sv.grad
    return jac, kink


def jacobian_fd(f: Callable, s: np.ndarray, D: int, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian (D, K, d)."""
    s = np.asarray(s, dtype=np.float64)
    jac = np.zeros((D,) + s.shape)
    for idx in np.ndindex(s.shape):
        hi, lo = s.copy(), s.copy()
        hi[idx] += step
        lo[idx] -= step
        diff = np.ravel(ad.value_of(f(hi))) - np.ravel(ad.value_of(f(lo)))
        jac[(slice(None),) + idx] = diff / (2 * step)
    return jac


def contrast_from_jacobian(jac: np.ndarray) -> float:
    """``sum_n sum_{k<j} |J_nk| |J_nj|`` with J_nk the (d,) block of output n, slot k."""
    norms = np.sqrt((jac**2).sum(-1))  # (D, K)
    # explicit pairwise products, so disjoint supports give exactly zero
    K = norms.shape[1]
    value = 0.0
    for k in range(K):
        for j in range(k + 1, K):
            value += float((norms[:, k] * norms[:, j]).sum())
    return value


def compositional_contrast(
    f: Callable,
    s,
    D: int,
    method: str = "reverse",
    step: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> ContrastReport:
    """Compositional contrast of decoder ``f`` at slots ``s`` (K, d).

    ``f`` maps a (K, d) array (plain or recorded) to D outputs. The reverse
    mode runs one backward pass per output. If a rectifier is evaluated
    exactly on its breakpoint, ``s`` is nudged by 1e-7 and the Jacobian is
    recomputed once.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ContractError(f"slots must be (K, d), got {s.shape}")
    if D < 1 or D * s.size > 10_000:
        raise ContractError(f"Jacobian with {D * s.size} entries is outside the supported size")
    if method == "fd":
        jac = jacobian_fd(f, s, D, step)
        return ContrastReport(contrast_from_jacobian(jac), jac)
    if method != "reverse":
        raise ContractError(f"unknown Jacobian method {method!r}")
    jac, kink = _jacobian_reverse(f, s, D)
    retried = False
    if kink:
        retried = True
        rng = rng or np.random.default_rng(0)
        jac, kink = _jacobian_reverse(f, s + 1e-7 * rng.choice([-1.0, 1.0], size=s.shape), D)
    if not np.all(np.isfinite(jac)):
        raise NumericalError("non-finite decoder Jacobian")
    return ContrastReport(contrast_from_jacobian(jac), jac, retried, kink)
