"""Array-level reverse-mode differentiation.

Every op accepts plain numpy arrays or :class:`Var` nodes. When none of the
arguments is a ``Var`` the op evaluates eagerly and returns an ndarray, so the
same model code serves inference (no tape) and training (tape attached).

Typical use::

    tape = Tape()
    w = tape.var(w0, name="w")
    loss = ad.sum(ad.square(x @ w.T - y))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "Tape",
    "Var",
    "OpCounter",
    "count_ops",
    "value_of",
    "primitive",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "exp",
    "log",
    "matmul",
    "sum",
    "mean",
    "logsumexp",
    "leaky_relu",
    "maximum",
    "reshape",
    "swapaxes",
    "expand_dims",
    "take",
    "concatenate",
]


class OpCounter:
    """Counts scalar multiply/add work done by ops while active."""

    def __init__(self) -> None:
        self.count = 0


_active_counter: OpCounter | None = None


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    global _active_counter
    prev = _active_counter
    counter = OpCounter()
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = prev


def _tally(n: int) -> None:
    if _active_counter is not None:
        _active_counter.count += int(n)


class Tape:
    """Records the op graph of one forward pass.

    Nodes are appended in creation order, which is a valid topological order,
    so the backward sweep is a single reverse pass over the list.
    """

    def __init__(self) -> None:
        self._nodes: list[Var] = []
        self.leaves: list[Var] = []
        self.consumed = False
        # set when a piecewise op was evaluated exactly on a breakpoint
        self.kink_hit = False

    def var(self, value, name: str | None = None) -> Var:
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        leaf = Var(np.asarray(value, dtype=np.float64), self, name=name)
        self.leaves.append(leaf)
        return leaf

    def backward(self, loss: Var) -> list[np.ndarray]:
        """Populate ``.grad`` on every leaf; returns grads in leaf order."""
        if self.consumed:
            raise ContractError("backward called twice on the same tape")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is None or node.vjp is None:
                continue
            parent_grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not isinstance(parent, Var):
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)
            else:
                leaf.grad = np.array(leaf.grad, dtype=np.float64).reshape(leaf.value.shape)
        # free the graph; leaves keep value and grad
        for node in self._nodes:
            node.vjp = None
            node.parents = ()
        self._nodes = []
        self.consumed = True
        return [leaf.grad for leaf in self.leaves]


class Var:
    """A recorded array value. Supports the usual arithmetic operators."""

    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var's reflected op

    def __init__(
        self,
        value: np.ndarray,
        tape: Tape,
        parents: Sequence = (),
        vjp: Callable | None = None,
        name: str | None = None,
    ) -> None:
        self.value = value
        self.tape = tape
        self.parents = tuple(parents)
        self.vjp = vjp
        self.grad: np.ndarray | None = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> Var:
        return swapaxes(self, -1, -2)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        if exponent != 2:
            raise ContractError("only squaring is supported")
        return square(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands recorded on different tapes")
    if tape is not None and tape.consumed:
        raise ContractError("tape already consumed by a backward pass")
    return tape


def _record(value: np.ndarray, parents: tuple, vjp: Callable):
    tape = _tape_of(parents)
    if tape is None:
        return value
    node = Var(value, tape, parents, vjp)
    tape._nodes.append(node)
    return node


def primitive(value: np.ndarray, parents: tuple, vjp: Callable):
    """Record a custom op. ``vjp(g)`` returns one gradient (or None) per parent.

    Returns ``value`` unchanged when no parent is a :class:`Var`.
    """
    return _record(value, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _needs(x) -> bool:
    return isinstance(x, Var)


# -- elementwise -------------------------------------------------------------


def add(a, b):
    va, vb = value_of(a), value_of(b)
    out = va + vb
    _tally(out.size)

    def vjp(g):
        return (
            _unbroadcast(g, va.shape) if _needs(a) else None,
            _unbroadcast(g, vb.shape) if _needs(b) else None,
        )

    return _record(out, (a, b), vjp)


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    out = va - vb
    _tally(out.size)

    def vjp(g):
        return (
            _unbroadcast(g, va.shape) if _needs(a) else None,
            _unbroadcast(-g, vb.shape) if _needs(b) else None,
        )

    return _record(out, (a, b), vjp)


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va * vb
    _tally(out.size)

    def vjp(g):
        return (
            _unbroadcast(g * vb, va.shape) if _needs(a) else None,
            _unbroadcast(g * va, vb.shape) if _needs(b) else None,
        )

    return _record(out, (a, b), vjp)


def div(a, b):
    va, vb = value_of(a), value_of(b)
    out = va / vb
    _tally(out.size)

    def vjp(g):
        return (
            _unbroadcast(g / vb, va.shape) if _needs(a) else None,
            _unbroadcast(-g * out / vb, vb.shape) if _needs(b) else None,
        )

    return _record(out, (a, b), vjp)


def neg(a):
    va = value_of(a)
    out = -va
    return _record(out, (a,), lambda g: (-g,))


def square(a):
    va = value_of(a)
    out = va * va
    _tally(out.size)
    return _record(out, (a,), lambda g: (2.0 * va * g,))


def exp(a):
    va = value_of(a)
    out = np.exp(va)
    _tally(out.size)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    va = value_of(a)
    out = np.log(va)
    _tally(out.size)
    return _record(out, (a,), lambda g: (g / va,))


def leaky_relu(a, slope: float):
    va = value_of(a)
    positive = va > 0
    out = np.where(positive, va, slope * va)
    _tally(out.size)
    if isinstance(a, Var) and np.any(va == 0):
        a.tape.kink_hit = True
    return _record(out, (a,), lambda g: (np.where(positive, g, slope * g),))


def maximum(a, floor: float):
    """Elementwise ``max(a, floor)`` with a constant floor."""
    va = value_of(a)
    keep = va > floor
    out = np.where(keep, va, floor)
    _tally(out.size)
    return _record(out, (a,), lambda g: (np.where(keep, g, 0.0),))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    if va.ndim < 2 or vb.ndim < 2:
        # promote vectors so the vjp below only deals with the matrix case
        a2 = reshape(a, (1, va.shape[0])) if va.ndim == 1 else a
        b2 = reshape(b, (vb.shape[0], 1)) if vb.ndim == 1 else b
        res = matmul(a2, b2)
        shape = np.matmul(va, vb).shape
        return reshape(res, shape)
    out = np.matmul(va, vb)
    _tally(out.size * va.shape[-1])

    def vjp(g):
        ga = gb = None
        if _needs(a):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(vb, -1, -2)), va.shape)
        if _needs(b):
            gb = _unbroadcast(np.matmul(np.swapaxes(va, -1, -2), g), vb.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


# -- reductions --------------------------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_to(g, axes, keepdims, shape):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    va = value_of(a)
    axes = _normalize_axes(axis, va.ndim)
    out = np.sum(va, axis=axes, keepdims=keepdims)
    _tally(va.size)
    return _record(
        np.asarray(out), (a,), lambda g: (_expand_to(g, axes, keepdims, va.shape),)
    )


def mean(a, axis=None, keepdims=False):
    va = value_of(a)
    axes = _normalize_axes(axis, va.ndim)
    count = int(np.prod([va.shape[ax] for ax in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def logsumexp(a, axis: int = -1, keepdims: bool = False, sorted_sum: bool = False):
    """Stabilized ``log(sum(exp(a)))`` along one axis.

    ``sorted_sum`` adds the exponentials in ascending order, which makes the
    result bitwise invariant to permutations along ``axis``.
    """
    va = value_of(a)
    ax = axis % va.ndim
    m = np.max(va, axis=ax, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(va - m)
    if sorted_sum:
        e = np.sort(e, axis=ax)
    s = np.sum(e, axis=ax, keepdims=True)
    out_keep = m + np.log(s)
    _tally(3 * va.size)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=ax)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (gk * np.exp(va - out_keep),)

    return _record(out, (a,), vjp)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape):
    va = value_of(a)
    out = va.reshape(shape)
    return _record(out, (a,), lambda g: (g.reshape(va.shape),))


def swapaxes(a, i: int, j: int):
    va = value_of(a)
    out = np.swapaxes(va, i, j)
    return _record(out, (a,), lambda g: (np.swapaxes(g, i, j),))


def expand_dims(a, axis: int):
    va = value_of(a)
    out = np.expand_dims(va, axis)
    return _record(out, (a,), lambda g: (g.reshape(va.shape),))


def take(a, index):
    va = value_of(a)
    out = va[index]

    def vjp(g):
        full = np.zeros_like(va)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.asarray(out), (a,), vjp)


def concatenate(parts: Sequence, axis: int = 0):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(pc if _needs(p) else None for p, pc in zip(parts, pieces))

    return _record(out, tuple(parts), vjp)
