"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations needed by the network forward pass, the uncertainty
estimators and the training energy are provided. Every op records its inputs
and a vector-Jacobian product on a :class:`Tape`; :func:`reverse_gradient`
walks the tape backwards from one scalar.

Conventions:
  * ``relu`` has derivative 0 at exactly 0.
  * ``safe_sqrt`` returns 0 for arguments below ``TINY_VARIANCE``, has
    derivative 0 there, and clamps the argument at ``SQRT_GRAD_FLOOR`` inside
    the derivative elsewhere.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

TINY_VARIANCE = 1e-300
SQRT_GRAD_FLOOR = 1e-12

Vjp = Callable[[np.ndarray], np.ndarray]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.mul(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __rmatmul__(self, other):
        return self.tape.matmul(other, self)

    def __getitem__(self, key):
        return self.tape.getitem(self, key)


class Tape:
    """Linear record of a computation; nodes are appended in evaluation order."""

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[tuple[int, Vjp], ...]] = []
        self._leaves: list[int] = []

    def __len__(self) -> int:
        return len(self._values)

    # -- recording ---------------------------------------------------------

    def _record(self, value: np.ndarray, parents: Iterable[tuple[Var, Vjp]] = ()) -> Var:
        index = len(self._values)
        self._values.append(value)
        self._parents.append(tuple((p.index, fn) for p, fn in parents))
        return Var(self, index, value)

    def variable(self, value) -> Var:
        """Register an input that gradients are taken with respect to."""
        var = self._record(np.array(value, dtype=np.float64))
        self._leaves.append(var.index)
        return var

    def constant(self, value) -> Var:
        return self._record(np.asarray(value, dtype=np.float64))

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operand belongs to a different tape")
            return x
        return self.constant(x)

    @property
    def leaves(self) -> list[int]:
        return list(self._leaves)

    # -- elementwise arithmetic -------------------------------------------

    def add(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        return self._record(
            a.value + b.value,
            [(a, lambda g, s=a.shape: _unbroadcast(g, s)),
             (b, lambda g, s=b.shape: _unbroadcast(g, s))],
        )

    def sub(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        return self._record(
            a.value - b.value,
            [(a, lambda g, s=a.shape: _unbroadcast(g, s)),
             (b, lambda g, s=b.shape: _unbroadcast(-g, s))],
        )

    def mul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._record(
            av * bv,
            [(a, lambda g: _unbroadcast(g * bv, av.shape)),
             (b, lambda g: _unbroadcast(g * av, bv.shape))],
        )

    def div(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        out = av / bv
        return self._record(
            out,
            [(a, lambda g: _unbroadcast(g / bv, av.shape)),
             (b, lambda g: _unbroadcast(-g * out / bv, bv.shape))],
        )

    def square(self, a: Var) -> Var:
        av = a.value
        return self._record(av * av, [(a, lambda g: 2.0 * g * av)])

    def exp(self, a: Var) -> Var:
        out = np.exp(a.value)
        return self._record(out, [(a, lambda g: g * out)])

    def log(self, a: Var) -> Var:
        av = a.value
        return self._record(np.log(av), [(a, lambda g: g / av)])

    def relu(self, a: Var) -> Var:
        mask = a.value > 0.0
        return self._record(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)])

    def safe_sqrt(self, a: Var) -> Var:
        av = a.value
        live = av >= TINY_VARIANCE
        out = np.sqrt(np.where(live, av, 0.0))
        slope = np.where(live, 0.5 / np.sqrt(np.maximum(av, SQRT_GRAD_FLOOR)), 0.0)
        return self._record(out, [(a, lambda g: g * slope)])

    # -- linear algebra and reductions ------------------------------------

    def matmul(self, a, b) -> Var:
        """``np.matmul`` semantics, including batching over leading axes."""
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")

        def grad_a(g):
            return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

        def grad_b(g):
            return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

        return self._record(av @ bv, [(a, grad_a), (b, grad_b)])

    def sum(self, a: Var, axis=None, keepdims: bool = False) -> Var:
        shape = a.shape
        out = a.value.sum(axis=axis, keepdims=keepdims)

        def grad(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return self._record(np.asarray(out), [(a, grad)])

    def mean(self, a: Var, axis=None, keepdims: bool = False) -> Var:
        count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
        return self.mul(self.sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))

    def logsumexp(self, a: Var, axis: int) -> Var:
        av = a.value
        peak = np.max(av, axis=axis, keepdims=True)
        peak = np.where(np.isfinite(peak), peak, 0.0)
        shifted = np.exp(av - peak)
        total = shifted.sum(axis=axis, keepdims=True)
        out = np.squeeze(np.log(total) + peak, axis=axis)
        weights = shifted / total
        return self._record(out, [(a, lambda g: np.expand_dims(g, axis) * weights)])

    # -- shape manipulation -----------------------------------------------

    def concat(self, parts: Sequence, axis: int = -1) -> Var:
        parts = [self._lift(p) for p in parts]
        values = [p.value for p in parts]
        out = np.concatenate(values, axis=axis)
        bounds = np.cumsum([0] + [v.shape[axis] for v in values])
        parents = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            def grad(g, lo=lo, hi=hi):
                return np.take(g, np.arange(lo, hi), axis=axis)
            parents.append((p, grad))
        return self._record(out, parents)

    def broadcast_to(self, a, shape: tuple[int, ...]) -> Var:
        a = self._lift(a)
        src = a.shape
        return self._record(np.broadcast_to(a.value, shape).copy(),
                            [(a, lambda g: _unbroadcast(g, src))])

    def reshape(self, a: Var, shape: tuple[int, ...]) -> Var:
        src = a.shape
        return self._record(a.value.reshape(shape), [(a, lambda g: g.reshape(src))])

    def swapaxes(self, a: Var, i: int, j: int) -> Var:
        return self._record(np.swapaxes(a.value, i, j), [(a, lambda g: np.swapaxes(g, i, j))])

    def take(self, a: Var, indices, axis: int = 0) -> Var:
        indices = np.asarray(indices)
        src = a.shape

        def grad(g):
            out = np.zeros(src)
            np.add.at(out, (slice(None),) * (axis % len(src)) + (indices,), g)
            return out

        return self._record(np.take(a.value, indices, axis=axis), [(a, grad)])

    def getitem(self, a: Var, key) -> Var:
        src = a.shape

        def grad(g):
            out = np.zeros(src)
            out[key] += g
            return out

        return self._record(np.asarray(a.value[key]), [(a, grad)])


def reverse_gradient(tape: Tape, output: Var, output_index=None, wrt: Sequence[Var] | None = None):
    """Derivatives of one scalar of ``output`` w.r.t. recorded inputs.

    ``output_index`` selects the scalar when ``output`` is an array; asking for
    an array output without an index is an error. Returns a list aligned with
    ``wrt`` (default: every :meth:`Tape.variable` in creation order).
    """
    if output.tape is not tape:
        raise ValueError("output was not recorded on this tape")
    seed = np.zeros(output.shape)
    if output_index is None:
        if output.value.size != 1:
            raise ValueError(f"output has shape {output.shape}; pass output_index to select a scalar")
        seed = np.ones(output.shape)
    else:
        seed[output_index] = 1.0
    return backpropagate(tape, output, seed, wrt)


def backpropagate(tape: Tape, output: Var, cotangent: np.ndarray, wrt: Sequence[Var] | None = None):
    """Vector-Jacobian product of ``output`` with ``cotangent``."""
    targets = [v.index for v in wrt] if wrt is not None else tape.leaves
    adjoints: list[np.ndarray | None] = [None] * (output.index + 1)
    adjoints[output.index] = np.asarray(cotangent, dtype=np.float64)
    lowest = min(targets) if targets else 0
    for node in range(output.index, lowest - 1, -1):
        g = adjoints[node]
        if g is None:
            continue
        for parent, vjp in tape._parents[node]:
            contrib = vjp(g)
            prev = adjoints[parent]
            adjoints[parent] = contrib if prev is None else prev + contrib
    grads = []
    for t in targets:
        g = adjoints[t] if t <= output.index else None
        grads.append(np.zeros(tape._values[t].shape) if g is None else np.asarray(g))
    return grads
