"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every derivative rule is written with :class:`Tensor` operations, so a
backward pass run with ``create_graph=True`` records a graph of its own and
the returned gradients can be differentiated again (double backprop).
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_node_ids = itertools.count()

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class AutodiffError(Exception):
    """Raised for misuse of the differentiation API."""


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


@contextlib.contextmanager
def grad_mode(enabled: bool):
    token = _grad_enabled.set(enabled)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def no_grad():
    """Context manager that stops graph recording."""
    return grad_mode(False)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Node:
    """One recorded operation: tag, inputs and the local derivative rule."""

    __slots__ = ("id", "op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.id}, {self.op})"


class Tensor:
    """A float64 array that can take part in a computation graph."""

    __slots__ = ("data", "requires_grad", "node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False, node: Node | None = None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.node = node
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        if not math.isfinite(x):
            raise NonFiniteError(f"non-finite constant {x}")
        return Tensor._wrap(np.asarray(float(x)))
    return Tensor(x)


def _record(out: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return Tensor._wrap(out, True, Node(op, parents, backward_fn))
    return Tensor._wrap(out)


# ---------------------------------------------------------------------------
# broadcasting helpers

def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape``, undoing numpy broadcasting."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    out = x.data.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    return _record(out, "sum_to", (x,), lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    out = np.broadcast_to(x.data, shape).copy()
    return _record(out, "broadcast_to", (x,), lambda g: (sum_to(g, x.shape),))


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data + b.data, "add", (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(neg(g), b.shape) if b.requires_grad else None,
        )

    return _record(a.data - b.data, "sub", (a, b), rule)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, "mul", (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data / b.data, "div", (a, b), rule)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    if exponent == 1.0:
        return a
    return _record(
        a.data**exponent,
        "pow",
        (a,),
        lambda g: (mul(g, mul(exponent, power(a, exponent - 1.0))),),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    result = _record(out, "exp", (a,), lambda g: (mul(g, result),))
    return result


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    result = _record(out, "sqrt", (a,), lambda g: (div(g, mul(2.0, result)),))
    return result


def tabs(a) -> Tensor:
    a = as_tensor(a)
    # sign is piecewise constant, so the rule has no second-order term
    sign = Tensor._wrap(np.sign(a.data))
    return _record(np.abs(a.data), "abs", (a,), lambda g: (mul(g, sign),))


def erf(a) -> Tensor:
    a = as_tensor(a)
    c = 2.0 / math.sqrt(math.pi)
    return _record(_erf(a.data), "erf", (a,), lambda g: (mul(g, mul(c, exp(neg(mul(a, a))))),))


# ---------------------------------------------------------------------------
# shape and indexing

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record(a.data.reshape(shape), "reshape", (a,), lambda g: (reshape(g, a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), "transpose", (a,), lambda g: (transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def _has_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, list):
        index = np.asarray(index, dtype=np.intp)
    out = np.array(a.data[index])
    return _record(out, "getitem", (a,), lambda g: (scatter_add(g, index, a.shape),))


def scatter_add(src: Tensor, index, shape: tuple) -> Tensor:
    """Zeros of ``shape`` with ``src`` added at ``index`` (adjoint of getitem)."""
    out = np.zeros(shape)
    if _has_fancy(index):
        np.add.at(out, index, src.data)
    else:
        out[index] += src.data
    return _record(out, "scatter_add", (src,), lambda g: (getitem(g, index),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def rule(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _record(out, "concat", tuple(tensors), rule)


# ---------------------------------------------------------------------------
# reductions and linear algebra

def _expand_reduced(g: Tensor, shape: tuple, axis, keepdims: bool) -> Tensor:
    if not keepdims and axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        kept = list(shape)
        for ax in axes:
            kept[ax % len(shape)] = 1
        g = reshape(g, tuple(kept))
    elif axis is None and not keepdims:
        g = reshape(g, (1,) * len(shape))
    return broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _record(out, "sum", (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def rule(g):
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(np.matmul(a.data, b.data), "matmul", (a, b), rule)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries; the subgradient at zero is taken as zero."""
    a = as_tensor(a)
    norm = float(np.sqrt(np.sum(a.data * a.data)))
    out = np.asarray(norm)

    def rule(g):
        if norm == 0.0:
            return (Tensor._wrap(np.zeros(a.shape)),)
        return (mul(a, div(g, result)),)

    result = _record(out, "l2_norm", (a,), rule)
    return result


def l1_norm(a: Tensor) -> Tensor:
    return tsum(tabs(a))


# ---------------------------------------------------------------------------
# neural-network primitives

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (mul(result, sub(g, tsum(mul(g, result), axis, keepdims=True))),)

    result = _record(out, "softmax", (x,), rule)
    return result


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g):
        return (sub(g, mul(exp(result), tsum(g, axis, keepdims=True))),)

    result = _record(out, "log_softmax", (x,), rule)
    return result


def normal_cdf(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + _erf(x.data * _SQRT_HALF))
    return _record(out, "normal_cdf", (x,), lambda g: (mul(g, normal_pdf(x)),))


def normal_pdf(x: Tensor) -> Tensor:
    return mul(_INV_SQRT_2PI, exp(mul(-0.5, mul(x, x))))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF computed via erf."""
    x = as_tensor(x)
    out = x.data * 0.5 * (1.0 + _erf(x.data * _SQRT_HALF))

    def rule(g):
        return (mul(g, add(normal_cdf(x), mul(x, normal_pdf(x)))),)

    return _record(out, "gelu", (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"gain/bias must have shape ({x.shape[-1]},), got {gain.shape} and {bias.shape}")
    centered = sub(x, mean(x, axis=-1, keepdims=True))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = mul(centered, power(add(var, epsilon), -0.5))
    return add(mul(normed, gain), bias)


def cross_entropy(logits: Tensor, target_scores) -> Tensor:
    """Soft-label cross entropy ``-sum(softmax(target) * log_softmax(logits))``.

    An integer target is a hard label: ``-log_softmax(logits)[target]``.
    """
    logits = as_tensor(logits)
    if isinstance(target_scores, (int, np.integer)):
        if not 0 <= target_scores < logits.shape[-1]:
            raise ShapeError(f"class {target_scores} out of range for {logits.shape[-1]} logits")
        return neg(getitem(log_softmax(logits, -1), int(target_scores)))
    target_scores = as_tensor(target_scores)
    if logits.shape != target_scores.shape:
        raise ShapeError(f"logits {logits.shape} and targets {target_scores.shape} differ in shape")
    return neg(tsum(mul(softmax(target_scores, -1), log_softmax(logits, -1))))


# ---------------------------------------------------------------------------
# reverse pass

def _topological(output: Tensor) -> tuple[list[Tensor], set[int]]:
    """Graph tensors reachable from ``output`` (latest node first) and ids of all reached tensors."""
    reached = {id(output)}
    interior = []
    stack = [output]
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        interior.append(t)
        for p in t.node.parents:
            if p.requires_grad and id(p) not in reached:
                reached.add(id(p))
                stack.append(p)
    interior.sort(key=lambda t: t.node.id, reverse=True)
    return interior, reached


def backward(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
    retain_graph: bool | None = None,
) -> list[Tensor]:
    """Gradients of the scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned gradients are themselves graph-connected,
    so a later ``backward`` through them yields second derivatives.  Unless the
    graph is created or retained it is released afterwards.  Tensors in ``wrt``
    that ``output`` does not depend on raise :class:`AutodiffError`, or get zero
    gradients when ``allow_unused`` is set.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.is_finite():
        raise NonFiniteError("cannot differentiate a non-finite output")
    if retain_graph is None:
        retain_graph = create_graph

    interior, reached = _topological(output)
    grads: dict[int, Tensor] = {id(output): Tensor._wrap(np.ones(output.shape))}
    with grad_mode(create_graph):
        for t in interior:
            g = grads.get(id(t))
            if g is None:
                continue
            node = t.node
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else add(prev, pg)

    results = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            if id(w) not in reached and not allow_unused:
                raise AutodiffError(f"tensor of shape {w.shape} is not part of the graph of the output")
            g = Tensor._wrap(np.zeros(w.shape))
        elif g.shape != w.shape:
            g = reshape(g, w.shape)
        results.append(g)

    if not retain_graph:
        for t in interior:
            t.node = None
    return results
