"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output remembers the op that produced it, so calling :func:`backward` on a
scalar walks the recorded graph in reverse topological order.

Arithmetic is float32 unless :func:`precision` switches the default to float64,
which exists only so finite-difference oracles can be trusted.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not conform to an op."""


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ContractError(RuntimeError):
    """Raised when an API precondition is violated."""


_DTYPE = np.float32
_CHECK_FINITE = True
_RECORD = True


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording a graph."""
    global _RECORD
    previous = _RECORD
    _RECORD = False
    try:
        yield
    finally:
        _RECORD = previous


@dataclass(eq=False)
class Node:
    """One recorded op: its kind, parent tensors, and local backward rule."""

    kind: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_reduce(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(inputs) -> bool:
    return any(t.requires_grad for t in inputs)


def _make(kind: str, out: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    # a finite sum implies finite entries (overflowing sums count as blow-up too)
    if _CHECK_FINITE and not np.isfinite(np.add.reduce(out, axis=None)):
        raise NumericError(f"{kind} produced a non-finite value")
    result = Tensor(out)
    if _RECORD and _needs_grad(inputs):
        result.requires_grad = True
        result.node = Node(kind, inputs, backward_fn)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "subtract")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("subtract", a.data - b.data, (a, b), bw)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "multiply")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("multiply", a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), bw)


# elementwise unary ops

def negate(a) -> Tensor:
    a = as_tensor(a)
    return _make("negate", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make("relu", out, (a,), lambda g: (np.where(out > 0, g, 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    """Logistic function S(x) = 1 / (1 + exp(-x))."""
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make("softplus", out.astype(x.dtype), (a,), lambda g: (g * _sigmoid(x),))


# reductions and shape ops

def sum_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _make("sum", out, (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return multiply(sum_reduce(a, axis=axis), 1.0 / count)


def cumsum(a, axis: int = -1) -> Tensor:
    """Inclusive cumulative sum along ``axis``."""
    a = as_tensor(a)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make("cumsum", np.cumsum(a.data, axis=axis), (a,), bw)


def concatenate(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concatenate: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concatenate", out, tensors, bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def index_select(a, index) -> Tensor:
    """Basic numpy indexing (slices, integers); gradient scatters back."""
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("index", np.array(out), (a,), bw)


def gather(table, rows) -> Tensor:
    """Row lookup ``table[rows]``; repeated rows accumulate their gradients."""
    table = as_tensor(table)
    rows = np.asarray(rows)
    if not np.issubdtype(rows.dtype, np.integer):
        raise DimensionError("gather: row indices must be integers")
    if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
        raise DimensionError("gather: row index out of range")

    def bw(g):
        flat_rows = rows.reshape(-1)
        g2 = g.reshape(flat_rows.size, -1)
        full = np.zeros((table.shape[0], g2.shape[1]), dtype=table.data.dtype)
        for col in range(g2.shape[1]):
            full[:, col] = np.bincount(flat_rows, weights=g2[:, col], minlength=table.shape[0])
        return (full.reshape(table.shape),)

    return _make("gather", table.data[rows], (table,), bw)


OP_KINDS = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "negate": negate,
    "sum": sum_reduce,
    "concatenate": concatenate,
    "gather": gather,
    "subtract": subtract,
    "square": square,
    "cumsum": cumsum,
}


def op_forward(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


@dataclass
class Graph:
    """Nodes reachable from a root, parents before consumers."""

    order: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)


def backward(root: Tensor) -> Graph:
    """Populate ``.grad`` on every grad-requiring tensor that feeds ``root``.

    Gradients accumulate into existing ``.grad`` buffers, so callers zero them
    at the start of each step.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    graph = Graph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(graph.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return graph


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-3,
               coords: np.ndarray | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps ``point`` to a scalar tensor. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. ``coords`` restricts the
    check to a subset of flat indices, for large parameter tensors.
    """
    point.grad = None
    was = point.requires_grad
    point.requires_grad = True
    backward(fn(point))
    analytic = np.zeros(point.size) if point.grad is None else point.grad.reshape(-1).astype(np.float64)
    point.requires_grad = was
    point.grad = None

    flat = point.data.reshape(-1)
    idx = np.arange(point.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(point).data.item()
        flat[i] = orig - step
        lo = fn(point).data.item()
        flat[i] = orig
        numeric = (hi - lo) / (2 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
