"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` records every operation applied to tensors attached to it.
Tensors without a graph are constants.  A fresh graph is built for every
minibatch; :func:`backward` walks the tape once in reverse.

    >>> g = Graph()
    >>> x = g.variable(np.array(3.0))
    >>> grads = backward(g, x * x)
    >>> float(grads[x.node])
    6.0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from . import _kernels

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "Tensor",
    "Graph",
    "backward",
    "forward_op",
    "init_params",
]


class AutodiffError(ValueError):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible operand shapes {desc}")


class DomainError(AutodiffError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class Tensor:
    """A float64 array, optionally attached to a graph node."""

    __slots__ = ("value", "graph", "node")
    __array_priority__ = 100

    def __init__(self, value, graph: Graph | None = None, node: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f", node={self.node}" if self.graph is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)


@dataclass(frozen=True)
class Record:
    kind: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Ordered tape of recorded operations.

    Node ids index ``shapes``; every record's inputs were created before its
    output, so reversing ``records`` is a valid topological order.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.shapes: list[tuple[int, ...]] = []
        self.leaves: list[int] = []
        self._params: dict[int, Tensor] = {}

    def __len__(self):
        return len(self.shapes)

    def _new_node(self, value: np.ndarray) -> Tensor:
        self.shapes.append(value.shape)
        return Tensor(value, self, len(self.shapes) - 1)

    def variable(self, value) -> Tensor:
        """Register a leaf whose gradient is wanted."""
        t = self._new_node(np.asarray(value, dtype=np.float64))
        self.leaves.append(t.node)
        return t

    def param(self, array: np.ndarray) -> Tensor:
        """Leaf for a parameter buffer, shared if registered twice."""
        key = id(array)
        t = self._params.get(key)
        if t is None or t.value is not array:
            t = self._new_node(array)
            self.leaves.append(t.node)
            self._params[key] = t
        return t

    def record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
        out = self._new_node(value)
        ids = tuple(t.node if t.graph is self else -1 for t in inputs)
        self.records.append(Record(kind, ids, out.node, vjp))
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _graph_of(*ts: Tensor) -> Graph | None:
    graph = None
    for t in ts:
        if t.graph is not None:
            if graph is not None and t.graph is not graph:
                raise AutodiffError("operands belong to different graphs")
            graph = t.graph
    return graph


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    graph = _graph_of(*inputs)
    if graph is None:
        return Tensor(value)
    return graph.record(kind, inputs, value, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ------------------------------------------------------------------ binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.value + b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.value - b.value, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    va, vb = a.value, b.value
    return _emit(
        "mul",
        (a, b),
        va * vb,
        lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    va, vb = a.value, b.value
    return _emit("matmul", (a, b), va @ vb, lambda g: (g @ vb.T, va.T @ g))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _emit("scale", (a,), a.value * s, lambda g: (g * s,))


# ------------------------------------------------------------------ reductions


def _expand_back(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(
        "sum",
        (a,),
        np.sum(a.value, axis=axis, keepdims=keepdims),
        lambda g: (np.array(_expand_back(g, shape, axis, keepdims)),),
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[ax] for ax in np.atleast_1d(axis)]))
    if count == 0:
        raise ShapeError("mean", shape)
    return _emit(
        "mean",
        (a,),
        np.mean(a.value, axis=axis, keepdims=keepdims),
        lambda g: (np.array(_expand_back(g, shape, axis, keepdims)) / count,),
    )


# ------------------------------------------------------------------ unary ops


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    if not np.all(np.isfinite(y)):
        raise DomainError("exp", "overflow; argument exceeds ~709")
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    v = a.value
    if np.any(~(v > 0.0)) or not np.all(np.isfinite(v)):
        raise DomainError("log", "argument must lie in (0, inf)")
    return _emit("log", (a,), np.log(v), lambda g: (g / v,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = special.expit(a.value)
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def logit(a) -> Tensor:
    a = _as_tensor(a)
    v = a.value
    if np.any(~((v > 0.0) & (v < 1.0))):
        raise DomainError("logit", "argument must lie in (0, 1)")
    return _emit("logit", (a,), special.logit(v), lambda g: (g / (v * (1.0 - v)),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.value)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    v = a.value
    return _emit(
        "leaky_relu",
        (a,),
        _kernels.leaky_relu(v, slope),
        lambda g: (_kernels.leaky_relu_grad(v, g, slope),),
    )


def clamp(a, lo: float, hi: float) -> Tensor:
    """Elementwise clip; gradient passes only where the input was inside."""
    a = _as_tensor(a)
    v = a.value
    inside = (v >= lo) & (v <= hi)
    return _emit("clamp", (a,), np.clip(v, lo, hi), lambda g: (g * inside,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    y = special.softmax(a.value, axis=axis)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), y, vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    y = special.log_softmax(a.value, axis=axis)
    p = np.exp(y)
    return _emit("log_softmax", (a,), y, lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


# ------------------------------------------------------------------ structure


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat")
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", ts, value, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(a, key) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    try:
        value = a.value[key]
    except IndexError:
        raise ShapeError("slice", shape) from None

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _emit("slice", (a,), np.array(value), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _emit("reshape", (a,), value, lambda g: (g.reshape(old),))


_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "scale": scale,
    "sum": sum_,
    "mean": mean,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "logit": logit,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "clamp": clamp,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
}

OP_KINDS = tuple(_OPS)


def forward_op(kind: str, *operands, **kwargs) -> Tensor:
    """Apply the op named ``kind``; a lookup-table front end to the functions above."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise AutodiffError(f"unknown op kind {kind!r}") from None
    return fn(*operands, **kwargs)


# ------------------------------------------------------------------ backward


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every node of ``graph``.

    Nodes with no path to the loss receive zeros.
    """
    if len(graph) == 0:
        raise AutodiffError("backward on an empty graph")
    if loss.graph is not graph:
        raise AutodiffError("loss is not a node of this graph")
    if loss.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")

    grads: list[np.ndarray | None] = [None] * len(graph)
    grads[loss.node] = np.ones(loss.shape)
    for rec in reversed(graph.records):
        g = grads[rec.output]
        if g is None:
            continue
        for node, gi in zip(rec.inputs, rec.vjp(g)):
            if node < 0 or gi is None:
                continue
            if grads[node] is None:
                grads[node] = np.array(gi, dtype=np.float64)
            else:
                grads[node] = grads[node] + gi
    return {i: (np.zeros(graph.shapes[i]) if g is None else g) for i, g in enumerate(grads)}


# ------------------------------------------------------------------ init


def init_params(shape, scheme: str = "scaled-normal", seed=None, *, a=-0.05, b=0.05, fan_in=None):
    """Deterministic parameter initialiser.

    ``uniform`` draws from [a, b) (a == b gives a constant tensor);
    ``scaled-normal`` draws N(0, 1/fan_in), fan_in defaulting to ``shape[-1]``.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError("init_params", shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if scheme == "uniform":
        if b < a:
            raise ValueError(f"uniform bounds reversed: a={a}, b={b}")
        if a == b:
            return np.full(shape, float(a))
        return rng.uniform(a, b, size=shape)
    if scheme == "scaled-normal":
        fan = shape[-1] if fan_in is None else int(fan_in)
        if fan <= 0:
            raise ValueError("fan_in must be positive")
        return rng.standard_normal(shape) / np.sqrt(fan)
    raise ValueError(f"unknown init scheme {scheme!r}")
