"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Graph` is a dynamic tape: every operation appends one node, so the
creation order is already a topological order and the backward pass is a
single reverse sweep. Any node, leaf or intermediate, can be read after
``backward``; attention matrices rely on this.

Graphs share no state with each other. Use one graph per thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that cannot handle them."""


class GraphError(RuntimeError):
    """Contract violation in graph usage (mixed graphs, non-scalar loss...)."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    backward: BackwardFn | None
    requires_grad: bool


class Tensor:
    """A value on a :class:`Graph`. Create through ``Graph.tensor`` or ops."""

    __array_priority__ = 1000  # make ndarray OP Tensor defer to Tensor

    def __init__(self, graph: "Graph", node_id: int, values: np.ndarray, requires_grad: bool, name: str | None = None):
        self.graph = graph
        self.node_id = node_id
        self.values = values
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor(id={self.node_id}{label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_lift(self.graph, other), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class Graph:
    """Ordered tape of operation records."""

    nodes: list[Node] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list)

    def tensor(self, values, requires_grad: bool = False, name: str | None = None) -> Tensor:
        """Register a leaf. Values are copied into a fresh float64 array."""
        arr = np.array(values, dtype=np.float64)
        return self._record("leaf", arr, (), None, requires_grad, name=name)

    def constant(self, values, name: str | None = None) -> Tensor:
        return self.tensor(values, requires_grad=False, name=name)

    def detach(self, t: Tensor) -> Tensor:
        """A new leaf holding ``t``'s values with no path back to ``t``."""
        self._check_owner(t)
        return self._record("detach", t.values.copy(), (), None, False)

    def _record(self, op, values, parents, backward, requires_grad, name=None) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(p.node_id for p in parents), backward, requires_grad))
        t = Tensor(self, node_id, values, requires_grad, name)
        self.tensors.append(t)
        return t

    def _check_owner(self, *ts: Tensor) -> None:
        for t in ts:
            if t.graph is not self:
                raise GraphError(f"tensor {t!r} belongs to a different graph")

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) to every node.

        Returns a map node_id -> gradient for all nodes; nodes with no path
        to ``loss`` (or that do not require grad) map to zeros. ``.grad`` is
        set on every requires_grad tensor.
        """
        self._check_owner(loss)
        if loss.values.size != 1:
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.values)
        for node_id in range(loss.node_id, -1, -1):
            g = grads[node_id]
            node = self.nodes[node_id]
            if g is None or node.backward is None or not node.requires_grad:
                continue
            for parent_id, pg in zip(node.parents, node.backward(g)):
                if pg is None or not self.nodes[parent_id].requires_grad:
                    continue
                if grads[parent_id] is None:
                    grads[parent_id] = pg
                else:
                    grads[parent_id] = grads[parent_id] + pg
        out: dict[int, np.ndarray] = {}
        for t in self.tensors:
            g = grads[t.node_id]
            if g is None:
                g = np.zeros_like(t.values)
            out[t.node_id] = g
            if t.requires_grad:
                t.grad = g
        return out


def _lift(graph: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return graph.constant(x)


def _graph_of(*xs) -> Graph:
    graphs = {id(x.graph): x.graph for x in xs if isinstance(x, Tensor)}
    if not graphs:
        raise GraphError("at least one operand must be a Tensor")
    if len(graphs) > 1:
        raise GraphError("operands belong to different graphs")
    return next(iter(graphs.values()))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _rg(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


# --------------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    g._check_owner(a, b)
    try:
        out = a.values + b.values
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return g._record("add", out, (a, b), lambda d: (_unbroadcast(d, sa), _unbroadcast(d, sb)), _rg(a, b))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    g._check_owner(a, b)
    try:
        out = a.values * b.values
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    av, bv = a.values, b.values

    def backward(d):
        return _unbroadcast(d * bv, av.shape), _unbroadcast(d * av, bv.shape)

    return g._record("mul", out, (a, b), backward, _rg(a, b))


elementwise_mul = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.graph._record("scale", a.values * c, (a,), lambda d: (d * c,), a.requires_grad)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    g._check_owner(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.values, b.values
    try:
        out = av @ bv
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from exc

    def backward(d):
        da = d @ np.swapaxes(bv, -1, -2)
        db = np.swapaxes(av, -1, -2) @ d
        return _unbroadcast(da, av.shape), _unbroadcast(db, bv.shape)

    return g._record("matmul", out, (a, b), backward, _rg(a, b))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got {a.shape}")
    return a.graph._record(
        "transpose", np.swapaxes(a.values, -1, -2), (a,), lambda d: (np.swapaxes(d, -1, -2),), a.requires_grad
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from exc
    return a.graph._record("reshape", out, (a,), lambda d: (d.reshape(src),), a.requires_grad)


def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax of ``scale * x`` along the last axis, row-max stabilized."""
    if x.ndim < 1 or x.values.size == 0:
        raise ShapeError(f"softmax_rows needs at least one row, got {x.shape}")
    if not np.all(np.isfinite(x.values)):
        raise NumericError("softmax_rows received non-finite input")
    z = x.values * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(d):
        return ((d - (d * y).sum(axis=-1, keepdims=True)) * y * scale,)

    return x.graph._record("softmax_rows", y, (x,), backward, x.requires_grad)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not ts:
        raise ShapeError("concat of an empty sequence")
    g = _graph_of(*ts)
    g._check_owner(*ts)
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(d):
        return tuple(np.split(d, bounds, axis=axis))

    return g._record("concat", out, tuple(ts), backward, _rg(*ts))


def concat_rows(ts: Sequence[Tensor]) -> Tensor:
    """Stack along the row (second-to-last) axis."""
    return concat(ts, axis=-2)


def slice_(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back."""
    out = np.array(a.values[index], dtype=np.float64)
    src = a.shape

    def backward(d):
        full = np.zeros(src)
        np.add.at(full, index, d)
        return (full,)

    return a.graph._record("slice", out, (a,), backward, a.requires_grad)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.asarray(a.values.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def backward(d):
        if axis is not None and not keepdims:
            d = np.expand_dims(d, axis)
        return (np.broadcast_to(d, src).copy(),)

    return a.graph._record("reduce_sum", out, (a,), backward, a.requires_grad)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return a.graph._record("relu", a.values * mask, (a,), lambda d: (d * mask,), a.requires_grad)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.values
    c = math.sqrt(2.0 / math.pi)
    u = c * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(d):
        du = c * (1.0 + 3 * 0.044715 * x * x)
        return (d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return a.graph._record("gelu", out, (a,), backward, a.requires_grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine."""
    g = _graph_of(x, gamma, beta)
    g._check_owner(x, gamma, beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} do not match width {x.shape[-1]}")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.values
    out = xhat * gv + beta.values

    def backward(d):
        dxhat = d * gv
        n = xv.shape[-1]
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        dgamma = (d * xhat).reshape(-1, n).sum(axis=0)
        dbeta = d.reshape(-1, n).sum(axis=0)
        return dx, dgamma, dbeta

    return g._record("layer_norm", out, (x, gamma, beta), backward, _rg(x, gamma, beta))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range for table with {table.shape[0]} rows")
    src = table.shape

    def backward(d):
        full = np.zeros(src)
        np.add.at(full, ids, d)
        return (full,)

    return table.graph._record("embedding", table.values[ids], (table,), backward, table.requires_grad)


def cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` is (N, C), ``targets`` int (N,)."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits.values
    if not np.all(np.isfinite(z)):
        raise NumericError("cross_entropy received non-finite logits")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    n = z.shape[0]
    rows = np.arange(n)
    loss = np.array(np.mean(lse - z[rows, targets]))

    def backward(d):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (float(d) / n),)

    return logits.graph._record("cross_entropy", loss, (logits,), backward, logits.requires_grad)
