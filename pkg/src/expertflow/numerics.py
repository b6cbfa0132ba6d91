"""Dense float64 matrices with define-by-run reverse-mode autodiff.

Every value is a 2-D ``numpy.ndarray`` of dtype float64. Operations record a
:class:`Node` on the :class:`Graph` of their first operand; :func:`backward`
walks the graph in reverse creation order, which is a valid reverse
topological order because inputs always exist before their consumers.

A graph built with ``requires_grad=False`` keeps no nodes, which is what the
inference paths use.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError

__all__ = [
    "Graph",
    "Node",
    "as_matrix",
    "backward",
    "finite_diff",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "transpose",
    "total",
    "mean_all",
    "row_sum",
    "col_sum",
    "exp",
    "log",
    "square",
    "sigmoid",
    "gelu",
    "softmax_rows",
    "log_softmax_rows",
    "logsumexp_rows",
    "ste_sign",
    "rms_norm",
    "l2_normalize_rows",
    "l2_normalize_cols",
    "take_rows",
    "pick",
    "slice_cols",
    "concat_cols",
    "concat_rows",
]


def as_matrix(value) -> np.ndarray:
    """Coerce ``value`` to a 2-D float64 array (scalars become 1x1, vectors 1xn)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("graph", "op", "value", "grad", "parents", "vjp", "requires_grad", "name")

    def __init__(self, graph, op, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.graph = graph
        self.op = op
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"


class Graph:
    """Tape of nodes for one forward pass.

    ``leaf`` creates trainable inputs, ``const`` creates inputs that never
    receive gradient.
    """

    def __init__(self, requires_grad: bool = True):
        self.requires_grad = requires_grad
        self.nodes: list[Node] = []

    def leaf(self, value, name: Optional[str] = None) -> Node:
        node = Node(self, "leaf", as_matrix(value), requires_grad=self.requires_grad, name=name)
        if self.requires_grad:
            self.nodes.append(node)
        return node

    def const(self, value, name: Optional[str] = None) -> Node:
        return Node(self, "const", as_matrix(value), name=name)

    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "leaf"]

    def zero_grad(self) -> None:
        for n in self.nodes:
            n.grad = None

    def release(self) -> None:
        """Drop the tape so its arrays are freed without waiting for the cycle collector."""
        for n in self.nodes:
            n.grad = None
            n.vjp = None
            n.parents = ()
        self.nodes = []

    def _record(self, op, value, parents, vjp) -> Node:
        needs = self.requires_grad and any(p.requires_grad for p in parents)
        node = Node(self, op, value, parents if needs else (), vjp if needs else None, needs)
        if needs:
            self.nodes.append(node)
        return node


def _graph_of(*nodes: Node) -> Graph:
    return nodes[0].graph


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Node, b: Node, op: str):
    for i in (0, 1):
        da, db = a.value.shape[i], b.value.shape[i]
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast {a.value.shape} with {b.value.shape}")


def backward(graph: Graph, loss: Node) -> dict:
    """Accumulate d(loss)/d(node) into ``node.grad`` for every recorded node.

    Returns a mapping from leaf name (or the leaf node itself when unnamed)
    to its gradient. Leaves that the loss does not depend on get zeros.
    """
    if loss.value.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.value.shape}")
    graph.zero_grad()
    loss.grad = np.ones((1, 1))
    for node in reversed(graph.nodes):
        if node.grad is None or node.vjp is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g
    out = {}
    for leaf in graph.leaves():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.value)
        out[leaf.name if leaf.name is not None else leaf] = leaf.grad
    return out


def finite_diff(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``, one coordinate at a time."""
    if h <= 0:
        raise ContractError("finite_diff step must be positive")
    theta = np.array(theta, dtype=np.float64, copy=True)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# --- linear algebra -------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: {a.value.shape} x {b.value.shape} mismatch")
    A, B = a.value, b.value

    def vjp(g):
        return g @ B.T, A.T @ g

    return _graph_of(a)._record("matmul", A @ B, (a, b), vjp)


def transpose(a: Node) -> Node:
    return _graph_of(a)._record("transpose", a.value.T, (a,), lambda g: (g.T,))


# --- elementwise ------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")
    sa, sb = a.value.shape, b.value.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _graph_of(a)._record("add", a.value + b.value, (a, b), vjp)


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")
    sa, sb = a.value.shape, b.value.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _graph_of(a)._record("sub", a.value - b.value, (a, b), vjp)


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "mul")
    A, B = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _graph_of(a)._record("mul", A * B, (a, b), vjp)


def div(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "div")
    A, B = a.value, b.value
    out = A / B

    def vjp(g):
        return _unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)

    return _graph_of(a)._record("div", out, (a, b), vjp)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _graph_of(a)._record("scale", a.value * c, (a,), lambda g: (g * c,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _graph_of(a)._record("exp", out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    A = a.value
    return _graph_of(a)._record("log", np.log(A), (a,), lambda g: (g / A,))


def square(a: Node) -> Node:
    A = a.value
    return _graph_of(a)._record("square", A * A, (a,), lambda g: (2.0 * g * A,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    out = _sigmoid(a.value)
    return _graph_of(a)._record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Node) -> Node:
    """Tanh-approximated GELU."""
    x = a.value
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _graph_of(a)._record("gelu", out, (a,), vjp)


def ste_sign(z: Node, anchor: Optional[np.ndarray] = None) -> Node:
    """Binary step ``1[z > 0]`` whose backward pass is the identity.

    With ``anchor`` (a frozen copy of ``z`` from a reference point) the forward
    becomes ``1[anchor > 0] + (z - anchor)``: equal to the step at the anchor
    and exactly differentiable with the straight-through derivative, so it can
    be checked by finite differences.
    """
    if anchor is None:
        out = (z.value > 0).astype(np.float64)
    else:
        anchor = as_matrix(anchor)
        out = (anchor > 0).astype(np.float64) + (z.value - anchor)
    return _graph_of(z)._record("ste_sign", out, (z,), lambda g: (g,))


# --- reductions -------------------------------------------------------------


def total(a: Node) -> Node:
    shape = a.value.shape
    return _graph_of(a)._record(
        "total", np.array([[a.value.sum()]]), (a,), lambda g: (np.broadcast_to(g, shape),)
    )


def mean_all(a: Node) -> Node:
    n = a.value.size
    return scale(total(a), 1.0 / n)


def row_sum(a: Node) -> Node:
    """Sum across columns: r x c -> r x 1."""
    shape = a.value.shape
    return _graph_of(a)._record(
        "row_sum", a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape),)
    )


def col_sum(a: Node) -> Node:
    """Sum down rows: r x c -> 1 x c."""
    shape = a.value.shape
    return _graph_of(a)._record(
        "col_sum", a.value.sum(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape),)
    )


# --- row-wise normalisers -----------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Node) -> Node:
    out = _softmax(a.value)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _graph_of(a)._record("softmax_rows", out, (a,), vjp)


def logsumexp_rows(a: Node) -> Node:
    x = a.value
    m = x.max(axis=1, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    p = np.exp(x - out)
    return _graph_of(a)._record("logsumexp_rows", out, (a,), lambda g: (g * p,))


def log_softmax_rows(a: Node) -> Node:
    x = a.value
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _graph_of(a)._record("log_softmax_rows", out, (a,), vjp)


def rms_norm(x: Node, gain: Node, eps: float = 1e-6) -> Node:
    """``x / rms(x) * gain`` per row; ``gain`` is 1 x d."""
    X = x.value
    if gain.value.shape != (1, X.shape[1]):
        raise DimensionError(f"rms_norm: gain {gain.value.shape} for input {X.shape}")
    d = X.shape[1]
    inv = 1.0 / np.sqrt((X * X).mean(axis=1, keepdims=True) + eps)
    xhat = X * inv
    Gv = gain.value

    def vjp(g):
        gx = g * Gv
        dx = inv * (gx - xhat * (gx * xhat).sum(axis=1, keepdims=True) / d)
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        return dx, dgain

    return _graph_of(x)._record("rms_norm", xhat * Gv, (x, gain), vjp)


def l2_normalize_rows(a: Node) -> Node:
    X = a.value
    norms = np.sqrt((X * X).sum(axis=1, keepdims=True))
    out = X / norms

    def vjp(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return _graph_of(a)._record("l2_normalize_rows", out, (a,), vjp)


def l2_normalize_cols(a: Node) -> Node:
    X = a.value
    norms = np.sqrt((X * X).sum(axis=0, keepdims=True))
    out = X / norms

    def vjp(g):
        return ((g - out * (g * out).sum(axis=0, keepdims=True)) / norms,)

    return _graph_of(a)._record("l2_normalize_cols", out, (a,), vjp)


# --- indexing ---------------------------------------------------------------


def take_rows(table: Node, idx: Sequence[int]) -> Node:
    """Gather rows ``table[idx]``; gradients scatter-add back into the table."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = table.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _graph_of(table)._record("take_rows", table.value[idx], (table,), vjp)


def pick(a: Node, cols: Sequence[int]) -> Node:
    """Select ``a[i, cols[i]]`` for every row, giving an r x 1 column."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.value.shape[0])
    if cols.shape != rows.shape:
        raise DimensionError(f"pick: {cols.shape[0]} indices for {rows.shape[0]} rows")
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, cols] = g[:, 0]
        return (out,)

    return _graph_of(a)._record("pick", a.value[rows, cols][:, None], (a,), vjp)


def slice_cols(a: Node, start: int, stop: int) -> Node:
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _graph_of(a)._record("slice_cols", a.value[:, start:stop], (a,), vjp)


def concat_cols(parts: Sequence[Node]) -> Node:
    widths = [p.value.shape[1] for p in parts]
    rows = {p.value.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    value = np.concatenate([p.value for p in parts], axis=1)
    return _graph_of(*parts)._record("concat_cols", value, tuple(parts), vjp)


def concat_rows(parts: Sequence[Node]) -> Node:
    heights = [p.value.shape[0] for p in parts]
    cols = {p.value.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + heights)

    def vjp(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    value = np.concatenate([p.value for p in parts], axis=0)
    return _graph_of(*parts)._record("concat_rows", value, tuple(parts), vjp)
