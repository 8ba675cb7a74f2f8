"""Reverse-mode automatic differentiation over dense float64 matrices.

Every tensor is a 2-D C-contiguous ``float64`` array.  Operations build a
tape of :class:`Node` objects; :func:`backward` runs one reverse topological
sweep from a scalar root and accumulates gradients on every reachable node.
There is no broadcasting beyond what the ops below implement explicitly,
no GPU path, and no in-place mutation of node values.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Node",
    "Parameter",
    "constant",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "matmul",
    "linear",
    "relu",
    "tanh",
    "exp",
    "log",
    "square",
    "clip",
    "minimum",
    "maximum",
    "sum_all",
    "mean_all",
    "row_sum",
    "max_reduce_rows",
    "segment_max_rows",
    "gather_rows",
    "weighted_gather_rows",
    "concat_cols",
    "concat_rows",
    "repeat_rows",
    "mse",
    "categorical_log_prob",
    "softmax_entropy",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D C-contiguous float64 array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={a.ndim}")
    return a


class Node:
    """One tape entry: a value, its gradient slot, and the producing op."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value: np.ndarray, parents: tuple = ()):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on non-scalar node of shape {self.shape}")
        return float(self.value[0, 0])

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape})"


class Parameter(Node):
    """A named leaf node whose gradient an optimizer will consume."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(as_matrix(value))
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


def constant(x) -> Node:
    """A leaf node that carries data but no parameter semantics."""
    return Node(as_matrix(x))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _acc(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def backward(root: Node, params: Iterable[Parameter] = ()) -> None:
    """Populate gradients of everything reachable from a 1x1 ``root``.

    Parameters listed in ``params`` have their gradients reset first, so
    any of them not reachable from ``root`` ends the sweep with a zero
    gradient.  Each node is visited exactly once, in reverse topological
    order.
    """
    if root.value.shape != (1, 1):
        raise ShapeError(f"backward root must be 1x1, got {root.value.shape}")
    for p in params:
        p.grad = np.zeros_like(p.value)

    # Iterative post-order DFS; graphs can be thousands of nodes deep.
    topo: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    root.grad = np.ones((1, 1))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape(a, b, "add")
    out = Node(a.value + b.value, (a, b))

    def _bw(g):
        _acc(a, g)
        _acc(b, g)

    out._backward = _bw
    return out


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape(a, b, "sub")
    out = Node(a.value - b.value, (a, b))

    def _bw(g):
        _acc(a, g)
        _acc(b, -g)

    out._backward = _bw
    return out


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape(a, b, "mul")
    out = Node(a.value * b.value, (a, b))

    def _bw(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    out._backward = _bw
    return out


def neg(a) -> Node:
    a = _as_node(a)
    out = Node(-a.value, (a,))
    out._backward = lambda g: _acc(a, -g)
    return out


def scale(a, s: float) -> Node:
    a = _as_node(a)
    s = float(s)
    out = Node(a.value * s, (a,))
    out._backward = lambda g: _acc(a, g * s)
    return out


def add_scalar(a, s: float) -> Node:
    a = _as_node(a)
    out = Node(a.value + float(s), (a,))
    out._backward = lambda g: _acc(a, g)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dims differ {a.value.shape} @ {b.value.shape}"
        )
    out = Node(a.value @ b.value, (a, b))

    def _bw(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    out._backward = _bw
    return out


def linear(x, w, b) -> Node:
    """Affine map ``x @ w.T + b.T`` with ``w`` (out,in) and ``b`` (out,1)."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    out_dim, in_dim = w.value.shape
    if x.value.shape[1] != in_dim:
        raise ShapeError(
            f"linear: input has {x.value.shape[1]} columns, weight expects {in_dim}"
        )
    if b.value.shape != (out_dim, 1):
        raise ShapeError(f"linear: bias shape {b.value.shape} != ({out_dim}, 1)")
    out = Node(x.value @ w.value.T + b.value.T, (x, w, b))

    def _bw(g):
        _acc(x, g @ w.value)
        _acc(w, g.T @ x.value)
        _acc(b, g.sum(axis=0, keepdims=True).T)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Node:
    a = _as_node(a)
    out = Node(np.maximum(a.value, 0.0), (a,))
    out._backward = lambda g: _acc(a, g * (a.value > 0.0))
    return out


def tanh(a) -> Node:
    a = _as_node(a)
    t = np.tanh(a.value)
    out = Node(t, (a,))
    out._backward = lambda g: _acc(a, g * (1.0 - t * t))
    return out


def exp(a) -> Node:
    a = _as_node(a)
    e = np.exp(a.value)
    out = Node(e, (a,))
    out._backward = lambda g: _acc(a, g * e)
    return out


def log(a) -> Node:
    a = _as_node(a)
    out = Node(np.log(a.value), (a,))
    out._backward = lambda g: _acc(a, g / a.value)
    return out


def square(a) -> Node:
    a = _as_node(a)
    out = Node(a.value * a.value, (a,))
    out._backward = lambda g: _acc(a, g * (2.0 * a.value))
    return out


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient is 1 inside the interval (inclusive), 0 outside."""
    a = _as_node(a)
    lo, hi = float(lo), float(hi)
    out = Node(np.clip(a.value, lo, hi), (a,))
    inside = (a.value >= lo) & (a.value <= hi)
    out._backward = lambda g: _acc(a, g * inside)
    return out


def minimum(a, b) -> Node:
    """Elementwise min; gradient routes to the smaller operand, ties to ``a``."""
    a, b = _as_node(a), _as_node(b)
    _same_shape(a, b, "minimum")
    take_a = a.value <= b.value
    out = Node(np.where(take_a, a.value, b.value), (a, b))

    def _bw(g):
        _acc(a, g * take_a)
        _acc(b, g * ~take_a)

    out._backward = _bw
    return out


def maximum(a, b) -> Node:
    """Elementwise max; gradient routes to the larger operand, ties to ``a``."""
    a, b = _as_node(a), _as_node(b)
    _same_shape(a, b, "maximum")
    take_a = a.value >= b.value
    out = Node(np.where(take_a, a.value, b.value), (a, b))

    def _bw(g):
        _acc(a, g * take_a)
        _acc(b, g * ~take_a)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Node:
    a = _as_node(a)
    out = Node(np.array([[a.value.sum()]]), (a,))
    out._backward = lambda g: _acc(a, np.full_like(a.value, g[0, 0]))
    return out


def mean_all(a) -> Node:
    a = _as_node(a)
    n = a.value.size
    out = Node(np.array([[a.value.sum() / n]]), (a,))
    out._backward = lambda g: _acc(a, np.full_like(a.value, g[0, 0] / n))
    return out


def row_sum(a) -> Node:
    """Sum along columns: (n, f) -> (n, 1)."""
    a = _as_node(a)
    out = Node(a.value.sum(axis=1, keepdims=True), (a,))
    out._backward = lambda g: _acc(a, np.broadcast_to(g, a.value.shape).copy())
    return out


def segment_max_rows(a, bounds: Sequence[int]) -> Node:
    """Per-segment column-wise max.

    ``bounds`` is an increasing index list ``[0, ..., n_rows]``; segment ``s``
    covers rows ``bounds[s]:bounds[s+1]`` and must be non-empty.  The backward
    pass routes each column's gradient to the first row attaining the max
    within its segment.
    """
    a = _as_node(a)
    bounds = np.asarray(bounds, dtype=np.intp)
    if bounds[0] != 0 or bounds[-1] != a.value.shape[0]:
        raise ShapeError("segment bounds must span all rows")
    if np.any(np.diff(bounds) < 1):
        raise ShapeError("empty segment in segment_max_rows")
    n_seg = len(bounds) - 1
    cols = a.value.shape[1]
    out_val = np.empty((n_seg, cols))
    argmax = np.empty((n_seg, cols), dtype=np.intp)
    for s in range(n_seg):
        block = a.value[bounds[s] : bounds[s + 1]]
        idx = block.argmax(axis=0)
        argmax[s] = idx + bounds[s]
        out_val[s] = block[idx, np.arange(cols)]
    out = Node(out_val, (a,))

    def _bw(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (argmax, np.arange(cols)[None, :].repeat(n_seg, axis=0)), g)
        _acc(a, ga)

    out._backward = _bw
    return out


def max_reduce_rows(a) -> Node:
    """Column-wise max over all rows: (n, f) -> (1, f), n >= 1.

    Ties route the gradient to the lowest row index.
    """
    a = _as_node(a)
    if a.value.shape[0] < 1:
        raise ShapeError("max_reduce_rows on an empty matrix")
    return segment_max_rows(a, [0, a.value.shape[0]])


# ---------------------------------------------------------------------------
# indexing and restructuring


def gather_rows(a, idx) -> Node:
    """Select rows by index, with repetition allowed."""
    a = _as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Node(a.value[idx], (a,))

    def _bw(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        _acc(a, ga)

    out._backward = _bw
    return out


def weighted_gather_rows(a, idx, weights) -> Node:
    """Weighted combination of source rows.

    ``idx`` and ``weights`` are (q, k); output row ``i`` is
    ``sum_j weights[i, j] * a[idx[i, j]]``.  Summation runs in column order
    of ``idx``, so callers control the float accumulation order.
    """
    a = _as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    w = np.asarray(weights, dtype=np.float64)
    if idx.shape != w.shape:
        raise ShapeError(f"weighted_gather_rows: idx {idx.shape} vs weights {w.shape}")
    gathered = a.value[idx]  # (q, k, f)
    out = Node(np.einsum("qk,qkf->qf", w, gathered, optimize=False), (a,))

    def _bw(g):
        ga = np.zeros_like(a.value)
        contrib = w[:, :, None] * g[:, None, :]
        np.add.at(ga, idx.ravel(), contrib.reshape(-1, g.shape[1]))
        _acc(a, ga)

    out._backward = _bw
    return out


def concat_cols(nodes: Sequence) -> Node:
    nodes = [_as_node(n) for n in nodes]
    rows = nodes[0].value.shape[0]
    for n in nodes:
        if n.value.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    out = Node(np.concatenate([n.value for n in nodes], axis=1), tuple(nodes))
    splits = np.cumsum([n.value.shape[1] for n in nodes])[:-1]

    def _bw(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=1)):
            _acc(n, piece)

    out._backward = _bw
    return out


def concat_rows(nodes: Sequence) -> Node:
    nodes = [_as_node(n) for n in nodes]
    cols = nodes[0].value.shape[1]
    for n in nodes:
        if n.value.shape[1] != cols:
            raise ShapeError("concat_rows: column counts differ")
    out = Node(np.concatenate([n.value for n in nodes], axis=0), tuple(nodes))
    splits = np.cumsum([n.value.shape[0] for n in nodes])[:-1]

    def _bw(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=0)):
            _acc(n, piece)

    out._backward = _bw
    return out


def repeat_rows(a, n: int) -> Node:
    """Tile a (1, f) row to (n, f)."""
    a = _as_node(a)
    if a.value.shape[0] != 1:
        raise ShapeError("repeat_rows expects a single-row matrix")
    out = Node(np.repeat(a.value, n, axis=0), (a,))
    out._backward = lambda g: _acc(a, g.sum(axis=0, keepdims=True))
    return out


# ---------------------------------------------------------------------------
# losses


def mse(pred, target) -> Node:
    """Mean squared error over all entries, as a 1x1 node."""
    pred, target = _as_node(pred), _as_node(target)
    _same_shape(pred, target, "mse")
    return mean_all(square(sub(pred, target)))


def categorical_log_prob(logits, actions) -> Node:
    """Log-probability of each row's chosen action under softmax(logits).

    ``logits`` is (n, a); ``actions`` an int vector of length n.  Returns an
    (n, 1) node.
    """
    logits = _as_node(logits)
    actions = np.asarray(actions, dtype=np.intp)
    if actions.ndim != 1 or actions.shape[0] != logits.value.shape[0]:
        raise ShapeError("categorical_log_prob: one action per logit row required")
    if actions.min(initial=0) < 0 or actions.max(initial=0) >= logits.value.shape[1]:
        raise ShapeError("categorical_log_prob: action index out of range")
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(z.shape[0])
    out = Node(logp[rows, actions].reshape(-1, 1), (logits,))
    probs = np.exp(logp)

    def _bw(g):
        gl = -probs * g
        gl[rows, actions] += g[:, 0]
        _acc(logits, gl)

    out._backward = _bw
    return out


def softmax_entropy(logits) -> Node:
    """Shannon entropy of softmax(logits) per row, as an (n, 1) node."""
    logits = _as_node(logits)
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1, keepdims=True)
    out = Node(h, (logits,))

    def _bw(g):
        _acc(logits, -p * (logp + h) * g)

    out._backward = _bw
    return out
