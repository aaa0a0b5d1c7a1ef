"""Reverse-mode differentiation over a small set of dense vector operations.

Expressions are built as a graph of :class:`Node` objects.  Every primitive
records its parents and a VJP rule, and the VJP rules are themselves written
in terms of the same primitives.  Backpropagation therefore emits another
differentiable graph, which is what makes exact Hessian-vector products
possible: run backprop once to obtain gradient nodes, contract them with a
constant vector, and run backprop again over the combined graph.

All values are float64 arrays (0-d arrays stand in for scalars).  Reductions
follow numpy's deterministic summation order, and gradient accumulation
follows the topological order of the graph, so repeated runs on identical
inputs are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "DifferentiationError",
    "constant",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "dot",
    "matvec",
    "vecmat",
    "outer",
    "total",
    "expand",
    "exp",
    "log",
    "sqrt",
    "log_sum_exp",
    "pick",
    "narrow",
    "scatter",
    "reshape",
    "norm",
    "gradient",
    "value_and_gradient",
    "hessian_vector_product",
]


class DifferentiationError(RuntimeError):
    """Raised when an operation produces a non-finite intermediate value."""


class Node:
    """One value in an expression graph.

    ``parents`` and ``vjp`` are empty/None for leaves and constants.  For an
    interior node, ``vjp(g)`` maps the cotangent ``g`` of this node to a tuple
    of cotangent nodes aligned with ``parents``.
    """

    __slots__ = ("value", "parents", "vjp")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        vjp: Callable[["Node"], tuple["Node", ...]] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp

    # Arithmetic sugar so injected test functions read like plain math.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):  # pragma: no cover
        return f"Node(shape={self.value.shape})"


def constant(x) -> Node:
    """Wrap an array or scalar as a graph constant."""
    return Node(np.asarray(x, dtype=np.float64))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _checked(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise DifferentiationError(f"non-finite value produced by '{op}'")
    return value


def _reduce_to(g: Node, ref: Node) -> Node:
    # Broadcasting only widens scalars; the reverse pass narrows by summing.
    if ref.value.ndim == 0 and g.value.ndim != 0:
        return total(g)
    return g


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = Node(_checked(a.value + b.value, "add"), (a, b))
    out.vjp = lambda g: (_reduce_to(g, a), _reduce_to(g, b))
    return out


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = Node(_checked(a.value - b.value, "sub"), (a, b))
    out.vjp = lambda g: (_reduce_to(g, a), _reduce_to(neg(g), b))
    return out


def neg(a) -> Node:
    a = _as_node(a)
    out = Node(-a.value, (a,))
    out.vjp = lambda g: (neg(g),)
    return out


def mul(a, b) -> Node:
    """Elementwise product; one side may be a scalar."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 0 and b.value.ndim != 0 and a.value.shape != b.value.shape:
        raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = Node(_checked(a.value * b.value, "mul"), (a, b))
    out.vjp = lambda g: (_reduce_to(mul(g, b), a), _reduce_to(mul(g, a), b))
    return out


def div(a, b) -> Node:
    """Elementwise quotient; one side may be a scalar."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 0 and b.value.ndim != 0 and a.value.shape != b.value.shape:
        raise ValueError(f"div shape mismatch: {a.value.shape} vs {b.value.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        quotient = a.value / b.value
    out = Node(_checked(quotient, "div"), (a, b))
    out.vjp = lambda g: (
        _reduce_to(div(g, b), a),
        _reduce_to(neg(div(mul(g, out), b)), b),
    )
    return out


def dot(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 1 or b.value.ndim != 1 or a.value.shape != b.value.shape:
        raise ValueError("dot expects two equal-length vectors")
    out = Node(_checked(np.dot(a.value, b.value), "dot"), (a, b))
    out.vjp = lambda g: (mul(g, b), mul(g, a))
    return out


def matvec(m, x) -> Node:
    m, x = _as_node(m), _as_node(x)
    if m.value.ndim != 2 or x.value.ndim != 1 or m.value.shape[1] != x.value.shape[0]:
        raise ValueError("matvec expects a (r, c) matrix and a length-c vector")
    out = Node(_checked(m.value @ x.value, "matvec"), (m, x))
    out.vjp = lambda g: (outer(g, x), vecmat(g, m))
    return out


def vecmat(v, m) -> Node:
    v, m = _as_node(v), _as_node(m)
    if m.value.ndim != 2 or v.value.ndim != 1 or m.value.shape[0] != v.value.shape[0]:
        raise ValueError("vecmat expects a length-r vector and a (r, c) matrix")
    out = Node(_checked(v.value @ m.value, "vecmat"), (v, m))
    out.vjp = lambda g: (matvec(m, g), outer(v, g))
    return out


def outer(u, v) -> Node:
    u, v = _as_node(u), _as_node(v)
    if u.value.ndim != 1 or v.value.ndim != 1:
        raise ValueError("outer expects two vectors")
    out = Node(_checked(np.outer(u.value, v.value), "outer"), (u, v))
    out.vjp = lambda g: (matvec(g, v), vecmat(u, g))
    return out


def total(a) -> Node:
    """Sum of all elements, as a scalar node."""
    a = _as_node(a)
    out = Node(np.sum(a.value), (a,))
    out.vjp = lambda g: (expand(g, a.value.shape),)
    return out


def expand(s, shape) -> Node:
    """Broadcast a scalar node to the given shape."""
    s = _as_node(s)
    if s.value.ndim != 0:
        raise ValueError("expand expects a scalar node")
    shape = tuple(shape)
    out = Node(np.full(shape, float(s.value)), (s,))
    out.vjp = lambda g: (total(g),)
    return out


def exp(a) -> Node:
    a = _as_node(a)
    out = Node(_checked(np.exp(a.value), "exp"), (a,))
    out.vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Node:
    a = _as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    out = Node(_checked(value, "log"), (a,))
    out.vjp = lambda g: (div(g, a),)
    return out


def sqrt(a) -> Node:
    a = _as_node(a)
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.value)
    out = Node(_checked(value, "sqrt"), (a,))
    out.vjp = lambda g: (div(g, mul(2.0, out)),)
    return out


def log_sum_exp(a) -> Node:
    """Stable log(sum(exp(a))) of a vector.

    The reverse rule uses exp(a - out), which never overflows because every
    entry of ``a - out`` is non-positive.
    """
    a = _as_node(a)
    if a.value.ndim != 1:
        raise ValueError("log_sum_exp expects a vector")
    m = float(np.max(a.value))
    value = m + np.log(np.sum(np.exp(a.value - m)))
    out = Node(_checked(value, "log_sum_exp"), (a,))
    out.vjp = lambda g: (mul(g, exp(sub(a, expand(out, a.value.shape)))),)
    return out


def pick(a, index: int) -> Node:
    """Select one element of a vector as a scalar node."""
    a = _as_node(a)
    if a.value.ndim != 1:
        raise ValueError("pick expects a vector")
    index = int(index)
    if not 0 <= index < a.value.shape[0]:
        raise IndexError(f"pick index {index} out of range {a.value.shape[0]}")
    basis = np.zeros(a.value.shape[0])
    basis[index] = 1.0
    out = Node(a.value[index], (a,))
    out.vjp = lambda g: (mul(g, constant(basis)),)
    return out


def narrow(a, start: int, length: int) -> Node:
    """Contiguous slice of a vector."""
    a = _as_node(a)
    if a.value.ndim != 1:
        raise ValueError("narrow expects a vector")
    if start < 0 or length < 0 or start + length > a.value.shape[0]:
        raise IndexError("narrow slice out of range")
    size = a.value.shape[0]
    out = Node(a.value[start : start + length].copy(), (a,))
    out.vjp = lambda g: (scatter(g, start, size),)
    return out


def scatter(v, start: int, size: int) -> Node:
    """Place a vector into a zero vector of the given size at ``start``."""
    v = _as_node(v)
    if v.value.ndim != 1:
        raise ValueError("scatter expects a vector")
    length = v.value.shape[0]
    if start < 0 or start + length > size:
        raise IndexError("scatter slice out of range")
    buf = np.zeros(size)
    buf[start : start + length] = v.value
    out = Node(buf, (v,))
    out.vjp = lambda g: (narrow(g, start, length),)
    return out


def reshape(a, shape) -> Node:
    a = _as_node(a)
    shape = tuple(shape)
    out = Node(a.value.reshape(shape), (a,))
    out.vjp = lambda g: (reshape(g, a.value.shape),)
    return out


def norm(a) -> Node:
    """Euclidean norm as a composite of dot and sqrt."""
    return sqrt(dot(a, a))


def _topo_order(root: Node) -> list[Node]:
    """Parents-before-children ordering of all nodes reachable from root."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _backprop(out: Node) -> dict[int, Node]:
    """Cotangent nodes for everything reachable from a scalar output."""
    if out.value.ndim != 0:
        raise ValueError("backpropagation requires a scalar output")
    order = _topo_order(out)
    grads: dict[int, Node] = {id(out): constant(1.0)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        partials = node.vjp(g)
        for parent, pg in zip(node.parents, partials):
            cur = grads.get(id(parent))
            grads[id(parent)] = pg if cur is None else add(cur, pg)
    return grads


def value_and_gradient(f: Callable[[Node], Node], at) -> tuple[float, np.ndarray]:
    """Evaluate a scalar-valued graph function and its gradient at a point."""
    leaf = Node(np.array(at, dtype=np.float64))
    out = f(leaf)
    if not isinstance(out, Node):
        raise TypeError("function must return a Node")
    grads = _backprop(out)
    g = grads.get(id(leaf))
    if g is None:
        return float(out.value), np.zeros_like(leaf.value)
    return float(out.value), np.array(g.value, dtype=np.float64)


def gradient(f: Callable[[Node], Node], at) -> np.ndarray:
    """Gradient of a scalar-valued graph function at a point."""
    return value_and_gradient(f, at)[1]


def hessian_vector_product(f: Callable[[Node], Node], at, v) -> np.ndarray:
    """Exact H(at) @ v for a scalar-valued graph function.

    Backprop once to obtain gradient nodes, contract them with the constant
    vector v, and backprop the scalar result again.  No finite differences
    are involved, so the product is exact to round-off.
    """
    leaf = Node(np.array(at, dtype=np.float64))
    v = np.asarray(v, dtype=np.float64)
    if v.shape != leaf.value.shape:
        raise ValueError("direction vector must match the point's shape")
    out = f(leaf)
    if not isinstance(out, Node):
        raise TypeError("function must return a Node")
    grads = _backprop(out)
    g = grads.get(id(leaf))
    if g is None:
        return np.zeros_like(leaf.value)
    contracted = dot(g, constant(v))
    second = _backprop(contracted)
    h = second.get(id(leaf))
    if h is None:
        return np.zeros_like(leaf.value)
    return np.array(h.value, dtype=np.float64)
