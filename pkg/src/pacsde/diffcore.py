"""Reverse-mode automatic differentiation on dense float64 arrays.

A minimal define-by-run tape: every operation eagerly computes its numpy
value and records, per input, a closure mapping the output cotangent to the
input cotangent (a vector-Jacobian product).  Graphs are cheap to build, are
rebuilt from scratch every optimization step, and are walked once in reverse
topological order by :func:`backward`.

Stochastic inputs (Wiener increments, layer-output noise) must enter the
graph as :func:`constant` nodes so that gradients flow only through the
reparameterized transformations applied to them.

Checked mode (on by default, see :func:`set_checked`) scans values for
NaN/Inf at node construction and guards op domains; it is meant to be
disabled for long training runs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "Node",
    "leaf",
    "constant",
    "make_node",
    "set_checked",
    "checked_enabled",
    "unchecked",
    "add",
    "sub",
    "mul",
    "matmul",
    "scalar_mul",
    "sum",
    "mean",
    "square",
    "sqrt",
    "exp",
    "log",
    "softplus",
    "relu",
    "neg",
    "add_bias",
    "append_const_col",
    "backward",
    "finite_diff_check",
]

_CHECKED = True


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain (checked mode)."""


def set_checked(flag: bool) -> bool:
    """Toggle NaN/domain guards; returns the previous setting."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    return prev


def checked_enabled() -> bool:
    return _CHECKED


@contextlib.contextmanager
def unchecked():
    """Temporarily disable NaN/domain guards (benchmark runs)."""
    prev = set_checked(False)
    try:
        yield
    finally:
        set_checked(prev)


def as_array(value) -> np.ndarray:
    """Coerce to a C-contiguous float64 array; reject NaN/Inf in checked mode.

    0-d inputs stay 0-d (``ascontiguousarray`` would promote them to 1-d).
    """
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if _CHECKED and arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


class Node:
    """A value in the computation graph plus its backward wiring.

    ``parents`` is a tuple of ``(parent_node, vjp)`` pairs where ``vjp`` maps
    the cotangent of this node to the parent's cotangent contribution.
    """

    __slots__ = ("value", "parents", "needs_grad", "grad", "name")

    def __init__(self, value, parents=(), needs_grad=None, name=None):
        self.value = value
        self.parents = tuple(parents)
        if needs_grad is None:
            needs_grad = False
            for p, _ in self.parents:
                if p.needs_grad:
                    needs_grad = True
                    break
        self.needs_grad = needs_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"<Node shape={self.value.shape}{tag}>"


def leaf(value, name: str | None = None) -> Node:
    """A differentiable input (parameter)."""
    return Node(as_array(value), needs_grad=True, name=name)


def constant(value) -> Node:
    """A non-differentiable input (data, noise draws, fixed coefficients)."""
    return Node(as_array(value), needs_grad=False)


def make_node(value, parents: Sequence[tuple[Node, Callable]]) -> Node:
    """Extension hook: build a node from a precomputed value and VJP closures.

    Used for custom differentiable primitives whose Jacobian is hand-coded
    (e.g. known-physics drift functions).
    """
    return Node(as_array(value), parents)


def _coerce(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.value.shape != b.value.shape:
        raise ValueError(
            f"{op}: operands have mismatched shapes {a.value.shape} vs {b.value.shape}"
        )


def add(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    _same_shape("add", a, b)
    return make_node(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    _same_shape("sub", a, b)
    return make_node(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b) -> Node:
    """Elementwise product (same shapes; no broadcasting)."""
    a, b = _coerce(a), _coerce(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return make_node(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def matmul(a, b) -> Node:
    """Matrix product: 2-D @ 2-D or 2-D @ 1-D."""
    a, b = _coerce(a), _coerce(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2):
        raise ValueError(
            f"matmul: unsupported ranks for shapes {av.shape} vs {bv.shape}"
        )
    if av.shape[-1] != bv.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions disagree for shapes {av.shape} vs {bv.shape}"
        )
    if bv.ndim == 2:
        return make_node(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])
    return make_node(
        av @ bv, [(a, lambda g: np.outer(g, bv)), (b, lambda g: av.T @ g)]
    )


def scalar_mul(a, c: float) -> Node:
    a = _coerce(a)
    c = float(c)
    if _CHECKED and not np.isfinite(c):
        raise ValueError("scalar_mul: non-finite coefficient")
    return make_node(a.value * c, [(a, lambda g: g * c)])


def sum(a) -> Node:  # noqa: A001 - op name mirrors the math, used as dc.sum
    a = _coerce(a)
    shape = a.value.shape
    return make_node(np.asarray(a.value.sum()), [(a, lambda g: np.full(shape, g))])


def mean(a) -> Node:
    a = _coerce(a)
    shape = a.value.shape
    n = max(a.value.size, 1)
    return make_node(
        np.asarray(a.value.mean() if a.value.size else 0.0),
        [(a, lambda g: np.full(shape, g / n))],
    )


def square(a) -> Node:
    a = _coerce(a)
    av = a.value
    return make_node(av * av, [(a, lambda g: 2.0 * av * g)])


def sqrt(a) -> Node:
    a = _coerce(a)
    if _CHECKED and a.value.size and np.any(a.value <= 0.0):
        raise DomainError("sqrt: non-positive input")
    val = np.sqrt(a.value)
    return make_node(val, [(a, lambda g: g / (2.0 * val))])


def exp(a) -> Node:
    a = _coerce(a)
    val = np.exp(a.value)
    return make_node(val, [(a, lambda g: g * val)])


def log(a) -> Node:
    a = _coerce(a)
    if _CHECKED and a.value.size and np.any(a.value <= 0.0):
        raise DomainError("log: non-positive input")
    av = a.value
    return make_node(np.log(av), [(a, lambda g: g / av)])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(a) -> Node:
    a = _coerce(a)
    av = a.value
    return make_node(np.logaddexp(0.0, av), [(a, lambda g: g * _sigmoid(av))])


def relu(a) -> Node:
    a = _coerce(a)
    mask = a.value > 0.0
    return make_node(np.maximum(a.value, 0.0), [(a, lambda g: g * mask)])


def neg(a) -> Node:
    a = _coerce(a)
    return make_node(-a.value, [(a, lambda g: -g)])


def add_bias(x, b) -> Node:
    """Row-broadcast bias add: ``[m, n] + [n] -> [m, n]``."""
    x, b = _coerce(x), _coerce(b)
    if x.value.ndim != 2 or b.value.ndim != 1 or x.value.shape[1] != b.value.shape[0]:
        raise ValueError(
            f"add_bias: incompatible shapes {x.value.shape} vs {b.value.shape}"
        )
    return make_node(
        x.value + b.value,
        [(x, lambda g: g), (b, lambda g: g.sum(axis=0))],
    )


def append_const_col(x, fill: float) -> Node:
    """Append one constant column to a 2-D node (e.g. a time input)."""
    x = _coerce(x)
    if x.value.ndim != 2:
        raise ValueError(f"append_const_col: expected rank 2, got shape {x.value.shape}")
    m = x.value.shape[0]
    col = np.full((m, 1), float(fill))
    val = np.concatenate([x.value, col], axis=1)
    return make_node(val, [(x, lambda g: np.ascontiguousarray(g[:, :-1]))])


def _topo_order(root: Node) -> list[Node]:
    """Reverse post-order over grad-requiring ancestors: children before parents."""
    visited = {id(root)}
    stack: list[tuple[Node, int]] = [(root, 0)]
    order: list[Node] = []
    while stack:
        node, i = stack[-1]
        parents = node.parents
        while i < len(parents) and (
            not parents[i][0].needs_grad or id(parents[i][0]) in visited
        ):
            i += 1
        if i < len(parents):
            stack[-1] = (node, i + 1)
            child = parents[i][0]
            visited.add(id(child))
            stack.append((child, 0))
        else:
            stack.pop()
            order.append(node)
    order.reverse()
    return order


def backward(loss: Node, leaves: Sequence[Node] | None = None) -> dict[Node, np.ndarray]:
    """Accumulate gradients of a scalar loss w.r.t. every reachable leaf.

    Returns a map from leaf nodes (no parents, ``needs_grad``) to gradient
    arrays.  When ``leaves`` is given, unreachable entries are filled with
    zeros.  Repeated calls over the same graph recompute from scratch and are
    bit-identical.
    """
    if loss.value.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaf_grads: dict[Node, np.ndarray] = {}
    if loss.needs_grad:
        for node in _topo_order(loss):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            if not node.parents:
                leaf_grads[node] = g
                continue
            for parent, vjp in node.parents:
                if not parent.needs_grad:
                    continue
                contrib = np.asarray(vjp(g))
                if contrib.shape != parent.value.shape:
                    raise RuntimeError(
                        f"vjp produced shape {contrib.shape}, expected {parent.value.shape}"
                    )
                acc = grads.get(id(parent))
                grads[id(parent)] = contrib if acc is None else acc + contrib
    if leaves is not None:
        for node in leaves:
            if node not in leaf_grads:
                zero = np.zeros_like(node.value)
                node.grad = zero
                leaf_grads[node] = zero
    return leaf_grads


def finite_diff_check(f: Callable[[Node], Node], x0, step: float) -> float:
    """Compare the tape gradient of ``f`` against central finite differences.

    ``f`` maps a single node holding a parameter array to a scalar node and
    must be deterministic (freeze any noise in the closure).  Returns
    ``max_i |analytic_i - fd_i| / max(1, |analytic_i|)``.
    """
    if step <= 0.0:
        raise ValueError("finite_diff_check: step must be positive")
    x0 = as_array(np.array(x0, dtype=np.float64, copy=True))
    if x0.size == 0:
        return 0.0
    param = leaf(x0, name="fd_param")
    out = f(param)
    if out.value.shape != ():
        raise ValueError("finite_diff_check: f must return a scalar node")
    analytic = backward(out, leaves=[param])[param].ravel()
    flat = x0.ravel()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        hi = float(f(constant(bumped.reshape(x0.shape))).value)
        bumped[i] = flat[i] - step
        lo = float(f(constant(bumped.reshape(x0.shape))).value)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError("finite_diff_check: non-finite function value")
        fd[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - fd) / denom))
