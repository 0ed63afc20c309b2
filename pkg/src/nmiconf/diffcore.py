"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Values are numpy arrays. Matrix primitives act on the trailing two axes, so a
stack of 4x4 covariances shaped ``(batch, 4, 4)`` flows through the same ops
as a single matrix. Elementwise binary ops demand identical shapes; Python
scalars are folded in through :func:`scale` and :func:`shift`.

Graphs are built eagerly (each node's value is computed when it is created)
and can be re-run from their leaves with :func:`evaluate`.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

LN2 = math.log(2.0)


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible operand shapes {joined}")


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or inf."""

    def __init__(self, op: str, where: str = "value"):
        self.op = op
        super().__init__(f"non-finite {where} produced by primitive '{op}'")


class Node:
    __slots__ = ("value", "grad", "parents", "op", "name", "constant", "_fwd", "_bwd")

    def __init__(self, value, parents=(), op="leaf", fwd=None, bwd=None, name=None, constant=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents: tuple[Node, ...] = tuple(parents)
        self.op = op
        self.name = name
        self.constant = constant
        self._fwd = fwd
        self._bwd = bwd

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Node) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Node) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Node) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not a primitive")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def leaf(value, name: str | None = None) -> Node:
    """Trainable input; gradients accumulate here."""
    return Node(np.array(value, dtype=np.float64), name=name)


def const(value) -> Node:
    """Input that never receives gradient."""
    return Node(np.array(value, dtype=np.float64), op="const", constant=True)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def detach(x: Node) -> Node:
    return const(x.value)


def _make(op, parents, fwd, bwd, *, constant=None):
    values = [p.value for p in parents]
    out = fwd(*values)
    if constant is None:
        constant = all(p.constant for p in parents)
    return Node(out, parents, op=op, fwd=fwd, bwd=bwd, constant=constant)


def _same_shape(op, a: Node, b: Node):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g, shape):
    """Sum a gradient down to ``shape`` (only leading-axis stacking is undone)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _make("add", (a, b), np.add, lambda g, out, x, y: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _make("sub", (a, b), np.subtract, lambda g, out, x, y: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    return _make("mul", (a, b), np.multiply, lambda g, out, x, y: (g * y, g * x))


def neg(a: Node) -> Node:
    return _make("neg", (a,), np.negative, lambda g, out, x: (-g,))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make("scale", (a,), lambda x: x * c, lambda g, out, x: (g * c,))


def shift(a: Node, c) -> Node:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != a.shape:
        raise ShapeError("shift", a.shape, c.shape)
    return _make("shift", (a,), lambda x: x + c, lambda g, out, x: (g,))


def exp(a: Node) -> Node:
    return _make("exp", (a,), np.exp, lambda g, out, x: (g * out,))


def log(a: Node) -> Node:
    return _make("log", (a,), np.log, lambda g, out, x: (g / x,))


def log2(a: Node) -> Node:
    return _make("log2", (a,), np.log2, lambda g, out, x: (g / (x * LN2),))


def square(a: Node) -> Node:
    return _make("square", (a,), np.square, lambda g, out, x: (2.0 * g * x,))


def softsign(a: Node) -> Node:
    return _make(
        "softsign",
        (a,),
        lambda x: x / (1.0 + np.abs(x)),
        lambda g, out, x: (g / (1.0 + np.abs(x)) ** 2,),
    )


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Node) -> Node:
    return _make("softplus", (a,), _softplus, lambda g, out, x: (g * _sigmoid(x),))


def leaky_relu(a: Node, slope: float = 0.01) -> Node:
    return _make(
        "leaky_relu",
        (a,),
        lambda x: np.where(x > 0, x, slope * x),
        lambda g, out, x: (np.where(x > 0, g, slope * g),),
    )


def smooth_l1(a: Node, beta: float = 1.0) -> Node:
    """Elementwise Huber-style penalty: quadratic inside ``|a| < beta``, linear outside."""

    def fwd(x):
        ax = np.abs(x)
        return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)

    def bwd(g, out, x):
        return (g * np.where(np.abs(x) < beta, x / beta, np.sign(x)),)

    return _make("smooth_l1", (a,), fwd, bwd)


def gate(a: Node, cond: Node) -> Node:
    """``a * 1{cond > 0}``; the indicator is a constant for differentiation."""
    _same_shape("gate", a, cond)
    return _make(
        "gate",
        (a, cond),
        lambda x, c: np.where(c > 0, x, 0.0),
        lambda g, out, x, c: (np.where(c > 0, g, 0.0), None),
        constant=a.constant,
    )


def relu_gate(a: Node) -> Node:
    """``a * 1{a > 0}`` with the indicator held constant."""
    return gate(a, a)


def stop_rows(a: Node, mask, replacement) -> Node:
    """Swap the masked leading-axis rows for constants; no gradient flows into them."""
    mask = np.asarray(mask, dtype=bool)
    replacement = np.asarray(replacement, dtype=np.float64)

    def fwd(x):
        out = x.copy()
        out[mask] = replacement
        return out

    def bwd(g, out, x):
        g = g.copy()
        g[mask] = 0.0
        return (g,)

    return _make("stop_rows", (a,), fwd, bwd)


# ---------------------------------------------------------------------------
# reductions and layout
# ---------------------------------------------------------------------------


def sum(a: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy
    def bwd(g, out, x):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make("sum", (a,), lambda x: np.sum(x, axis=axis), bwd)


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / float(n))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = tuple(nodes)
    ref = list(nodes[0].shape)
    ax = axis % len(ref)
    for n in nodes[1:]:
        other = list(n.shape)
        if len(other) != len(ref) or other[:ax] + other[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError("concat", nodes[0].shape, n.shape)
    splits = np.cumsum([n.shape[ax] for n in nodes])[:-1]

    def bwd(g, out, *xs):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", nodes, lambda *xs: np.concatenate(xs, axis=ax), bwd)


def reshape(a: Node, shape) -> Node:
    return _make(
        "reshape",
        (a,),
        lambda x: x.reshape(shape),
        lambda g, out, x: (g.reshape(x.shape),),
    )


def take(a: Node, index, axis: int = -1) -> Node:
    """Select entries along ``axis`` (slice or integer array)."""

    def fwd(x):
        return np.take(x, index, axis=axis) if not isinstance(index, slice) else _slice(x, index, axis)

    def bwd(g, out, x):
        full = np.zeros_like(x)
        if isinstance(index, slice):
            idx = [slice(None)] * x.ndim
            idx[axis] = index
            full[tuple(idx)] += g
        else:
            np.add.at(np.moveaxis(full, axis, 0), np.asarray(index), np.moveaxis(g, axis, 0))
        return (full,)

    return _make("take", (a,), fwd, bwd)


def _slice(x, s, axis):
    idx = [slice(None)] * x.ndim
    idx[axis] = s
    return x[tuple(idx)]


def tril_assemble(diag: Node, off: Node) -> Node:
    """Lower-triangular ``(..., n, n)`` from a diagonal ``(..., n)`` and strict-lower entries ``(..., n(n-1)/2)``."""
    n = diag.shape[-1]
    rows, cols = np.tril_indices(n, -1)
    if off.shape[:-1] != diag.shape[:-1] or off.shape[-1] != rows.size:
        raise ShapeError("tril_assemble", diag.shape, off.shape)
    di = np.arange(n)

    def fwd(d, o):
        out = np.zeros(d.shape + (n,))
        out[..., di, di] = d
        out[..., rows, cols] = o
        return out

    def bwd(g, out, d, o):
        return g[..., di, di], g[..., rows, cols]

    return _make("tril_assemble", (diag, off), fwd, bwd)


# ---------------------------------------------------------------------------
# linear algebra on trailing axes
# ---------------------------------------------------------------------------


def transpose(a: Node) -> Node:
    return _make(
        "transpose",
        (a,),
        lambda x: np.swapaxes(x, -1, -2),
        lambda g, out, x: (np.swapaxes(g, -1, -2),),
    )


def matmul(a: Node, b: Node) -> Node:
    """``a @ b`` with equal leading axes, or ``b`` a single 2-D matrix shared across the stack."""
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.value.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bwd(g, out, x, y):
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        return gx, _reduce_to(gy, y.shape)

    return _make("matmul", (a, b), np.matmul, bwd)


def matvec(m: Node, v: Node) -> Node:
    """Stacked matrix-vector product ``(..., n, k) x (..., k) -> (..., n)``."""
    if m.value.ndim < 2 or m.shape[:-2] != v.shape[:-1] or m.shape[-1] != v.shape[-1]:
        raise ShapeError("matvec", m.shape, v.shape)

    def fwd(x, y):
        return np.einsum("...ij,...j->...i", x, y)

    def bwd(g, out, x, y):
        return np.einsum("...i,...j->...ij", g, y), np.einsum("...ij,...i->...j", x, g)

    return _make("matvec", (m, v), fwd, bwd)


def affine(x: Node, w: Node, b: Node) -> Node:
    """Dense layer ``x @ w + b`` over rows of ``x``."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("affine", x.shape, w.shape, b.shape)

    def bwd(g, out, xv, wv, bv):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _make("affine", (x, w, b), lambda xv, wv, bv: xv @ wv + bv, bwd)


def trace(a: Node) -> Node:
    n = a.shape[-1]
    eye = np.eye(n)
    return _make(
        "trace",
        (a,),
        lambda x: np.trace(x, axis1=-2, axis2=-1),
        lambda g, out, x: (np.asarray(g)[..., None, None] * eye,),
    )


def symmetrize(a: Node) -> Node:
    return scale(add(a, transpose(a)), 0.5)


def _square_check(op, a):
    if a.value.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(op, a.shape)


def _inverse_values(x):
    if not np.array_equal(x, np.swapaxes(x, -1, -2)):
        return np.linalg.inv(x)
    if x.ndim == 2:
        inv, ok = _kernels.spd_inverse(x[None])
        inv, ok = inv[0], ok[0]
    else:
        inv, ok = _kernels.spd_inverse(x)
    if np.all(ok):
        return inv
    # not positive definite: general inverse for those matrices
    flat = inv.reshape((-1,) + x.shape[-2:])
    bad = ~np.asarray(ok).reshape(-1)
    flat[bad] = np.linalg.inv(x.reshape(flat.shape)[bad])
    return flat.reshape(x.shape)


def inv(a: Node) -> Node:
    """Matrix inverse; Cholesky route for SPD matrices, LU otherwise."""
    _square_check("inv", a)

    def bwd(g, out, x):
        ot = np.swapaxes(out, -1, -2)
        return (-(ot @ g @ ot),)

    return _make("inv", (a,), _inverse_values, bwd)


def det(a: Node) -> Node:
    _square_check("det", a)

    def bwd(g, out, x):
        inv_t = np.swapaxes(np.linalg.inv(x), -1, -2)
        return ((np.asarray(g) * out)[..., None, None] * inv_t,)

    return _make("det", (a,), np.linalg.det, bwd)


def logdet(a: Node) -> Node:
    """Natural log of the determinant; the determinant must be positive."""
    _square_check("logdet", a)

    def fwd(x):
        sign, ld = np.linalg.slogdet(x)
        return np.where(sign > 0, ld, np.nan)

    def bwd(g, out, x):
        inv_t = np.swapaxes(np.linalg.inv(x), -1, -2)
        return (np.asarray(g)[..., None, None] * inv_t,)

    return _make("logdet", (a,), fwd, bwd)


def cholesky(a: Node) -> Node:
    """Lower Cholesky factor of ``(a + a^T) / 2``; NaN where not positive definite."""
    _square_check("cholesky", a)

    def fwd(x):
        chol, ok = _kernels.cholesky(x)
        return np.where(np.asarray(ok)[..., None, None], chol, np.nan)

    def bwd(g, out, x):
        return (_kernels.cholesky_backward(out, np.tril(g)),)

    return _make("cholesky", (a,), fwd, bwd)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def topo_order(root: Node) -> list[Node]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def evaluate(root: Node, check_finite: bool = False):
    """Recompute every node below ``root`` from the current leaf values."""
    for node in topo_order(root):
        if node.parents:
            node.value = np.asarray(node._fwd(*(p.value for p in node.parents)), dtype=np.float64)
            if check_finite and not np.all(np.isfinite(node.value)):
                raise NonFiniteError(node.op)
    return root.value


def backprop(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every non-constant node."""
    if root.value.size != 1:
        raise ShapeError("backprop (root must be scalar)", root.shape)
    order = topo_order(root)
    upstream: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None or node.constant:
            continue
        node.grad = node.grad + g
        if not node.parents:
            continue
        grads = node._bwd(g, node.value, *(p.value for p in node.parents))
        for parent, pg in zip(node.parents, grads):
            if pg is None or parent.constant:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                pg = _reduce_to(pg, parent.shape)
            key = id(parent)
            upstream[key] = upstream[key] + pg if key in upstream else pg


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol


def _first_nonfinite(root: Node) -> str | None:
    for node in topo_order(root):
        if not np.all(np.isfinite(node.value)):
            return node.op
    return None


def grad_check(
    f: Callable[[dict[str, Node]], Node],
    x: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    *,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` receives a dict of fresh leaf nodes and must return a scalar node.
    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_entries`` set, a seeded subset of that many entries per leaf is
    probed.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in x.items()}

    def run(values):
        leaves = {k: leaf(v, name=k) for k, v in values.items()}
        out = f(leaves)
        bad = _first_nonfinite(out)
        if bad is not None:
            raise NonFiniteError(bad)
        return leaves, out

    leaves, out = run(base)
    backprop(out)
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, value in base.items():
        analytic = leaves[name].grad
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        worst = 0.0
        for i in flat_idx:
            idx = np.unravel_index(i, value.shape) if value.ndim else ()
            shifted = {k: v.copy() for k, v in base.items()}
            shifted[name][idx] += eps
            fp = run(shifted)[1].item()
            shifted[name][idx] -= 2 * eps
            fm = run(shifted)[1].item()
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.checked[name] = int(flat_idx.size)
    return report


# ---------------------------------------------------------------------------
# array-or-graph dispatch
# ---------------------------------------------------------------------------


def _unwrap(out):
    if isinstance(out, Node):
        return float(out.value) if out.value.ndim == 0 else out.value
    if isinstance(out, tuple):
        return tuple(_unwrap(o) for o in out)
    return out


def _contains_node(items) -> bool:
    for a in items:
        if isinstance(a, Node):
            return True
        if isinstance(a, (list, tuple)) and _contains_node(a):
            return True
    return False


def graph_or_value(fn):
    """Let a graph-building function also accept and return plain arrays.

    If any argument is a :class:`Node` the result is returned as built;
    otherwise node results are unwrapped to floats / arrays.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if _contains_node(itertools.chain(args, kwargs.values())):
            return out
        return _unwrap(out)

    return wrapper
