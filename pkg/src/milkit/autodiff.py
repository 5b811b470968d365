"""Reverse-mode automatic differentiation over a dynamic computation graph.

All values are float64 numpy arrays. Every backward rule is itself built out
of graph operations, so gradients obtained with ``create_graph=True`` can be
differentiated again: differentiating through a gradient-descent step gives
exact second-order meta-gradients.

Graph construction and evaluation are single-threaded per graph instance;
distinct graphs over shared read-only parameter arrays may run in parallel.
Gradient accumulation follows the topological order of construction, so
repeated runs are bit-identical.
"""

from __future__ import annotations

import itertools
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node", "ShapeError", "UnboundLeafError",
    "constant", "placeholder", "evaluate", "gradient",
    "differentiable_sgd_step", "clip_elementwise",
    "finite_difference_jacobian", "fd_gradient",
    "add", "sub", "neg", "mul", "div", "matmul", "exp", "sqrt", "tanh",
    "sigmoid", "relu", "clip", "nsum", "mean", "reshape", "transpose",
    "broadcast_to", "concat", "slice_axis", "take_flat", "scatter_flat",
    "inject_vjp_fault",
]

_ids = itertools.count()

# op name -> sign multiplier applied to its backward contributions; used by
# the gradient-check harness to prove the harness catches broken backward rules
_VJP_FAULTS: dict[str, float] = {}


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class UnboundLeafError(RuntimeError):
    """A graph leaf was needed but never given a value."""


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One vertex of the computation graph.

    ``value`` is ``None`` only for unbound placeholders (bind via
    :func:`evaluate`). ``_forward`` recomputes the value from parent values,
    ``_vjp(grad, self)`` returns per-parent adjoint contributions, built from
    graph ops so they are differentiable in turn.
    """

    __slots__ = ("value", "parents", "op", "name", "_shape", "_vjp", "_forward", "_id")

    def __init__(self, value, parents=(), op="const", name=None, vjp=None, forward=None):
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.name = name
        self._vjp = vjp
        self._forward = forward
        self._shape = () if value is None else value.shape
        self._id = next(_ids)

    @property
    def shape(self):
        return self._shape

    @property
    def ndim(self):
        return len(self._shape)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Node#{self._id} {self.op}{tag} shape={self._shape}>"

    # arithmetic sugar; scalars and arrays are lifted to constants
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

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def constant(x, name=None) -> Node:
    """A leaf node with a fixed value; gradients do not flow past it."""
    return Node(_asarray(x), (), "const", name)


def placeholder(shape, name) -> Node:
    """An unbound named leaf; bind a value through :func:`evaluate`."""
    node = Node(None, (), "input", name)
    node._shape = tuple(int(s) for s in shape)
    return node


def _make(op, parents, forward, vjp, name=None) -> Node:
    vals = [p.value for p in parents]
    if any(v is None for v in vals):
        # shape probe only; real values arrive at evaluate() time
        with np.errstate(all="ignore"):
            probe = forward([np.zeros(p.shape) for p in parents])
        node = Node(None, parents, op, name, vjp, forward)
        node._shape = probe.shape
        return node
    return Node(forward(vals), parents, op, name, vjp, forward)


def _topo(root: Node) -> list[Node]:
    """Topological order (parents first), iterative to survive deep graphs."""
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


def evaluate(output: Node, bindings: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Forward value of ``output``, binding named leaves from ``bindings``.

    Recomputes every interior node, so repeated calls with identical
    bindings are bit-identical. Raises :class:`UnboundLeafError` for any
    leaf that has neither a value nor a binding, and :class:`ShapeError`
    when a binding disagrees with the declared leaf shape.
    """
    bindings = dict(bindings or {})
    order = _topo(output)
    for node in order:
        if node.parents:
            continue
        if node.name is not None and node.name in bindings:
            v = _asarray(bindings[node.name])
            if v.shape != node.shape:
                raise ShapeError(
                    f"binding for {node!r} has shape {v.shape}, expected {node.shape}")
            node.value = v
        if node.value is None:
            raise UnboundLeafError(f"leaf {node!r} is unbound")
    for node in order:
        if node.parents:
            node.value = node._forward([p.value for p in node.parents])
    if not np.all(np.isfinite(output.value)):
        raise FloatingPointError(f"non-finite value at {output!r}")
    return output.value


# ---------------------------------------------------------------------------
# primitives

def _check_broadcast(a: Node, b: Node, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _sum_to(g: Node, shape: tuple) -> Node:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = nsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = nsum(g, axis=axes, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return _make("add", (a, b), lambda v: v[0] + v[1],
                 lambda g, out: (_sum_to(g, out.parents[0].shape),
                                 _sum_to(g, out.parents[1].shape)))


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    return _make("sub", (a, b), lambda v: v[0] - v[1],
                 lambda g, out: (_sum_to(g, out.parents[0].shape),
                                 _sum_to(neg(g), out.parents[1].shape)))


def neg(a) -> Node:
    a = _lift(a)
    return _make("neg", (a,), lambda v: -v[0], lambda g, out: (neg(g),))


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    return _make("mul", (a, b), lambda v: v[0] * v[1],
                 lambda g, out: (_sum_to(mul(g, out.parents[1]), out.parents[0].shape),
                                 _sum_to(mul(g, out.parents[0]), out.parents[1].shape)))


def div(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    return _make("div", (a, b), lambda v: v[0] / v[1],
                 lambda g, out: (
                     _sum_to(div(g, out.parents[1]), out.parents[0].shape),
                     _sum_to(neg(div(mul(g, out.parents[0]),
                                     mul(out.parents[1], out.parents[1]))),
                             out.parents[1].shape)))


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make("matmul", (a, b), lambda v: v[0] @ v[1],
                 lambda g, out: (matmul(g, transpose(out.parents[1])),
                                 matmul(transpose(out.parents[0]), g)))


def exp(a) -> Node:
    a = _lift(a)
    return _make("exp", (a,), lambda v: np.exp(v[0]),
                 lambda g, out: (mul(g, out),))


def sqrt(a) -> Node:
    a = _lift(a)
    return _make("sqrt", (a,), lambda v: np.sqrt(v[0]),
                 lambda g, out: (div(mul(g, 0.5), out),))


def tanh(a) -> Node:
    a = _lift(a)
    return _make("tanh", (a,), lambda v: np.tanh(v[0]),
                 lambda g, out: (mul(g, sub(1.0, mul(out, out))),))


def sigmoid(a) -> Node:
    a = _lift(a)
    return _make("sigmoid", (a,), lambda v: 1.0 / (1.0 + np.exp(-v[0])),
                 lambda g, out: (mul(g, mul(out, sub(1.0, out))),))


def relu(a) -> Node:
    a = _lift(a)
    # the active-region mask is a constant of the backward pass
    return _make("relu", (a,), lambda v: np.maximum(v[0], 0.0),
                 lambda g, out: (mul(g, constant(
                     (out.parents[0].value > 0.0).astype(np.float64))),))


def clip(a, lo: float, hi: float) -> Node:
    """Elementwise clamp; gradient passes through the unclipped region and is
    zero where the bound is active (standard subgradient choice)."""
    if lo > hi:
        raise ValueError(f"clip: lo={lo} > hi={hi}")
    a = _lift(a)

    def vjp(g, out):
        v = out.parents[0].value
        mask = ((v >= lo) & (v <= hi)).astype(np.float64)
        return (mul(g, constant(mask)),)

    return _make("clip", (a,), lambda v: np.clip(v[0], lo, hi), vjp)


def nsum(a, axis=None, keepdims=False) -> Node:
    a = _lift(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)

    def vjp(g, out):
        src = out.parents[0]
        if axis is not None and not keepdims:
            kshape = list(src.shape)
            for ax in axis:
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return (broadcast_to(g, src.shape),)

    return _make("sum", (a,), lambda v: np.sum(v[0], axis=axis, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims=False) -> Node:
    a = _lift(a)
    if axis is None:
        count = int(np.prod(a.shape)) if a.shape else 1
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(nsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Node:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from None
    return _make("broadcast", (a,),
                 lambda v: np.broadcast_to(v[0], shape).copy(),
                 lambda g, out: (_sum_to(g, out.parents[0].shape),))


def reshape(a, shape) -> Node:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(a.shape)) != int(np.prod(shape)):
        raise ShapeError(f"reshape: {a.shape} -> {shape} changes element count")
    return _make("reshape", (a,), lambda v: v[0].reshape(shape),
                 lambda g, out: (reshape(g, out.parents[0].shape),))


def transpose(a, axes=None) -> Node:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make("transpose", (a,), lambda v: np.transpose(v[0], axes),
                 lambda g, out: (transpose(g, inv),))


def concat(parts: Sequence, axis: int = 0) -> Node:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ValueError("concat: empty part list")
    spans = []
    start = 0
    for p in parts:
        spans.append((start, start + p.shape[axis]))
        start += p.shape[axis]

    def vjp(g, out):
        return tuple(slice_axis(g, axis, lo, hi) for lo, hi in spans)

    return _make("concat", tuple(parts),
                 lambda v: np.concatenate(v, axis=axis), vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Node:
    a = _lift(a)
    index = tuple(slice(None) if d != axis else slice(start, stop)
                  for d in range(a.ndim))

    def vjp(g, out):
        return (_pad_embed(g, out.parents[0].shape, axis, start),)

    return _make("slice", (a,), lambda v: v[0][index].copy(), vjp)


def _pad_embed(g, shape, axis: int, start: int) -> Node:
    g = _lift(g)
    index = tuple(slice(None) if d != axis else slice(start, start + g.shape[axis])
                  for d in range(len(shape)))

    def forward(v):
        buf = np.zeros(shape)
        buf[index] = v[0]
        return buf

    return _make("pad", (g,), forward,
                 lambda gg, out: (slice_axis(gg, axis, start, start + g.shape[axis]),))


def take_flat(a, indices: np.ndarray) -> Node:
    """Gather by flat index: ``out = a.reshape(-1)[indices]``.

    Linear in ``a``; the backward rule is scatter-add, whose backward is the
    gather again, so the pair is differentiable to any order.
    """
    a = _lift(a)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= int(np.prod(a.shape))):
        raise ShapeError("take_flat: index out of range")
    return _make("take", (a,), lambda v: v[0].reshape(-1)[indices],
                 lambda g, out: (scatter_flat(g, indices, out.parents[0].shape),))


def scatter_flat(g, indices: np.ndarray, shape) -> Node:
    g = _lift(g)
    indices = np.asarray(indices, dtype=np.intp)
    shape = tuple(int(s) for s in shape)

    def forward(v):
        buf = np.zeros(int(np.prod(shape)))
        np.add.at(buf, indices.reshape(-1), v[0].reshape(-1))
        return buf.reshape(shape)

    return _make("scatter", (g,), forward,
                 lambda gg, out: (take_flat(gg, indices),))


# ---------------------------------------------------------------------------
# differentiation

def gradient(loss: Node, wrt: Mapping[str, Node], create_graph: bool = False) -> dict[str, Node]:
    """Gradients of a scalar ``loss`` for every named node in ``wrt``.

    Parameters unreachable from the loss get zero gradients. With
    ``create_graph=True`` the returned nodes stay connected, so they can be
    differentiated again; otherwise they are detached constants.
    """
    if loss.value is None:
        raise UnboundLeafError("evaluate the graph before taking gradients")
    if loss.value.size != 1:
        raise ShapeError(f"gradient: loss must be scalar, got shape {loss.shape}")

    order = _topo(loss)
    keys_of: dict[int, list[str]] = {}
    for k, n in wrt.items():
        keys_of.setdefault(id(n), []).append(k)

    acc: dict[int, Node] = {id(loss): constant(np.ones_like(loss.value))}
    out: dict[str, Node] = {}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        for k in keys_of.get(id(node), ()):
            out[k] = g
        if node._vjp is None:
            continue
        contribs = node._vjp(g, node)
        fault = _VJP_FAULTS.get(node.op)
        for parent, c in zip(node.parents, contribs):
            if c is None:
                continue
            if fault is not None:
                c = mul(c, fault)
            prev = acc.get(id(parent))
            acc[id(parent)] = c if prev is None else add(prev, c)

    for k, n in wrt.items():
        if k not in out:
            out[k] = constant(np.zeros(n.shape))
    if not create_graph:
        out = {k: constant(v.value) for k, v in out.items()}
    return out


def differentiable_sgd_step(params: Mapping[str, Node], loss: Node, alpha: float,
                            clip_interval: tuple[float, float] | None = None,
                            first_order: bool = False) -> dict[str, Node]:
    """One gradient-descent step returned as graph nodes.

    ``theta' = theta - alpha * clip(grad)``; a later loss on the result can be
    differentiated back to ``theta`` exactly. ``first_order=True`` detaches
    the inner gradient (first-order truncation, for ablations).
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if clip_interval is not None and clip_interval[0] > clip_interval[1]:
        raise ValueError(f"bad clip interval {clip_interval}")
    grads = gradient(loss, params, create_graph=not first_order)
    stepped = {}
    for k, p in params.items():
        g = grads[k]
        if clip_interval is not None:
            g = clip(g, clip_interval[0], clip_interval[1])
        stepped[k] = sub(p, mul(alpha, g))
    return stepped


def clip_elementwise(t: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Numeric clamp used on detached gradients; identity inside the interval."""
    if lo > hi:
        raise ValueError(f"clip_elementwise: lo={lo} > hi={hi}")
    return np.clip(_asarray(t), lo, hi)


# ---------------------------------------------------------------------------
# finite-difference oracles

def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray],
                               x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``, shape (f(x).size, x.size)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _asarray(x)
    flat = x.reshape(-1).copy()
    cols = []
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += eps
        hi = _asarray(f(bump.reshape(x.shape)))
        bump[i] -= 2 * eps
        lo = _asarray(f(bump.reshape(x.shape)))
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise FloatingPointError("non-finite function output in finite differences")
        cols.append((hi - lo).reshape(-1) / (2 * eps))
    return np.stack(cols, axis=1)


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    jac = finite_difference_jacobian(lambda v: np.asarray(f(v), dtype=np.float64), x, eps)
    return jac.reshape(np.asarray(x).shape)


class inject_vjp_fault:
    """Context manager flipping the sign of one op's backward rule.

    Lets the gradient-check harness prove it reports a broken backward pass.
    """

    def __init__(self, op: str, factor: float = -1.0):
        self.op = op
        self.factor = factor

    def __enter__(self):
        _VJP_FAULTS[self.op] = self.factor
        return self

    def __exit__(self, *exc):
        _VJP_FAULTS.pop(self.op, None)
        return False
