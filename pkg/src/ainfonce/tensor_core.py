"""Minimal reverse-mode autodiff over float64 arrays of rank <= 2.

Every tensor belongs to a :class:`Graph`, which records nodes in creation
order.  Backward walks that list in exact reverse order, so gradient
accumulation is deterministic.  The graph is rebuilt on every forward pass.
"""
from __future__ import annotations

import logging
from typing import Callable, Mapping, Sequence

import numpy as np

_log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
DEGENERATE_NORM = 1e-8


class ShapeError(ValueError):
    def __init__(self, kind: str, *shapes: tuple):
        self.kind = kind
        self.shapes = shapes
        joined = ", ".join(str(s) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {joined}")


class DomainError(ValueError):
    pass


class Tensor:
    """A node in a :class:`Graph`.

    ``value`` is a float64 ndarray of rank 0, 1 or 2.  Leaves created with
    ``requires_grad=True`` receive a ``grad`` buffer after :func:`backward`.
    """

    __slots__ = ("graph", "id", "value", "grad", "op", "parents",
                 "backward_fn", "requires_grad", "name")

    def __init__(self, graph, value, op="leaf", parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise ShapeError(op, value.shape)
        self.graph = graph
        self.value = value
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        # op nodes need a gradient iff some parent does
        self.requires_grad = requires_grad or (
            backward_fn is not None and any(p.requires_grad for p in self.parents))
        self.name = name
        self.id = graph._register(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0] if self.value.ndim >= 1 else 1

    @property
    def cols(self) -> int:
        return self.value.shape[1] if self.value.ndim == 2 else 1

    @property
    def is_leaf(self) -> bool:
        return self.op in ("leaf", "const")

    def __repr__(self):
        return f"Tensor(id={self.id}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(self.graph, other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(self.graph, other))

    def __rsub__(self, other):
        return sub(_lift(self.graph, other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(self.graph, other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(graph, x):
    if isinstance(x, Tensor):
        return x
    return graph.constant(x)


class Graph:
    """Define-by-run tape.

    ``frozen_stops`` lets a caller replay a previous run with every
    stop-gradient output pinned to its recorded value; the finite-difference
    checker uses this to probe the gradient that backward actually computes.
    """

    def __init__(self, frozen_stops: Sequence[np.ndarray] | None = None):
        self.nodes: list[Tensor] = []
        self.stop_values: list[np.ndarray] = []
        self._frozen = frozen_stops

    def _register(self, t: Tensor) -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def leaf(self, value, name=None, requires_grad=True) -> Tensor:
        return Tensor(self, np.array(value, dtype=np.float64), "leaf",
                      requires_grad=requires_grad, name=name)

    def constant(self, value, name=None) -> Tensor:
        return Tensor(self, value, "const", name=name)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.op == "leaf"]


def _check_same(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(kind, a.shape, b.shape)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    if len(shape) == 1 and grad.ndim == 2:
        return grad.sum(axis=0)
    raise ShapeError("broadcast", grad.shape, shape)


def _broadcast_ok(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return True
    # row-vector bias onto a matrix
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return True
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return True
    return False


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a, b):
        raise ShapeError("add", a.shape, b.shape)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor(a.graph, a.value + b.value, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a, b):
        raise ShapeError("sub", a.shape, b.shape)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                -_unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor(a.graph, a.value - b.value, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match or one side is rank 0."""
    if not (a.shape == b.shape or a.value.ndim == 0 or b.value.ndim == 0):
        raise ShapeError("mul", a.shape, b.shape)
    av, bv = a.value, b.value

    def bw(g):
        return (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                _unbroadcast(g * av, b.shape) if b.requires_grad else None)

    return Tensor(a.graph, av * bv, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.graph, a.value * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def bw(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return Tensor(a.graph, av @ bv, "matmul", (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return Tensor(a.graph, a.value.T, "transpose", (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.value > 0
    return Tensor(a.graph, np.where(mask, a.value, 0.0), "relu", (a,),
                  lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return Tensor(a.graph, out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0) or np.any(np.isnan(a.value)):
        raise DomainError(f"log of non-positive value (min {np.min(a.value)!r})")
    av = a.value
    return Tensor(a.graph, np.log(av), "log", (a,), lambda g: (g / av,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return Tensor(a.graph, np.asarray(a.value.sum()), "sum", (a,),
                      lambda g: (np.broadcast_to(g, shape).copy(),))
    if a.value.ndim != 2 or axis not in (0, 1):
        raise ShapeError("sum", shape)

    def bw(g):
        gg = g[:, None] if axis == 1 else g[None, :]
        return (np.broadcast_to(gg, shape).copy(),)

    return Tensor(a.graph, a.value.sum(axis=axis), "sum", (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.value.size
    shape = a.shape
    return Tensor(a.graph, np.asarray(a.value.mean()), "mean", (a,),
                  lambda g: (np.full(shape, g / n),))


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner products; rank-1 inputs give a rank-0 dot product."""
    _check_same("dot-rows", a, b)
    av, bv = a.value, b.value
    if av.ndim == 1:
        return Tensor(a.graph, np.asarray(av @ bv), "dot-rows", (a, b),
                      lambda g: (g * bv, g * av))
    if av.ndim != 2:
        raise ShapeError("dot-rows", a.shape, b.shape)
    return Tensor(a.graph, np.einsum("ij,ij->i", av, bv), "dot-rows", (a, b),
                  lambda g: (g[:, None] * bv, g[:, None] * av))


def l2_normalize_rows(a: Tensor) -> Tensor:
    av = a.value
    if av.ndim != 2:
        raise ShapeError("l2-normalize-rows", a.shape)
    norms = np.sqrt(np.einsum("ij,ij->i", av, av))
    if np.any(norms < DEGENERATE_NORM):
        _log.warning("l2-normalize-rows: %d row(s) with norm below %g",
                    int(np.sum(norms < DEGENERATE_NORM)), DEGENERATE_NORM)
    denom = np.maximum(norms, NORM_FLOOR)[:, None]
    out = av / denom
    live = (norms >= NORM_FLOOR)[:, None]

    def bw(g):
        # d(x/|x|) = (g - y <y, g>) / |x| where the norm is not floored
        proj = np.einsum("ij,ij->i", out, g)[:, None]
        return (np.where(live, (g - out * proj) / denom, g / denom),)

    return Tensor(a.graph, out, "l2-normalize-rows", (a,), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    lv = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ShapeError("softmax-cross-entropy", logits.shape, labels.shape)
    if np.any(labels < 0) or np.any(labels >= lv.shape[1]):
        raise ValueError("softmax-cross-entropy: label out of range")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    n = lv.shape[0]
    rows = np.arange(n)
    per = logz - shifted[rows, labels]
    probs = np.exp(shifted - logz[:, None])

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return Tensor(logits.graph, np.asarray(per.mean()), "softmax-cross-entropy",
                  (logits,), bw)


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2:
        raise ShapeError("take-rows", a.shape)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.graph, a.value[idx], "take-rows", (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1 or any(p.value.ndim != 2 for p in parts):
        raise ShapeError("concat-rows", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return Tensor(parts[0].graph, np.vstack([p.value for p in parts]),
                  "concat-rows", tuple(parts), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor(a.graph, a.value.reshape(shape), "reshape", (a,),
                  lambda g: (g.reshape(src),))


def clamp_min(a: Tensor, floor) -> Tensor:
    """max(a, floor) with zero gradient wherever the floor is active."""
    floor = np.asarray(floor, dtype=np.float64)
    keep = a.value >= floor
    return Tensor(a.graph, np.maximum(a.value, floor), "clamp-min", (a,),
                  lambda g: (g * keep,))


def stop_gradient(a: Tensor) -> Tensor:
    """Value identity whose backward discards the incoming adjoint."""
    g = a.graph
    k = len(g.stop_values)
    if g._frozen is not None:
        value = g._frozen[k]
    else:
        value = a.value
    g.stop_values.append(value)
    return Tensor(g, value, "stop-gradient", (a,), None)


_PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "elementwise-mul": mul, "scalar-scale": scale,
    "matmul": matmul, "relu": relu, "exp": exp, "log": log, "sum": sum,
    "mean": mean, "dot-rows": dot_rows, "l2-normalize-rows": l2_normalize_rows,
    "softmax-cross-entropy": softmax_cross_entropy,
    "transpose": transpose, "take-rows": take_rows, "clamp-min": clamp_min, "reshape": reshape,
    "stop-gradient": stop_gradient,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by its name; plain arrays become leaves of one graph."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    graph = next((x.graph for x in inputs if isinstance(x, Tensor)), None) or Graph()
    # integer arrays (class labels) pass through untouched
    lifted = [graph.leaf(x) if isinstance(x, np.ndarray) and x.dtype.kind == "f" else x
              for x in inputs]
    return fn(*lifted, **kwargs)


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) over the graph in reverse creation order.

    Returns ``{leaf id: gradient}`` for every leaf requiring grad; leaves the
    loss does not reach get explicit zeros.  Leaf ``.grad`` is set as well.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"backward needs a rank-0 loss, got shape {loss.shape}")
    graph = loss.graph
    grads: dict[int, np.ndarray] = {loss.id: np.asarray(1.0)}
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or node.backward_fn is None or not node.requires_grad:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = np.asarray(pg, dtype=np.float64)
    out = {}
    for leaf in graph.leaves():
        if not leaf.requires_grad:
            continue
        g = grads.get(leaf.id)
        leaf.grad = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)
        out[leaf.id] = leaf.grad
    return out


def live_leaves(loss: Tensor) -> set[int]:
    """Leaf ids reachable from ``loss`` without crossing a stop-gradient."""
    seen = {loss.id}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.op == "stop-gradient":
            continue
        for p in node.parents:
            if p.id not in seen:
                seen.add(p.id)
                stack.append(p)
    return {i for i in seen if loss.graph.nodes[i].op == "leaf"}


def finite_diff_check(f: Callable[[Graph, dict], Tensor],
                      params: Mapping[str, np.ndarray], eps: float = 1e-5,
                      freeze_stopped: bool = True) -> float:
    """Max relative error between backward and central differences.

    ``f(graph, leaves)`` builds a scalar loss from ``leaves`` (name -> Tensor).
    The error per component is ``|g_ad - g_fd| / max(1, |g_fd|)``.  Leaves
    consumed only through stop-gradient paths are skipped.  With
    ``freeze_stopped`` the perturbed evaluations pin every stop-gradient
    output to its unperturbed value, which makes the probe see the same
    function backward differentiates.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def run(values, frozen=None):
        g = Graph(frozen_stops=frozen)
        leaves = {k: g.leaf(v, name=k) for k, v in values.items()}
        out = f(g, leaves)
        if not np.all(np.isfinite(out.value)):
            raise FloatingPointError("finite_diff_check: non-finite evaluation")
        return g, leaves, out

    graph, leaves, loss = run(params)
    backward(loss)
    live = live_leaves(loss)
    frozen = graph.stop_values if freeze_stopped else None

    worst = 0.0
    for name, base in params.items():
        if leaves[name].id not in live:
            continue
        ad = leaves[name].grad
        flat = base.reshape(-1)
        for k in range(flat.size):
            plus = flat.copy()
            minus = flat.copy()
            plus[k] += eps
            minus[k] -= eps
            vp = run({**params, name: plus.reshape(base.shape)}, frozen)[2].value
            vm = run({**params, name: minus.reshape(base.shape)}, frozen)[2].value
            fd = float((vp - vm) / (2 * eps))
            err = abs(float(ad.reshape(-1)[k]) - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
