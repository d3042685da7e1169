"""Minimal reverse-mode autodiff over numpy float64 arrays.

Operations on tensors that require gradients append a :class:`GraphNode` to
the active :class:`Tape`.  ``backward`` sweeps the reachable nodes in reverse
creation order.  Graphs can be retained for repeated backward passes, seeded
with an explicit gradient at a non-scalar root, and freed explicitly; freeing
only kills nodes that no surviving node still consumes.
"""

from __future__ import annotations

import enum
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_ids = itertools.count(1)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class GraphError(RuntimeError):
    """Raised on lifecycle violations: dead nodes, missing seeds, detached roots."""


class OpKind(enum.Enum):
    MATMUL = "matmul"
    ADD = "add"
    MUL = "mul"
    SCALE = "scale"
    TANH = "tanh"
    SOFTMAX = "softmax"
    EMBEDDING = "embedding"
    CONCAT = "concat"
    SLICE = "slice"
    MEAN = "mean"
    CROSS_ENTROPY = "cross_entropy"
    SUM_SQ = "sum_sq"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"


@dataclass(frozen=True)
class TapeStats:
    live_node_count: int
    peak_live_node_count: int
    backward_pass_count: int


class Tape:
    """Node accounting for one thread of gradient computation.

    Use as a context manager to make it the current tape of this thread::

        with Tape() as tape:
            loss = model(...)
            backward(loss)
        tape.stats()
    """

    _local = threading.local()

    def __init__(self):
        self.live_node_count = 0
        self.peak_live_node_count = 0
        self.backward_pass_count = 0
        self._outer: list[Tape] = []

    @classmethod
    def current(cls) -> "Tape":
        tape = getattr(cls._local, "tape", None)
        if tape is None:
            tape = cls._local.tape = Tape()
        return tape

    def __enter__(self) -> "Tape":
        self._outer.append(Tape.current())
        Tape._local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._local.tape = self._outer.pop()

    def stats(self) -> TapeStats:
        return TapeStats(self.live_node_count, self.peak_live_node_count,
                         self.backward_pass_count)

    def reset_peak(self) -> None:
        self.peak_live_node_count = self.live_node_count

    def _added(self) -> None:
        self.live_node_count += 1
        if self.live_node_count > self.peak_live_node_count:
            self.peak_live_node_count = self.live_node_count


class GraphNode:
    __slots__ = ("op", "parents", "saved", "alive", "out_id", "tape",
                 "n_consumers", "pinned")

    def __init__(self, op: OpKind, parents: Sequence["Tensor"], saved, out_id: int,
                 tape: Tape):
        self.op = op
        self.parents = tuple(parents)
        self.saved = saved
        self.alive = True
        self.out_id = out_id
        self.tape = tape
        self.n_consumers = 0
        self.pinned = False

    @property
    def parent_ids(self) -> list[int]:
        return [p.id for p in self.parents]

    def __repr__(self):
        state = "alive" if self.alive else "dead"
        return f"GraphNode({self.op.value}#{self.out_id}, {state})"


class Tensor:
    """Dense float64 array with an optional gradient accumulator.

    Leaves (``node is None``) with ``requires_grad`` accumulate into ``grad``;
    interior tensors only carry their producing node.
    """

    __slots__ = ("id", "values", "requires_grad", "grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.id = next(_ids)
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[GraphNode] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# recording

def _record(op: OpKind, parents: Sequence[Tensor], values: np.ndarray, saved) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(values)
    tape = Tape.current()
    out = Tensor(values, requires_grad=True)
    node = GraphNode(op, parents, saved, out.id, tape)
    for p in node.parents:
        if p.node is not None:
            p.node.n_consumers += 1
    out.node = node
    tape._added()
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record(OpKind.MATMUL, (a, b), a.values @ b.values, (a.values, b.values))


def _matmul_bwd(g, saved, needs=(True, True)):
    a, b = saved
    ga = _unbroadcast(g @ b.swapaxes(-1, -2), a.shape) if needs[0] else None
    gb = _unbroadcast(a.swapaxes(-1, -2) @ g, b.shape) if needs[1] else None
    return ga, gb


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _record(OpKind.ADD, (a, b), a.values + b.values, (a.shape, b.shape))


def _add_bwd(g, saved, needs=None):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return _record(OpKind.MUL, (a, b), a.values * b.values, (a.values, b.values))


def _mul_bwd(g, saved, needs=None):
    a, b = saved
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def scale(x: Tensor, factor: float) -> Tensor:
    return _record(OpKind.SCALE, (x,), x.values * factor, factor)


def _scale_bwd(g, factor, needs=None):
    return (g * factor,)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _record(OpKind.TANH, (x,), y, y)


def _tanh_bwd(g, y, needs=None):
    return (g * (1.0 - y * y),)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(OpKind.SOFTMAX, (x,), y, y)


def _softmax_bwd(g, y, needs=None):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    return _record(OpKind.EMBEDDING, (table,), table.values[ids], (ids, table.shape))


def _embedding_bwd(g, saved, needs=None):
    ids, shape = saved
    gt = np.zeros(shape)
    np.add.at(gt, ids, g)
    return (gt,)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].values.ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.values.ndim != ndim or any(
                n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    values = np.concatenate([t.values for t in tensors], axis=ax)
    return _record(OpKind.CONCAT, tensors, values, (ax, np.cumsum(sizes)[:-1]))


def _concat_bwd(g, saved, needs=None):
    ax, cuts = saved
    return tuple(np.split(g, cuts, axis=ax))


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices only."""
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (int, slice, np.integer)) and i is not Ellipsis:
            raise ShapeError(f"slice: unsupported index {i!r}")
    try:
        values = x.values[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index} invalid for shape {x.shape}") from exc
    if values.size == 0:
        raise ShapeError(f"slice: index {index} selects nothing from shape {x.shape}")
    return _record(OpKind.SLICE, (x,), values.copy(), (index, x.shape))


def _slice_bwd(g, saved, needs=None):
    index, shape = saved
    gx = np.zeros(shape)
    gx[index] = g
    return (gx,)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    values = x.values.mean(axis=axis)
    return _record(OpKind.MEAN, (x,), values, (axis, x.shape))


def _mean_bwd(g, saved, needs=None):
    axis, shape = saved
    if axis is None:
        return (np.full(shape, float(g) / int(np.prod(shape))),)
    return (np.broadcast_to(np.expand_dims(g, axis) / shape[axis], shape).copy(),)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token cross-entropy of ``logits [n, V]`` against integer ``targets [n]``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.values.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} incompatible with targets {targets.shape}")
    z = logits.values - logits.values.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    n = targets.shape[0]
    loss = -logp[np.arange(n), targets].mean()
    return _record(OpKind.CROSS_ENTROPY, (logits,), np.asarray(loss), (np.exp(logp), targets))


def _cross_entropy_bwd(g, saved, needs=None):
    p, targets = saved
    d = p.copy()
    n = targets.shape[0]
    d[np.arange(n), targets] -= 1.0
    return (d * (float(g) / n),)


def sum_sq(x: Tensor) -> Tensor:
    return _record(OpKind.SUM_SQ, (x,), np.asarray(np.sum(x.values * x.values)), x.values)


def _sum_sq_bwd(g, xv, needs=None):
    return (2.0 * float(g) * xv,)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.values.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.values.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    return _record(OpKind.TRANSPOSE, (x,), x.values.transpose(axes), np.argsort(axes))


def _transpose_bwd(g, inverse, needs=None):
    return (g.transpose(inverse),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        values = x.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _record(OpKind.RESHAPE, (x,), values, x.shape)


def _reshape_bwd(g, shape, needs=None):
    return (g.reshape(shape),)


_BACKWARD: dict[OpKind, Callable] = {
    OpKind.MATMUL: _matmul_bwd,
    OpKind.ADD: _add_bwd,
    OpKind.MUL: _mul_bwd,
    OpKind.SCALE: _scale_bwd,
    OpKind.TANH: _tanh_bwd,
    OpKind.SOFTMAX: _softmax_bwd,
    OpKind.EMBEDDING: _embedding_bwd,
    OpKind.CONCAT: _concat_bwd,
    OpKind.SLICE: _slice_bwd,
    OpKind.MEAN: _mean_bwd,
    OpKind.CROSS_ENTROPY: _cross_entropy_bwd,
    OpKind.SUM_SQ: _sum_sq_bwd,
    OpKind.TRANSPOSE: _transpose_bwd,
    OpKind.RESHAPE: _reshape_bwd,
}

_FORWARD: dict[OpKind, Callable] = {
    OpKind.MATMUL: matmul,
    OpKind.ADD: add,
    OpKind.MUL: mul,
    OpKind.SCALE: scale,
    OpKind.TANH: tanh,
    OpKind.SOFTMAX: softmax,
    OpKind.EMBEDDING: embedding,
    OpKind.CONCAT: lambda *ts, axis=0: concat(ts, axis=axis),
    OpKind.SLICE: slice_,
    OpKind.MEAN: mean,
    OpKind.CROSS_ENTROPY: cross_entropy,
    OpKind.SUM_SQ: sum_sq,
    OpKind.TRANSPOSE: transpose,
    OpKind.RESHAPE: reshape,
}


def forward_primitive(kind: OpKind | str, inputs: Sequence[Tensor], *args, **kwargs) -> Tensor:
    """Apply primitive ``kind`` to ``inputs``; extra arguments go to the primitive
    (e.g. the factor for ``scale``, ids for ``embedding``, ``axis`` for ``concat``)."""
    return _FORWARD[OpKind(kind)](*inputs, *args, **kwargs)


# ---------------------------------------------------------------------------
# graph traversal and lifecycle

def _reachable(node: GraphNode, strict: bool) -> list[GraphNode]:
    seen = {node.out_id: node}
    stack = [node]
    while stack:
        n = stack.pop()
        for p in n.parents:
            pn = p.node
            if pn is None or pn.out_id in seen:
                continue
            if not pn.alive:
                if strict:
                    raise GraphError(f"backward through dead node {pn!r}")
                continue
            seen[pn.out_id] = pn
            stack.append(pn)
    return sorted(seen.values(), key=lambda n: n.out_id, reverse=True)


def _kill(node: GraphNode) -> None:
    node.alive = False
    node.tape.live_node_count -= 1
    for p in node.parents:
        if p.node is not None:
            p.node.n_consumers -= 1
    node.parents = ()
    node.saved = None


def _release(nodes: list[GraphNode]) -> None:
    """Kill ``nodes[0]`` and every node in ``nodes`` left without consumers.

    ``nodes`` is in descending creation order, so all consumers inside the set
    are visited before their producers.
    """
    _kill(nodes[0])
    for n in nodes[1:]:
        if n.alive and n.n_consumers == 0 and not n.pinned:
            _kill(n)


def backward(root: Tensor, seed_grad=None, retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into every reachable ``requires_grad`` leaf.

    ``seed_grad`` is mandatory for non-scalar roots.  With ``retain_graph``
    false, nodes reachable only from ``root`` are freed afterwards.
    """
    node = root.node
    if node is None:
        raise GraphError(f"{root!r} is not graph-attached")
    if not node.alive:
        raise GraphError(f"backward through dead node {node!r}")
    if seed_grad is None:
        if root.values.size != 1:
            raise GraphError(f"non-scalar root of shape {root.shape} needs seed_grad")
        seed = np.ones(root.shape)
    else:
        seed = np.asarray(seed_grad.values if isinstance(seed_grad, Tensor) else seed_grad,
                          dtype=np.float64)
        if seed.shape != root.shape:
            raise ShapeError(f"seed_grad shape {seed.shape} does not match root {root.shape}")

    nodes = _reachable(node, strict=True)
    pending = {node.out_id: seed}
    for n in nodes:
        g = pending.pop(n.out_id, None)
        if g is None:
            continue
        needs = tuple(p.requires_grad for p in n.parents)
        for p, pg, need in zip(n.parents, _BACKWARD[n.op](g, n.saved, needs), needs):
            if not need:
                continue
            if p.node is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64)
                else:
                    p.grad += pg
            else:
                prev = pending.get(p.id)
                pending[p.id] = pg if prev is None else prev + pg
    node.tape.backward_pass_count += 1
    if not retain_graph:
        _release(nodes)


def free_graph(root: Tensor) -> None:
    """Free ``root``'s node and everything only it keeps alive.  Idempotent."""
    node = root.node
    if node is None or not node.alive:
        return
    _release(_reachable(node, strict=False))


def pin(t: Tensor) -> Tensor:
    """Protect ``t``'s node from being freed as a side effect of another release."""
    if t.node is not None:
        t.node.pinned = True
    return t


def detach(t: Tensor) -> Tensor:
    """New gradient-requiring leaf sharing ``t``'s values, cut off from ``t``'s graph."""
    return Tensor(t.values, requires_grad=True)


def constant(t: Tensor) -> Tensor:
    """Leaf sharing ``t``'s values that takes no gradient."""
    return Tensor(t.values)


def grad_scale_add(leaf: Tensor, factor: float, saved: Optional[np.ndarray] = None) -> None:
    """``leaf.grad <- leaf.grad * factor + saved``; absent arrays count as zero."""
    if saved is not None:
        saved = np.asarray(saved, dtype=np.float64)
        if saved.shape != leaf.shape:
            raise ShapeError(f"saved grad shape {saved.shape} does not match leaf {leaf.shape}")
    if leaf.grad is None:
        if saved is not None:
            leaf.grad = saved.copy()
        return
    leaf.grad = leaf.grad * factor
    if saved is not None:
        leaf.grad += saved
