"""Sparsity-aware reverse-mode differentiation over batched residual rows.

The forward pass records a small DAG. Two kinds of edges exist:

* **gather** edges (``x[indices]``) replicate parameter rows so that every
  residual row owns a private copy of the inputs it reads. They carry no
  derivative values; their recorded indices decide *where* Jacobian blocks
  land.
* **arithmetic** edges are row-wise maps with a hand-written local
  derivative evaluated for all rows in one batched call. They decide *what*
  the block values are.

The backward pass walks the DAG once in reverse creation order, pushing
per-row adjoints of shape ``(N, m, width)`` together with a row map that says
which row of the current node each residual row depends on. At a leaf the
row map becomes the block-column index.

Pose-valued nodes are differentiated with respect to the left tangent
``[rho | omega]``; see :mod:`blocklm.lie`.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import lie
from .errors import CheiralityError, InvalidArgumentError, UnsupportedOperationError
from .sparse import BsrMatrix, from_blocks

POSE = "pose"
POINT = "point3"

_STORAGE = {POSE: 7, POINT: 3}
_TANGENT = {POSE: 6, POINT: 3}


@dataclass(frozen=True)
class ParamGroup:
    """A homogeneous block of optimisation variables.

    ``fixed`` lists entity indices held constant; they get no Jacobian
    columns and are never updated (used to anchor the gauge).
    """

    name: str
    kind: str
    count: int
    fixed: tuple = ()

    def __post_init__(self):
        if self.kind not in _STORAGE:
            raise InvalidArgumentError(f"unknown parameter kind {self.kind!r}")
        if self.count < 1:
            raise InvalidArgumentError("a parameter group needs at least one entity")
        fixed = tuple(sorted({int(i) for i in self.fixed}))
        if fixed and (fixed[0] < 0 or fixed[-1] >= self.count):
            raise InvalidArgumentError("fixed index out of range")
        object.__setattr__(self, "fixed", fixed)

    @property
    def tangent_dim(self):
        return _TANGENT[self.kind]

    @property
    def storage_width(self):
        return _STORAGE[self.kind]

    @property
    def num_free(self):
        return self.count - len(self.fixed)

    def column_map(self):
        """Entity index -> Jacobian block column, -1 for fixed entities."""
        cols = np.full(self.count, -1, dtype=np.int64)
        free = np.ones(self.count, bool)
        free[list(self.fixed)] = False
        cols[free] = np.arange(int(free.sum()))
        return cols


@dataclass(frozen=True)
class Leaf:
    group: ParamGroup


@dataclass(frozen=True)
class Gather:
    parent: "TracedValue"
    indices: np.ndarray


@dataclass(frozen=True)
class Arithmetic:
    op: str
    parents: tuple
    # Returns one local Jacobian per parent: a float (multiple of identity),
    # a shared 2-D matrix, or a per-row (B, out, in) stack.
    jacobians: Callable


class TracedValue:
    """A node of the trace: a batch of rows plus how it was produced."""

    __slots__ = ("graph", "node_id", "value", "kind", "provenance")
    __array_priority__ = 1000

    def __init__(self, graph, value, kind, provenance):
        self.graph = graph
        self.value = value
        self.kind = kind
        self.provenance = provenance
        self.node_id = graph._append(self)

    @property
    def batch(self):
        return self.value.shape[0]

    @property
    def width(self):
        return self.value.shape[1]

    @property
    def shape(self):
        return self.value.shape

    @property
    def tangent_width(self):
        return 6 if self.kind == POSE else self.width

    def __repr__(self):
        name = type(self.provenance).__name__.lower()
        if isinstance(self.provenance, Arithmetic):
            name = self.provenance.op
        return f"TracedValue(node={self.node_id}, shape={self.shape}, {name})"

    def __len__(self):
        return self.batch

    def __getitem__(self, key):
        if isinstance(key, tuple):
            if len(key) != 2 or not (isinstance(key[0], slice) and key[0] == slice(None)):
                raise UnsupportedOperationError("only x[indices] and x[:, columns] are traceable")
            cols = np.arange(self.width)[key[1]]
            return select(self, np.atleast_1d(cols))
        if isinstance(key, slice):
            return gather(self, np.arange(self.batch)[key])
        return gather(self, key)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, TracedValue):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, TracedValue):
            raise UnsupportedOperationError("division by a traced value is not registered")
        return scale(self, 1.0 / np.asarray(other, dtype=float))

    def _unsupported(self, *args, **kwargs):
        raise UnsupportedOperationError("operation has no registered derivative on traced values")

    __pow__ = __rpow__ = __matmul__ = __rmatmul__ = __rtruediv__ = _unsupported
    __setitem__ = _unsupported

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise UnsupportedOperationError(
            f"numpy {ufunc.__name__}.{method} is not a registered traced operation")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOperationError(f"numpy {func.__name__} is not a registered traced operation")

    def __array__(self, *args, **kwargs):
        raise UnsupportedOperationError("traced values cannot be converted to plain arrays; use .value")


class TraceGraph:
    """Append-only node list; creation order is a topological order."""

    def __init__(self):
        self.nodes: list = []
        self.last_backward_visits: list = []

    def _append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def track(self, group, values):
        values = np.array(values, dtype=np.float64)
        if values.ndim == 1 and values.size == group.count * group.storage_width:
            values = values.reshape(group.count, group.storage_width)
        if values.shape != (group.count, group.storage_width):
            raise InvalidArgumentError(
                f"group {group.name!r} expects shape {(group.count, group.storage_width)}, "
                f"got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError(f"group {group.name!r} has non-finite values")
        if group.kind == POSE:
            values[:, 3:] = lie.quat_normalize(values[:, 3:])
        return TracedValue(self, values, POSE if group.kind == POSE else "vector", Leaf(group))

    @property
    def groups(self):
        return [n.provenance.group for n in self.nodes if isinstance(n.provenance, Leaf)]


_active_graph: contextvars.ContextVar = contextvars.ContextVar("active_graph", default=None)


def track(group, values, graph=None):
    """Register ``values`` as a leaf of ``graph`` (or of the graph being evaluated)."""
    graph = graph or _active_graph.get() or TraceGraph()
    return graph.track(group, values)


def gather(src, indices):
    """Replicate rows: ``out[k] = src[indices[k]]``."""
    if not isinstance(src, TracedValue):
        raise UnsupportedOperationError("gather needs a traced source")
    idx = np.asarray(indices)
    if idx.ndim != 1 or not (np.issubdtype(idx.dtype, np.integer) or idx.size == 0):
        raise InvalidArgumentError("gather indices must be a 1-D integer sequence")
    idx = idx.astype(np.int64)
    bad = np.flatnonzero((idx < 0) | (idx >= src.batch))
    if bad.size:
        pos = int(bad[0])
        raise IndexError(f"gather index {int(idx[pos])} at position {pos} is outside [0, {src.batch})")
    return TracedValue(src.graph, src.value[idx], src.kind, Gather(src, idx))


# -- arithmetic ops -------------------------------------------------------------


def _traced_parents(*xs):
    parents = [x for x in xs if isinstance(x, TracedValue)]
    if not parents:
        raise UnsupportedOperationError("operation has no traced input")
    graph, batch = parents[0].graph, parents[0].batch
    for p in parents[1:]:
        if p.graph is not graph:
            raise UnsupportedOperationError("inputs come from different traces")
        if p.batch != batch:
            raise InvalidArgumentError(f"row-wise op needs equal batch sizes, got {batch} and {p.batch}")
    return graph, batch


def _val(x):
    return x.value if isinstance(x, TracedValue) else np.asarray(x, dtype=np.float64)


def _arith(op, inputs, value, kind, jacobians):
    """Record an arithmetic node; ``jacobians`` yields one entry per input."""
    graph, _ = _traced_parents(*inputs)
    mask = [isinstance(x, TracedValue) for x in inputs]

    def traced_jacobians():
        return tuple(j for j, m in zip(jacobians(), mask) if m)

    parents = tuple(x for x in inputs if isinstance(x, TracedValue))
    return TracedValue(graph, value, kind, Arithmetic(op, parents, traced_jacobians))


def _vector_only(*xs):
    for x in xs:
        if isinstance(x, TracedValue) and x.kind == POSE:
            raise UnsupportedOperationError("vector arithmetic is not defined on poses; use the Lie ops")


def _same_shape(value, *xs):
    # Constants may broadcast; traced operands must already have the output shape.
    for x in xs:
        if isinstance(x, TracedValue) and x.shape != value.shape:
            raise InvalidArgumentError(f"traced operand of shape {x.shape} would broadcast to {value.shape}")
    return value


def add(a, b):
    _vector_only(a, b)
    value = _same_shape(np.asarray(_val(a) + _val(b), dtype=np.float64), a, b)
    return _arith("add", (a, b), value, "vector", lambda: (1.0, 1.0))


def sub(a, b):
    _vector_only(a, b)
    value = _same_shape(np.asarray(_val(a) - _val(b), dtype=np.float64), a, b)
    return _arith("sub", (a, b), value, "vector", lambda: (1.0, -1.0))


def scale(a, s):
    _vector_only(a)
    if isinstance(s, TracedValue):
        raise UnsupportedOperationError("products of two traced values are not registered")
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0:
        return _arith("scale", (a,), a.value * s, "vector", lambda: (float(s),))
    s = s.reshape(a.batch, 1)
    eye = np.eye(a.width)
    return _arith("scale", (a,), a.value * s, "vector", lambda: (s[:, :, None] * eye,))


def mul(a, b):
    """Elementwise product of two traced vector batches of equal shape."""
    _vector_only(a, b)
    _traced_parents(a, b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"elementwise product needs equal shapes, got {a.shape} and {b.shape}")

    def jac():
        eye = np.eye(a.width)
        return b.value[:, :, None] * eye, a.value[:, :, None] * eye

    return _arith("mul", (a, b), a.value * b.value, "vector", jac)


def select(a, cols):
    _vector_only(a)
    cols = np.asarray(cols, dtype=np.int64)
    sel = np.eye(a.width)[cols]
    return _arith("select", (a,), a.value[:, cols], "vector", lambda: (sel,))


def matvec(mats, x):
    """Row-wise ``out[k] = mats[k] @ x[k]`` for a constant stack of matrices."""
    _vector_only(x)
    mats = np.asarray(mats, dtype=np.float64)
    if mats.ndim == 2:
        mats = np.broadcast_to(mats, (x.batch,) + mats.shape)
    value = np.einsum("kij,kj->ki", mats, x.value)
    return _arith("matvec", (x,), value, "vector", lambda: (mats,))


def se3_act(pose, point):
    """Row-wise ``R p + t``."""
    pv, xv = _val(pose), _val(point)
    _, batch = _traced_parents(pose, point)
    pv = np.broadcast_to(pv, (batch, 7))
    xv = np.broadcast_to(xv, (batch, 3))
    out = lie.act(pv, xv)

    def jac():
        d_pose = np.zeros((batch, 3, 6))
        d_pose[:, :, :3] = np.eye(3)
        d_pose[:, :, 3:] = -lie.skew(out)
        return d_pose, lie.rotation_matrix(pv)

    return _arith("se3_act", (pose, point), out, "vector", jac)


def se3_compose(a, b):
    av, bv = _val(a), _val(b)
    _, batch = _traced_parents(a, b)
    av = np.broadcast_to(av, (batch, 7))
    bv = np.broadcast_to(bv, (batch, 7))
    return _arith("se3_compose", (a, b), lie.compose(av, bv), POSE,
                  lambda: (1.0, lie.adjoint(av)))


def se3_inverse(a):
    out = lie.inverse(a.value)
    return _arith("se3_inverse", (a,), out, POSE, lambda: (-lie.adjoint(out),))


def se3_log(a):
    if a.kind != POSE:
        raise UnsupportedOperationError("se3_log needs a pose-valued input")
    out = lie.log(a.value)
    return _arith("se3_log", (a,), out, "vector", lambda: (lie.left_jacobian_inv(out),))


DEPTH_EPS = 1e-9


def pinhole(points_cam, fx, fy, cx, cy, depth_eps=DEPTH_EPS):
    """Pinhole projection of camera-frame points (+z forward)."""
    _vector_only(points_cam)
    p = points_cam.value
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    behind = np.flatnonzero(~(z > depth_eps))
    if behind.size:
        raise CheiralityError(behind)
    fx, fy, cx, cy = (np.asarray(v, dtype=np.float64) for v in (fx, fy, cx, cy))
    iz = 1.0 / z
    out = np.stack([fx * x * iz + cx, fy * y * iz + cy], axis=-1)

    def jac():
        j = np.zeros((p.shape[0], 2, 3))
        j[:, 0, 0] = fx * iz
        j[:, 0, 2] = -fx * x * iz * iz
        j[:, 1, 1] = fy * iz
        j[:, 1, 2] = -fy * y * iz * iz
        return (j,)

    return _arith("pinhole", (points_cam,), out, "vector", jac)


def bal_projection(points_cam, f, k1, k2, depth_eps=1e-12):
    """BAL camera model: ``q = -(x/z, y/z)``, ``pixel = f (1 + k1|q|^2 + k2|q|^4) q``."""
    _vector_only(points_cam)
    p = points_cam.value
    z = p[:, 2]
    near = np.flatnonzero(~(np.abs(z) > depth_eps))
    if near.size:
        raise CheiralityError(near)
    f, k1, k2 = (np.broadcast_to(np.asarray(v, dtype=np.float64), z.shape) for v in (f, k1, k2))
    iz = 1.0 / z
    q = -p[:, :2] * iz[:, None]
    r2 = np.sum(q * q, axis=1)
    d = 1.0 + k1 * r2 + k2 * r2 * r2
    out = (f * d)[:, None] * q

    def jac():
        dq = np.zeros((p.shape[0], 2, 3))
        dq[:, 0, 0] = -iz
        dq[:, 1, 1] = -iz
        dq[:, :, 2] = -q * iz[:, None]
        dd = 2.0 * (k1 + 2.0 * k2 * r2)
        dpix = d[:, None, None] * np.eye(2) + dd[:, None, None] * q[:, :, None] * q[:, None, :]
        return ((f[:, None, None] * dpix) @ dq,)

    return _arith("bal_projection", (points_cam,), out, "vector", jac)


# -- evaluation and the backward pass ------------------------------------------------


class Evaluation(NamedTuple):
    residuals: np.ndarray
    graph: TraceGraph
    output: TracedValue


def evaluate(model, params, *args, **kwargs):
    """Run ``model(leaves, *args)`` on freshly tracked leaves.

    ``params`` maps each :class:`ParamGroup` to its values; the model gets a
    dict of group name -> leaf and must return a traced residual batch.
    """
    graph = TraceGraph()
    token = _active_graph.set(graph)
    try:
        leaves = {g.name: graph.track(g, v) for g, v in params.items()}
        out = model(leaves, *args, **kwargs)
    finally:
        _active_graph.reset(token)
    if not isinstance(out, TracedValue) or out.graph is not graph:
        raise UnsupportedOperationError("model output is not traced from the supplied parameters")
    if out.kind == POSE:
        raise UnsupportedOperationError("model must return vector residuals, not poses")
    return Evaluation(out.value, graph, out)


def _apply(vals, jac, rows):
    if isinstance(jac, float):
        return vals if jac == 1.0 else vals * jac
    if jac.ndim == 2:
        return vals @ jac
    return np.matmul(vals, jac if rows is None else jac[rows])


def _merge(contribs):
    merged = []
    for rows, vals in contribs:
        for i, (r, v) in enumerate(merged):
            if r is rows:
                merged[i] = (r, v + vals)
                break
        else:
            merged.append((rows, vals))
    return merged


def backward(output):
    """Per-leaf lists of (row map, adjoint) pairs for ``d output / d leaf``."""
    graph = output.graph
    n, m = output.batch, output.tangent_width
    pending = {output.node_id: [(None, np.broadcast_to(np.eye(m), (n, m, m)))]}
    leaves = {}
    visits = []
    for node in reversed(graph.nodes[: output.node_id + 1]):
        contribs = pending.pop(node.node_id, None)
        if contribs is None:
            continue
        visits.append(node.node_id)
        contribs = _merge(contribs)
        prov = node.provenance
        if isinstance(prov, Leaf):
            leaves[prov.group.name] = (prov.group, contribs)
        elif isinstance(prov, Gather):
            for rows, vals in contribs:
                new_rows = prov.indices if rows is None else prov.indices[rows]
                pending.setdefault(prov.parent.node_id, []).append((new_rows, vals))
        else:
            for parent, jac in zip(prov.parents, prov.jacobians()):
                for rows, vals in contribs:
                    pending.setdefault(parent.node_id, []).append((rows, _apply(vals, jac, rows)))
    graph.last_backward_visits = visits
    return leaves


def _place_blocks(group, contribs, n):
    """Lay out the blocks of one group as BSR without a global sort."""
    colmap = group.column_map()
    cols = np.stack([colmap[np.arange(n) if r is None else r] for r, _ in contribs])
    vals = np.stack([np.asarray(v) for _, v in contribs])
    if len(contribs) > 1:
        order = np.argsort(cols, axis=0, kind="stable")
        cols = np.take_along_axis(cols, order, axis=0)
        vals = np.take_along_axis(vals, order[:, :, None, None], axis=0)
        dup = (cols[1:] == cols[:-1]) & (cols[1:] >= 0)
        if np.any(dup):
            keep = cols >= 0
            k = np.broadcast_to(np.arange(n), cols.shape)[keep]
            return from_blocks(k, cols[keep], vals[keep], n, group.num_free)
    cols, vals = cols.T, vals.swapaxes(0, 1)
    keep = cols >= 0
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(keep.sum(axis=1), out=row_ptr[1:])
    return BsrMatrix(vals.shape[2:], n, group.num_free, row_ptr, cols[keep], vals[keep])


@dataclass
class JacobianPair:
    """Block Jacobians ``J = [j_pose | j_point]``, one BSR per parameter group."""

    j_pose: BsrMatrix | None
    j_point: BsrMatrix | None
    by_group: dict = field(default_factory=dict)


def sparse_jacobian(graph, residuals):
    if residuals.graph is not graph:
        raise InvalidArgumentError("residuals were not traced in this graph")
    n = residuals.batch
    leaves = backward(residuals)
    by_group = {}
    for group in graph.groups:
        if group.name in by_group:
            raise InvalidArgumentError(f"group {group.name!r} tracked twice in one graph")
        if group.name in leaves:
            by_group[group.name] = _place_blocks(group, leaves[group.name][1], n)
        else:
            by_group[group.name] = None
    first = {}
    for group in graph.groups:
        first.setdefault(group.kind, by_group[group.name])
    return JacobianPair(first.get(POSE), first.get(POINT), by_group)
