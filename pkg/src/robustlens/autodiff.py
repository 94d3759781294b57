"""Static computation graphs over dense float64 arrays.

A :class:`Graph` is built once from a small set of primitives and then
evaluated many times with different input bindings.  Reverse mode
(:func:`backward`, :func:`vjp`) and forward mode (:func:`jvp`) are both exact
for the primitive set; :func:`finite_diff_check` compares them against
central differences.

Tensors are plain ``numpy.ndarray`` objects (C order, float64).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Graph", "Node", "GraphError", "ShapeError", "UnboundInputError",
    "NonFiniteError", "evaluate", "backward", "vjp", "value_and_vjp", "value_and_grad",
    "jvp", "finite_diff_check", "FDReport",
]


class GraphError(Exception):
    pass


class ShapeError(GraphError):
    pass


class UnboundInputError(GraphError):
    pass


class NonFiniteError(GraphError, ArithmeticError):
    pass


Shape = tuple


def _unbroadcast(g: np.ndarray, shape: Shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Shape, b: Shape, opname: str) -> Shape:
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"{opname}: incompatible shapes {a} and {b}") from exc
    # the right operand may broadcast into the left one, never the reverse
    if tuple(out) != tuple(a):
        raise ShapeError(f"{opname}: right operand {b} must broadcast into {a}")
    return tuple(out)


# --------------------------------------------------------------------------
# primitives
#
# Each op provides shape(*in_shapes), forward(*xs), vjp(g, xs, y, needs) and
# jvp(dxs, xs, y).  In jvp, a tangent of None means "identically zero".


class Op:
    name = "op"
    n_in = 1

    def shape(self, *shapes):
        raise NotImplementedError

    def forward(self, *xs):
        raise NotImplementedError

    def vjp(self, g, xs, y, needs):
        raise NotImplementedError

    def jvp(self, dxs, xs, y):
        raise NotImplementedError


class _Add(Op):
    name, n_in = "add", 2

    def shape(self, a, b):
        return _broadcast_shape(a, b, self.name)

    def forward(self, a, b):
        return a + b

    def vjp(self, g, xs, y, needs):
        return (g if needs[0] else None,
                _unbroadcast(g, xs[1].shape) if needs[1] else None)

    def jvp(self, dxs, xs, y):
        da, db = dxs
        if da is None:
            return None if db is None else np.broadcast_to(db, y.shape).copy()
        return da if db is None else da + db


class _Sub(_Add):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def vjp(self, g, xs, y, needs):
        return (g if needs[0] else None,
                -_unbroadcast(g, xs[1].shape) if needs[1] else None)

    def jvp(self, dxs, xs, y):
        da, db = dxs
        if db is None:
            return da
        if da is None:
            return -np.broadcast_to(db, y.shape)
        return da - db


class _Mul(_Add):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def vjp(self, g, xs, y, needs):
        a, b = xs
        return (g * b if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)

    def jvp(self, dxs, xs, y):
        (da, db), (a, b) = dxs, xs
        out = None
        if da is not None:
            out = da * b
        if db is not None:
            t = a * db
            out = t if out is None else out + t
        return out


class _Scale(Op):
    name = "scale"

    def __init__(self, c: float):
        self.c = float(c)

    def shape(self, a):
        return a

    def forward(self, a):
        return self.c * a

    def vjp(self, g, xs, y, needs):
        return (self.c * g,)

    def jvp(self, dxs, xs, y):
        return None if dxs[0] is None else self.c * dxs[0]


class _MatMul(Op):
    """Matrix product for operands of rank <= 2, optionally with b transposed."""

    name, n_in = "matmul", 2

    def __init__(self, transpose_b: bool = False):
        self.tb = transpose_b

    def shape(self, a, b):
        if not (1 <= len(a) <= 2 and 1 <= len(b) <= 2):
            raise ShapeError(f"matmul: operands must be rank 1 or 2, got {a} and {b}")
        if self.tb:
            if len(b) != 2:
                raise ShapeError("matmul: transposed operand must be rank 2")
            b = (b[1], b[0])
        if a[-1] != b[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a} @ {b}")
        return tuple(a[:-1]) + tuple(b[1:])

    def _b(self, b):
        return b.T if self.tb else b

    def forward(self, a, b):
        return a @ self._b(b)

    def vjp(self, g, xs, y, needs):
        a, b = xs
        bb = self._b(b)
        a2 = a if a.ndim == 2 else a[None, :]
        b2 = bb if bb.ndim == 2 else bb[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = gb = None
        if needs[0]:
            ga = (g2 @ b2.T).reshape(a.shape)
        if needs[1]:
            gb = (a2.T @ g2).reshape(bb.shape)
            if self.tb:
                gb = gb.T
        return ga, gb

    def jvp(self, dxs, xs, y):
        (da, db), (a, b) = dxs, xs
        out = None
        if da is not None:
            out = da @ self._b(b)
        if db is not None:
            t = a @ self._b(db)
            out = t if out is None else out + t
        return out


def _conv_geometry(h, k, stride, padding):
    if padding == "valid":
        out = (h - k) // stride + 1
        return out, 0, 0
    out = -(-h // stride)
    total = max((out - 1) * stride + k - h, 0)
    return out, total // 2, total - total // 2


class _Conv2d(Op):
    """2-D cross-correlation, NCHW input and OIHW kernel."""

    name, n_in = "conv2d", 2

    def __init__(self, stride: int = 1, padding: str = "valid"):
        if stride not in (1, 2):
            raise ValueError("conv2d: stride must be 1 or 2")
        if padding not in ("valid", "same"):
            raise ValueError("conv2d: padding must be 'valid' or 'same'")
        self.stride, self.padding = stride, padding

    def shape(self, x, w):
        if len(x) != 4 or len(w) != 4:
            raise ShapeError(f"conv2d: expected NCHW input and OIHW kernel, got {x}, {w}")
        if x[1] != w[1]:
            raise ShapeError(f"conv2d: channel mismatch {x[1]} vs {w[1]}")
        if w[2] > 5 or w[3] > 5:
            raise ShapeError("conv2d: kernel larger than 5")
        oh, *_ = _conv_geometry(x[2], w[2], self.stride, self.padding)
        ow, *_ = _conv_geometry(x[3], w[3], self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d: kernel {w[2:]} larger than input {x[2:]}")
        return (x[0], w[0], oh, ow)

    def _pad(self, x, kh, kw):
        oh, t, b = _conv_geometry(x.shape[2], kh, self.stride, self.padding)
        ow, l, r = _conv_geometry(x.shape[3], kw, self.stride, self.padding)
        if t or b or l or r:
            x = np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))
        return x, oh, ow, (t, l)

    def _cols(self, xp, kh, kw, oh, ow):
        s = self.stride
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        return win[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]  # N C OH OW KH KW

    def forward(self, x, w):
        kh, kw = w.shape[2:]
        xp, oh, ow, _ = self._pad(x, kh, kw)
        cols = self._cols(xp, kh, kw, oh, ow)
        return np.einsum("ncijkl,ockl->noij", cols, w, optimize=True)

    def vjp(self, g, xs, y, needs):
        x, w = xs
        kh, kw = w.shape[2:]
        s = self.stride
        xp, oh, ow, (t, l) = self._pad(x, kh, kw)
        gx = gw = None
        if needs[1]:
            cols = self._cols(xp, kh, kw, oh, ow)
            gw = np.einsum("ncijkl,noij->ockl", cols, g, optimize=True)
        if needs[0]:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s] += \
                        np.einsum("noij,oc->ncij", g, w[:, :, i, j], optimize=True)
            gx = gxp[:, :, t : t + x.shape[2], l : l + x.shape[3]]
        return gx, gw

    def jvp(self, dxs, xs, y):
        (dx, dw), (x, w) = dxs, xs
        out = None
        if dx is not None:
            out = self.forward(dx, w)
        if dw is not None:
            t = self.forward(x, dw)
            out = t if out is None else out + t
        return out


class _Relu(Op):
    name = "relu"

    def shape(self, a):
        return a

    def forward(self, a):
        return np.maximum(a, 0.0)

    def vjp(self, g, xs, y, needs):
        # subgradient at exactly zero is 0
        return (g * (xs[0] > 0),)

    def jvp(self, dxs, xs, y):
        return None if dxs[0] is None else dxs[0] * (xs[0] > 0)


class _Exp(Op):
    name = "exp"

    def shape(self, a):
        return a

    def forward(self, a):
        return np.exp(a)

    def vjp(self, g, xs, y, needs):
        return (g * y,)

    def jvp(self, dxs, xs, y):
        return None if dxs[0] is None else dxs[0] * y


class _LogSoftmax(Op):
    name = "log_softmax"

    def shape(self, a):
        if len(a) < 1:
            raise ShapeError("log_softmax: needs at least one axis")
        return a

    def forward(self, a):
        m = a.max(axis=-1, keepdims=True)
        s = a - m
        return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))

    def vjp(self, g, xs, y, needs):
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    def jvp(self, dxs, xs, y):
        da = dxs[0]
        if da is None:
            return None
        p = np.exp(y)
        return da - (p * da).sum(axis=-1, keepdims=True)


class _Sum(Op):
    name = "sum"

    def __init__(self, axis=None):
        self.axis = axis

    def shape(self, a):
        if self.axis is None:
            return ()
        ax = self.axis % len(a) if a else 0
        if not a or self.axis >= len(a) or self.axis < -len(a):
            raise ShapeError(f"sum: axis {self.axis} out of range for {a}")
        return tuple(d for i, d in enumerate(a) if i != ax)

    def forward(self, a):
        return np.asarray(a.sum(axis=self.axis))

    def vjp(self, g, xs, y, needs):
        a = xs[0]
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    def jvp(self, dxs, xs, y):
        return None if dxs[0] is None else np.asarray(dxs[0].sum(axis=self.axis))


class _L2Norm(Op):
    """Euclidean norm over all entries (axis=None) or over the last axis."""

    name = "l2_norm"

    def __init__(self, axis=None):
        if axis not in (None, -1):
            raise ValueError("l2_norm: axis must be None or -1")
        self.axis = axis

    def shape(self, a):
        if self.axis is None:
            return ()
        if not a:
            raise ShapeError("l2_norm: axis=-1 needs rank >= 1")
        return tuple(a[:-1])

    def forward(self, a):
        if self.axis is None:
            return np.asarray(np.sqrt(np.sum(a * a)))
        return np.sqrt(np.sum(a * a, axis=-1))

    def _unit(self, a, y):
        yy = y if self.axis is None else y[..., None]
        safe = np.where(yy > 0, yy, 1.0)
        return np.where(yy > 0, a / safe, 0.0)

    def vjp(self, g, xs, y, needs):
        gg = g if self.axis is None else g[..., None]
        return (gg * self._unit(xs[0], y),)

    def jvp(self, dxs, xs, y):
        da = dxs[0]
        if da is None:
            return None
        u = self._unit(xs[0], y)
        if self.axis is None:
            return np.asarray(np.sum(u * da))
        return np.sum(u * da, axis=-1)


class _Reshape(Op):
    """Reshape keeping the leading (batch) axis: target excludes axis 0."""

    name = "reshape"

    def __init__(self, tail: Sequence[int]):
        self.tail = tuple(tail)

    def shape(self, a):
        if not a:
            raise ShapeError("reshape: needs a batch axis")
        size = int(np.prod(a[1:]))
        tail = list(self.tail)
        if tail.count(-1) == 1:
            known = int(np.prod([t for t in tail if t != -1]))
            if known == 0 or size % known:
                raise ShapeError(f"reshape: cannot reshape {a} to (*, {self.tail})")
            tail[tail.index(-1)] = size // known
        if int(np.prod(tail)) != size:
            raise ShapeError(f"reshape: cannot reshape {a} to (*, {self.tail})")
        return (a[0],) + tuple(tail)

    def forward(self, a):
        return a.reshape((a.shape[0],) + self.tail)

    def vjp(self, g, xs, y, needs):
        return (g.reshape(xs[0].shape),)

    def jvp(self, dxs, xs, y):
        return None if dxs[0] is None else dxs[0].reshape(y.shape)


class _Input(Op):
    name, n_in = "input", 0

    def __init__(self, name: str, shape):
        self.input_name = name
        self.declared = tuple(shape) if shape is not None else None


class _Const(Op):
    name, n_in = "const", 0

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.value.flags.writeable = False


# --------------------------------------------------------------------------
# graph


@dataclass(eq=False, frozen=True)
class Node:
    """Handle to one node of a :class:`Graph`; supports ``+ - * @``."""

    graph: "Graph"
    index: int

    def _wrap(self, other):
        return other if isinstance(other, Node) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._wrap(other))

    def __sub__(self, other):
        return self.graph.sub(self, self._wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, other)
        return self.graph.mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._wrap(other))

    @property
    def op(self) -> Op:
        return self.graph.ops[self.index]


@dataclass(eq=False)
class Graph:
    """Append-only DAG of primitive ops.

    Nodes only reference earlier nodes, so insertion order is a valid
    topological order and cycles cannot be expressed.
    """

    ops: list = field(default_factory=list)
    args: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def _push(self, op: Op, *parents: Node) -> Node:
        for p in parents:
            if not isinstance(p, Node) or p.graph is not self:
                raise GraphError(f"{op.name}: operand is not a node of this graph")
        self.ops.append(op)
        self.args.append(tuple(p.index for p in parents))
        return Node(self, len(self.ops) - 1)

    # leaves
    def input(self, name: str, shape=None) -> Node:
        """Free input; ``None`` entries of ``shape`` match any size."""
        if name in self.inputs:
            raise GraphError(f"duplicate input {name!r}")
        node = self._push(_Input(name, shape))
        self.inputs[name] = node.index
        return node

    def const(self, value) -> Node:
        return self._push(_Const(value))

    def output(self, name: str, node: Node) -> Node:
        if node.graph is not self:
            raise GraphError("output node belongs to another graph")
        self.outputs[name] = node.index
        return node

    # primitives
    def add(self, a, b):
        return self._push(_Add(), a, b)

    def sub(self, a, b):
        return self._push(_Sub(), a, b)

    def mul(self, a, b):
        return self._push(_Mul(), a, b)

    def scale(self, a, c: float):
        return self._push(_Scale(c), a)

    def matmul(self, a, b, transpose_b: bool = False):
        return self._push(_MatMul(transpose_b), a, b)

    def conv2d(self, x, w, stride: int = 1, padding: str = "valid"):
        return self._push(_Conv2d(stride, padding), x, w)

    def relu(self, a):
        return self._push(_Relu(), a)

    def exp(self, a):
        return self._push(_Exp(), a)

    def log_softmax(self, a):
        return self._push(_LogSoftmax(), a)

    def sum(self, a, axis=None):
        return self._push(_Sum(axis), a)

    def l2_norm(self, a, axis=None):
        return self._push(_L2Norm(axis), a)

    def reshape(self, a, tail):
        return self._push(_Reshape(tail), a)

    def flatten(self, a):
        return self._push(_Reshape((-1,)), a)

    # helpers
    def output_index(self, name: str) -> int:
        try:
            return self.outputs[name]
        except KeyError:
            raise GraphError(f"unknown output {name!r}") from None

    def ancestors(self, roots: Iterable[int]) -> set:
        seen, stack = set(), list(roots)
        while stack:
            i = stack.pop()
            if i not in seen:
                seen.add(i)
                stack.extend(self.args[i])
        return seen


# --------------------------------------------------------------------------
# evaluation


def _infer_shapes(graph: Graph, bindings: Mapping[str, np.ndarray], live) -> dict:
    shapes = {}
    for i in sorted(live):
        op = graph.ops[i]
        if isinstance(op, _Input):
            if op.input_name not in bindings:
                raise UnboundInputError(f"input {op.input_name!r} is not bound")
            shp = np.shape(bindings[op.input_name])
            if op.declared is not None:
                if len(shp) != len(op.declared) or any(
                    d is not None and d != s for d, s in zip(op.declared, shp)
                ):
                    raise ShapeError(
                        f"input {op.input_name!r}: expected shape {op.declared}, got {shp}")
            shapes[i] = tuple(shp)
        elif isinstance(op, _Const):
            shapes[i] = op.value.shape
        else:
            shapes[i] = tuple(op.shape(*(shapes[j] for j in graph.args[i])))
    return shapes


def _forward(graph: Graph, bindings, roots) -> dict:
    live = graph.ancestors(roots)
    _infer_shapes(graph, bindings, live)
    vals = {}
    for i in sorted(live):
        op = graph.ops[i]
        if isinstance(op, _Input):
            v = np.asarray(bindings[op.input_name], dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"input {op.input_name!r} contains non-finite values")
        elif isinstance(op, _Const):
            v = op.value
        else:
            with np.errstate(all="ignore"):
                v = op.forward(*(vals[j] for j in graph.args[i]))
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"non-finite value produced by {op.name} (node {i})")
        vals[i] = v
    return vals


def evaluate(graph: Graph, bindings: Mapping[str, np.ndarray],
             outputs: Sequence[str] | None = None) -> dict:
    """Evaluate the marked outputs (all of them by default)."""
    names = list(graph.outputs) if outputs is None else list(outputs)
    roots = [graph.output_index(n) for n in names]
    vals = _forward(graph, bindings, roots)
    return {n: vals[graph.outputs[n]].copy() for n in names}


def _reverse(graph: Graph, vals: dict, root: int, cotangent, wrt_idx) -> dict:
    # nodes downstream of any requested input
    depends = set()
    for i in sorted(vals):
        if i in wrt_idx or any(j in depends for j in graph.args[i]):
            depends.add(i)
    grads = {root: np.asarray(cotangent, dtype=np.float64)}
    for i in sorted(vals, reverse=True):
        g = grads.pop(i, None) if i not in wrt_idx else grads.get(i)
        if g is None or not graph.args[i]:
            continue
        needs = tuple(j in depends for j in graph.args[i])
        if not any(needs):
            continue
        xs = tuple(vals[j] for j in graph.args[i])
        parts = graph.ops[i].vjp(g, xs, vals[i], needs)
        for j, gj, need in zip(graph.args[i], parts, needs):
            if need and gj is not None:
                grads[j] = gj if j not in grads else grads[j] + gj
    return grads


def _wrt_indices(graph: Graph, wrt):
    names = list(graph.inputs) if wrt is None else list(wrt)
    for n in names:
        if n not in graph.inputs:
            raise GraphError(f"unknown input {n!r}")
    return names, {graph.inputs[n] for n in names}


def value_and_vjp(graph: Graph, bindings, output: str, cotangent, wrt=None):
    """Output value together with the vector-Jacobian product.

    Inputs the output does not depend on receive zero gradients.
    """
    root = graph.output_index(output)
    vals = _forward(graph, bindings, [root])
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != vals[root].shape:
        raise ShapeError(f"cotangent shape {cot.shape} != output shape {vals[root].shape}")
    names, idx = _wrt_indices(graph, wrt)
    grads = _reverse(graph, vals, root, cot, idx)
    out = {}
    for n in names:
        g = grads.get(graph.inputs[n])
        out[n] = np.zeros(np.shape(bindings[n])) if g is None else np.array(g, dtype=np.float64)
    return vals[root].copy(), out


def vjp(graph: Graph, bindings, output: str, cotangent, wrt=None) -> dict:
    """Vector-Jacobian product of ``output`` with ``cotangent``."""
    return value_and_vjp(graph, bindings, output, cotangent, wrt)[1]


def value_and_grad(graph: Graph, bindings, output: str, wrt=None):
    """Scalar output value together with its gradients."""
    root = graph.output_index(output)
    vals = _forward(graph, bindings, [root])
    if vals[root].shape != ():
        raise ShapeError(f"output {output!r} is not scalar: shape {vals[root].shape}")
    names, idx = _wrt_indices(graph, wrt)
    grads = _reverse(graph, vals, root, np.ones(()), idx)
    out = {}
    for n in names:
        g = grads.get(graph.inputs[n])
        out[n] = np.zeros(np.shape(bindings[n])) if g is None else np.array(g)
    return float(vals[root]), out


def backward(graph: Graph, bindings, output: str, wrt=None) -> dict:
    """Gradients of the scalar ``output`` with respect to inputs."""
    return value_and_grad(graph, bindings, output, wrt)[1]


def jvp(graph: Graph, bindings, direction: Mapping[str, np.ndarray],
        outputs: Sequence[str] | None = None) -> dict:
    """Forward-mode directional derivative of the marked outputs.

    Inputs missing from ``direction`` have zero tangent.
    """
    names = list(graph.outputs) if outputs is None else list(outputs)
    roots = [graph.output_index(n) for n in names]
    vals = _forward(graph, bindings, roots)
    tang = {}
    for n, d in direction.items():
        if n not in graph.inputs:
            raise GraphError(f"unknown input {n!r}")
        d = np.asarray(d, dtype=np.float64)
        if d.shape != np.shape(bindings[n]):
            raise ShapeError(f"direction for {n!r} has shape {d.shape}, "
                             f"input has {np.shape(bindings[n])}")
        tang[graph.inputs[n]] = d
    for i in sorted(vals):
        if not graph.args[i]:
            continue
        dxs = tuple(tang.get(j) for j in graph.args[i])
        if all(d is None for d in dxs):
            continue
        xs = tuple(vals[j] for j in graph.args[i])
        t = graph.ops[i].jvp(dxs, xs, vals[i])
        if t is not None:
            tang[i] = np.asarray(t, dtype=np.float64)
    out = {}
    for n, r in zip(names, roots):
        t = tang.get(r)
        out[n] = np.zeros(vals[r].shape) if t is None else np.array(t)
    return out


# --------------------------------------------------------------------------
# finite differences


@dataclass
class FDReport:
    max_rel_error: float
    passed: bool
    checked: int
    excluded: list  # (input name, flat index) pairs sitting on a relu kink
    failures: list  # (input name, flat index, analytic, numeric, rel error)


def _relu_inputs(graph: Graph, vals: dict) -> list:
    return [vals[graph.args[i][0]] for i, op in enumerate(graph.ops)
            if isinstance(op, _Relu) and i in vals]


def _crosses_kink(before: list, after: list) -> bool:
    for r0, r1 in zip(before, after):
        if not np.array_equal(r0 > 0, r1 > 0):
            return True
        if np.any((r0 == 0) & (r1 != r0)):
            return True
    return False


def finite_diff_check(graph: Graph, bindings, h: float = 1e-4, tol: float = 1e-5,
                      output: str | None = None, wrt=None, max_coords: int = 64,
                      seed: int = 0, rel_floor: float = 1e-3) -> FDReport:
    """Compare backward and jvp with central differences.

    Coordinates whose +-h probes move any relu input across (or off) its
    kink are excluded and reported, not failed.  Inputs larger than
    ``max_coords`` are checked on a seeded subsample.  Relative error is
    ``|a - n| / max(|a|, |n|, rel_floor * max|grad|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if output is None:
        if len(graph.outputs) != 1:
            raise GraphError("graph has several outputs; name the one to check")
        output = next(iter(graph.outputs))
    root = graph.output_index(output)
    base = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}
    _, grads = value_and_grad(graph, base, output, wrt)
    base_relu = _relu_inputs(graph, _forward(graph, base, [root]))
    scale = max([float(np.abs(g).max()) for g in grads.values() if g.size] or [0.0])
    floor = max(rel_floor * scale, 1e-300)
    rng = np.random.default_rng(seed)

    worst, checked, excluded, failures = 0.0, 0, [], []
    for name, g in grads.items():
        x0 = base[name]
        coords = np.arange(x0.size) if x0.size <= max_coords else np.sort(
            rng.choice(x0.size, size=max_coords, replace=False))
        for c in coords:
            probes, kink = [], False
            for sgn in (1.0, -1.0):
                xb = x0.copy().ravel()
                xb[c] += sgn * h
                b = dict(base)
                b[name] = xb.reshape(x0.shape)
                vals = _forward(graph, b, [root])
                probes.append(float(vals[root]))
                kink = kink or _crosses_kink(base_relu, _relu_inputs(graph, vals))
            if kink:
                excluded.append((name, int(c)))
                continue
            num = (probes[0] - probes[1]) / (2 * h)
            d = np.zeros(x0.size)
            d[c] = 1.0
            fwd = float(jvp(graph, base, {name: d.reshape(x0.shape)}, [output])[output])
            ana = float(g.ravel()[c])
            for a in (ana, fwd):
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
                if err > tol:
                    failures.append((name, int(c), a, num, err))
            checked += 1
    return FDReport(worst, not failures, checked, excluded, failures)
