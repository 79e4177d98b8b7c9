"""Tape-based reverse-mode automatic differentiation over small real arrays.

Every differentiable quantity is a :class:`Node` recorded on a :class:`Tape`.
Nodes are appended in creation order, so the tape is topologically sorted
by construction and ``backward`` only needs a single reverse sweep.

Interior nodes can be registered as *probes*. After a backward pass the
gradient of the score with respect to a probed node is available through
:meth:`Tape.probe_grad`, which is what the saliency methods are built on.
A probe label can also carry an additive perturbation, injected into the
node value at registration time; finite-difference checks use this to
differentiate with respect to interior quantities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "ProbeHandle",
    "ShapeError",
    "ProbeError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "sigmoid",
    "tanh",
    "relu",
    "concat",
    "slice_",
    "row",
    "softmax_rows",
    "reduce_max_rows",
    "reduce_mean_rows",
    "sum_all",
    "cross_entropy",
    "index",
    "stack_rows",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ProbeError(KeyError):
    """A probe label is duplicated or unknown."""


@dataclass(frozen=True)
class ProbeHandle:
    label: str
    node_id: int


class Node:
    """A real array on a tape, with an optional gradient slot."""

    __slots__ = ("tape", "id", "data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, tape, data, op, parents=(), backward=None, requires_grad=False):
        self.tape = tape
        self.data = data
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(data) if requires_grad else None
        self.id = tape._append(self)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of nodes plus the probe registry.

    Parameters
    ----------
    perturb : dict, optional
        Maps probe labels to additive offsets applied to the probed node's
        value when it is registered. Used only by finite-difference oracles.
    """

    def __init__(self, perturb: Optional[dict] = None):
        self.nodes: list[Node] = []
        self.probes: dict[str, int] = {}
        self.perturb = perturb or {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, data, shape=None, requires_grad=False) -> Node:
        arr = np.asarray(data, dtype=DTYPE)
        if shape is not None:
            shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(s) for s in shape)
            if any(s < 1 for s in shape):
                raise ShapeError(f"non-positive dimension in {shape}")
            if arr.size != int(np.prod(shape)):
                raise ShapeError(f"{arr.size} values do not fill shape {shape}")
            arr = arr.reshape(shape)
        if arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} arrays are not supported")
        return Node(self, arr, "leaf", requires_grad=requires_grad)

    def register_probe(self, node: Node, label: str) -> ProbeHandle:
        if label in self.probes:
            raise ProbeError(f"duplicate probe label {label!r}")
        if node.tape is not self:
            raise ProbeError("node belongs to another tape")
        if label in self.perturb:
            node.data = node.data + np.asarray(self.perturb[label], dtype=DTYPE).reshape(node.shape)
        if node.grad is None:
            node.requires_grad = True
            node.grad = np.zeros_like(node.data)
        self.probes[label] = node.id
        return ProbeHandle(label, node.id)

    def probe(self, label: str) -> Node:
        try:
            return self.nodes[self.probes[label]]
        except KeyError:
            raise ProbeError(f"no probe labelled {label!r}") from None

    def probe_grad(self, handle) -> np.ndarray:
        label = handle.label if isinstance(handle, ProbeHandle) else handle
        return self.probe(label).grad

    def zero_grads(self):
        for node in self.nodes:
            if node.grad is not None:
                node.grad[...] = 0.0

    def backward(self, score: Node):
        """Accumulate d(score)/d(node) into every grad-bearing node."""
        if score.tape is not self:
            raise ValueError("score belongs to another tape")
        if score.data.size != 1 or score.data.ndim > 1:
            raise ShapeError(f"backward needs a scalar score, got shape {score.shape}")
        adjoint: list = [None] * (score.id + 1)
        adjoint[score.id] = np.ones_like(score.data)
        for nid in range(score.id, -1, -1):
            g = adjoint[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.grad is not None:
                node.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if adjoint[parent.id] is None:
                    adjoint[parent.id] = pg
                else:
                    adjoint[parent.id] = adjoint[parent.id] + pg

    def check_topological(self):
        for node in self.nodes:
            for p in node.parents:
                if p.id >= node.id:
                    raise AssertionError(f"parent {p.id} does not precede {node.id}")


def _lift(tape, x):
    if isinstance(x, Node):
        return x
    return tape.leaf(x)


def _make(tape, data, op, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Node(tape, data, op, parents, backward if needs else None, requires_grad=needs)


def _pair(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    return _lift(tape, a), _lift(tape, b)


def _bias_compatible(a, b):
    # the only broadcast allowed: matrix (m, n) plus row vector (n,)
    if a.shape == b.shape:
        return None
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return "row_bias"
    raise ShapeError(f"shapes {a.shape} and {b.shape} are incompatible")


def add(a, b) -> Node:
    a, b = _pair(a, b)
    mode = _bias_compatible(a, b)

    def back(g):
        return g, (g.sum(axis=0) if mode else g)

    return _make(a.tape, a.data + b.data, "add", (a, b), back)


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    mode = _bias_compatible(a, b)

    def back(g):
        return g, -(g.sum(axis=0) if mode else g)

    return _make(a.tape, a.data - b.data, "sub", (a, b), back)


def mul(a, b) -> Node:
    """Hadamard product of equally shaped nodes."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard product of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g * bd, g * ad

    return _make(a.tape, ad * bd, "mul", (a, b), back)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.tape, a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Node:
    """Matrix product; a 1-D left operand is treated as a row vector."""
    a, b = _pair(a, b)
    if b.data.ndim != 2 or a.data.ndim not in (1, 2):
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _make(a.tape, ad @ bd, "matmul", (a, b), back)


def transpose(a: Node) -> Node:
    if a.data.ndim != 2:
        raise ShapeError("transpose needs a matrix")
    return _make(a.tape, a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def sigmoid(a: Node) -> Node:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(a.tape, out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Node) -> Node:
    out = np.tanh(a.data)
    return _make(a.tape, out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Node) -> Node:
    mask = a.data > 0
    return _make(a.tape, np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat of nothing")
    tape = nodes[0].tape
    try:
        out = np.concatenate([n.data for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([n.data.shape[axis] for n in nodes])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(tape, out, "concat", nodes, back)


def slice_(a: Node, start: int, stop: int) -> Node:
    """Slice along the last axis."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.tape, a.data[..., start:stop].copy(), "slice", (a,), back)


def row(a: Node, i: int) -> Node:
    """Row ``i`` of a matrix as a vector."""
    if a.data.ndim != 2 or not 0 <= i < a.shape[0]:
        raise ShapeError(f"row {i} of {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _make(a.tape, a.data[i].copy(), "row", (a,), back)


def index(a: Node, i: int) -> Node:
    """Scalar element ``i`` of a vector."""
    if a.data.ndim != 1 or not 0 <= i < a.shape[0]:
        raise ShapeError(f"index {i} of {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _make(a.tape, a.data[i:i + 1].reshape(()).copy(), "index", (a,), back)


def stack_rows(nodes: Sequence[Node]) -> Node:
    """Stack equal-length vectors into a matrix, one per row."""
    nodes = list(nodes)
    tape = nodes[0].tape
    out = np.stack([n.data for n in nodes])

    def back(g):
        return tuple(g[k] for k in range(len(nodes)))

    return _make(tape, out, "stack_rows", nodes, back)


def softmax_rows(x: Node) -> Node:
    d = x.data
    if d.ndim != 2:
        raise ShapeError("softmax_rows needs a matrix")
    if np.isnan(d).any():
        raise ValueError("softmax_rows got NaN input")
    z = np.exp(d - d.max(axis=1, keepdims=True))
    out = z / z.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(x.tape, out, "softmax_rows", (x,), back)


def reduce_max_rows(x: Node) -> Node:
    d = x.data
    if d.ndim != 2 or d.shape[0] == 0:
        raise ShapeError("reduce_max_rows needs a non-empty matrix")
    arg = d.argmax(axis=0)  # first index on ties
    cols = np.arange(d.shape[1])

    def back(g):
        full = np.zeros(d.shape)
        full[arg, cols] = g
        return (full,)

    return _make(x.tape, d[arg, cols].copy(), "reduce_max_rows", (x,), back)


def reduce_mean_rows(x: Node) -> Node:
    d = x.data
    if d.ndim != 2 or d.shape[0] == 0:
        raise ShapeError("reduce_mean_rows needs a non-empty matrix")
    m = d.shape[0]

    def back(g):
        return (np.broadcast_to(g / m, d.shape).copy(),)

    return _make(x.tape, d.mean(axis=0), "reduce_mean_rows", (x,), back)


def sum_all(x: Node) -> Node:
    shape = x.shape
    return _make(x.tape, np.asarray(x.data.sum()), "sum", (x,),
                 lambda g: (np.full(shape, float(g)),))


def cross_entropy(logits: Node, target: int) -> Node:
    """Negative log-softmax of ``logits`` at ``target``."""
    z = logits.data
    if z.ndim != 1:
        raise ShapeError("cross_entropy needs a logit vector")
    if not 0 <= target < z.shape[0]:
        raise IndexError(f"target {target} out of range for {z.shape[0]} classes")
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    p = np.exp(z - lse)

    def back(g):
        onehot = np.zeros_like(p)
        onehot[target] = 1.0
        return (float(g) * (p - onehot),)

    return _make(logits.tape, np.asarray(lse - z[target]), "cross_entropy", (logits,), back)

