"""Eager reverse-mode autodiff over float64 arrays.

Every op is evaluated immediately and appended to a :class:`Tape`. A single
call to :func:`backward` walks the tape in reverse and returns gradients for
every leaf that was created with ``requires_grad``.

Binary ops broadcast like numpy, so a ``(B, n, d) @ (d, k)`` product against
a 2-D parameter accumulates the batch-summed gradient into the parameter.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError, GraphError
from .numeric import as_tensor, softmax_rows as _softmax

RMS_EPS = 1e-8


class Node:
    __slots__ = ("id", "value", "op", "parents", "attrs", "grad", "requires_grad")

    def __init__(self, id, value, op, parents=(), attrs=None, requires_grad=False):
        self.id = id
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- forward rules ---------------------------------------------------------

def _check_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul shape mismatch: {a.shape} @ {b.shape}")


def _fwd_matmul(a, b):
    _check_matmul(a, b)
    try:
        return np.matmul(a, b)
    except ValueError as exc:
        raise GraphError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from exc


def _fwd_broadcast(fn):
    def forward(a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise GraphError(f"cannot broadcast {a.shape} with {b.shape}") from exc
        return fn(a, b)
    return forward


def _fwd_rms_norm(x, gain):
    if gain.shape != (x.shape[-1],):
        raise GraphError(f"rms_norm gain {gain.shape} does not match features {x.shape[-1]}")
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r * gain


def _fwd_cross_entropy(logits, *, labels):
    labels = np.asarray(labels)
    flat = logits.reshape(-1, logits.shape[-1])
    if flat.shape[0] != labels.size:
        raise GraphError(f"{labels.size} labels for {flat.shape[0]} logit rows")
    z = flat - flat.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -logp[np.arange(labels.size), labels.reshape(-1)]
    return np.array([[nll.mean()]])


def _fwd_reshape(a, *, shape):
    try:
        return a.reshape(shape)
    except ValueError as exc:
        raise GraphError(f"cannot reshape {a.shape} to {shape}") from exc


FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "transpose": lambda a: np.swapaxes(a, -1, -2),
    "swapaxes": lambda a, *, axes: np.swapaxes(a, *axes),
    "reshape": _fwd_reshape,
    "add": _fwd_broadcast(np.add),
    "mul": _fwd_broadcast(np.multiply),
    "scale": lambda a, *, c: a * c,
    "sum": lambda a: np.array([[a.sum()]]),
    "softmax_rows": _softmax,
    "relu": lambda a: np.maximum(a, 0.0),
    "rms_norm": _fwd_rms_norm,
    "row_mean": lambda a: a.mean(axis=-2, keepdims=True),
    "cross_entropy_logits": _fwd_cross_entropy,
    "stop_grad": lambda a: a,
}


# --- vector-Jacobian products ----------------------------------------------
# Each takes (g, out, inputs, attrs) and returns one gradient per input.

def _vjp_matmul(g, out, ins, attrs):
    a, b = ins
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _vjp_softmax(g, y, ins, attrs):
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def _vjp_rms_norm(g, out, ins, attrs):
    x, gain = ins
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    xhat = x / r
    g_gain = _unbroadcast(g * xhat, gain.shape)
    gx_hat = g * gain
    gx = (gx_hat - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True)) / r
    return gx, g_gain


def _vjp_cross_entropy(g, out, ins, attrs):
    (logits,) = ins
    labels = np.asarray(attrs["labels"]).reshape(-1)
    flat = logits.reshape(-1, logits.shape[-1])
    p = _softmax(flat)
    p[np.arange(labels.size), labels] -= 1.0
    return ((g[0, 0] / labels.size) * p.reshape(logits.shape),)


VJP: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "transpose": lambda g, out, ins, attrs: (np.swapaxes(g, -1, -2),),
    "swapaxes": lambda g, out, ins, attrs: (np.swapaxes(g, *attrs["axes"]),),
    "reshape": lambda g, out, ins, attrs: (g.reshape(ins[0].shape),),
    "add": lambda g, out, ins, attrs: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
    "mul": lambda g, out, ins, attrs: (
        _unbroadcast(g * ins[1], ins[0].shape),
        _unbroadcast(g * ins[0], ins[1].shape),
    ),
    "scale": lambda g, out, ins, attrs: (g * attrs["c"],),
    "sum": lambda g, out, ins, attrs: (np.full(ins[0].shape, g[0, 0]),),
    "softmax_rows": _vjp_softmax,
    "relu": lambda g, out, ins, attrs: (g * (ins[0] > 0),),
    "rms_norm": _vjp_rms_norm,
    "row_mean": lambda g, out, ins, attrs: (
        np.broadcast_to(g / ins[0].shape[-2], ins[0].shape).copy(),
    ),
    "cross_entropy_logits": _vjp_cross_entropy,
    "stop_grad": lambda g, out, ins, attrs: (None,),
}

OP_KINDS = frozenset(FORWARD)


class Tape:
    """Ordered record of nodes; parents always precede their children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: set[int] = set()
        self._consumed = False

    def _push(self, value, op, parents=(), attrs=None, requires_grad=False):
        node = Node(len(self.nodes), value, op, parents, attrs, requires_grad)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self._push(as_tensor(value), "leaf")

    def leaf(self, value, requires_grad=False) -> Node:
        return self._push(as_tensor(value), "leaf", requires_grad=requires_grad)

    def param(self, value) -> Node:
        node = self._push(as_tensor(value), "leaf", requires_grad=True)
        self.params.add(node.id)
        return node

    def record(self, op: str, *inputs: Node, **attrs) -> Node:
        fwd = FORWARD.get(op)
        if fwd is None:
            raise GraphError(f"unsupported op-kind {op!r}")
        for node in inputs:
            if (not isinstance(node, Node) or node.id >= len(self.nodes)
                    or self.nodes[node.id] is not node):
                raise GraphError(f"{op}: input is not a node of this tape")
        try:
            value = fwd(*(n.value for n in inputs), **attrs)
        except TypeError as exc:
            raise GraphError(f"{op}: bad arguments ({exc})") from exc
        needs = op != "stop_grad" and any(n.requires_grad for n in inputs)
        return self._push(value, op, [n.id for n in inputs], attrs, needs)

    # Thin conveniences over record().
    def matmul(self, a, b):
        return self.record("matmul", a, b)

    def transpose(self, a):
        return self.record("transpose", a)

    def swapaxes(self, a, i, j):
        return self.record("swapaxes", a, axes=(i, j))

    def reshape(self, a, shape):
        return self.record("reshape", a, shape=tuple(shape))

    def add(self, a, b):
        return self.record("add", a, b)

    def mul(self, a, b):
        return self.record("mul", a, b)

    def scale(self, a, c):
        return self.record("scale", a, c=float(c))

    def sum(self, a):
        return self.record("sum", a)

    def softmax_rows(self, a):
        return self.record("softmax_rows", a)

    def relu(self, a):
        return self.record("relu", a)

    def rms_norm(self, x, gain):
        return self.record("rms_norm", x, gain)

    def row_mean(self, a):
        return self.record("row_mean", a)

    def cross_entropy_logits(self, logits, labels):
        return self.record("cross_entropy_logits", logits, labels=np.asarray(labels))

    def stop_grad(self, a):
        return self.record("stop_grad", a)

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        return backward(self, loss)


def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    """Reverse pass from a 1x1 ``loss``; returns ``{leaf id: gradient}``.

    Gradients are returned for every leaf created with ``requires_grad``;
    intermediate gradients are dropped as soon as they are propagated.
    """
    if tape._consumed:
        raise ContractError("backward already ran on this tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"loss must be 1x1, got {loss.value.shape}")
    tape._consumed = True
    grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
    out: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        if node.op == "leaf":
            node.grad = g
            out[node.id] = g
            continue
        parents = [tape.nodes[i] for i in node.parents]
        pgrads = VJP[node.op](g, node.value, [p.value for p in parents], node.attrs)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    for node in tape.nodes:
        if node.requires_grad and node.op == "leaf" and node.id not in out:
            node.grad = np.zeros_like(node.value)
            out[node.id] = node.grad
    return out


def finite_diff_grad(f, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one entry at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_discrepancy(a, b) -> float:
    """``max|a-b| / max(max|a|, max|b|)``; absolute when both are ~zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    if scale < 1e-10:
        return diff
    return diff / scale

