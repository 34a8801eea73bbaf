"""Minimal reverse-mode differentiation over volume-valued expressions.

A :class:`Tape` records every operation in creation order, so inputs always
precede outputs and the backward sweep is a plain reverse walk. Values are
numpy arrays in the tape's dtype (float64 unless asked otherwise); scalar
results are 0-d arrays.

Ops are deliberately a closed set with explicit shapes (no broadcasting).
Other modules add their own ops through :meth:`Tape.record`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ParameterError

LOG_FLOOR = 1e-12


class Node:
    """A value on a tape together with its accumulated adjoint."""

    __slots__ = ("tape", "index", "value", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, tape, index, value, parents, backward_fn, requires_grad, op):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node({self.op}#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Node) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Node) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Node) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Node) else scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


class Tape:
    """Operation record. ``dtype`` fixes the value precision of every node."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self._consumed = False

    def leaf(self, value, requires_grad: bool = True) -> Node:
        arr = np.array(value, dtype=self.dtype)
        return self._append(arr, (), None, requires_grad, "leaf")

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def record(self, op: str, value: np.ndarray, parents: Sequence[Node],
               backward_fn: Callable) -> Node:
        """Append a derived node.

        ``backward_fn(g)`` receives the output adjoint and returns one array
        (or ``None``) per parent.
        """
        for p in parents:
            if p.tape is not self:
                raise ContractError(f"{op}: input belongs to a different tape")
        needs = any(p.requires_grad for p in parents)
        return self._append(np.asarray(value, dtype=self.dtype), tuple(parents),
                            backward_fn if needs else None, needs, op)

    def _append(self, value, parents, backward_fn, requires_grad, op) -> Node:
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        node = Node(self, len(self.nodes), value, parents, backward_fn, requires_grad, op)
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> dict[int, np.ndarray]:
        """Propagate adjoints from a scalar ``root``; returns leaf grads by node index."""
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        if root.value.size != 1 or root.value.ndim != 0:
            raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        self._consumed = True
        if not root.requires_grad:
            return {}
        # adjoints are allocated lazily and never updated in place, so a
        # backward_fn may return the same array for several parents
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            if node.backward_fn is None or node.grad is None:
                continue
            pgrads = node.backward_fn(node.grad)
            for parent, pg in zip(node.parents, pgrads):
                if pg is not None and parent.requires_grad:
                    pg = np.asarray(pg, dtype=self.dtype)
                    parent.grad = pg if parent.grad is None else parent.grad + pg
        out = {}
        for n in self.nodes[: root.index + 1]:
            if n.op == "leaf" and n.requires_grad:
                if n.grad is None:
                    n.grad = np.zeros_like(n.value)
                out[n.index] = n.grad
        return out


def _same_shape(op, a: Node, b: Node):
    if a.value.shape != b.value.shape:
        raise ParameterError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# elementwise ---------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return a.tape.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return a.tape.record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Node, b: Node) -> Node:
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return a.tape.record("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def scalar_mul(a: Node, s: float) -> Node:
    s = float(s)
    return a.tape.record("scalar_mul", a.value * s, (a,), lambda g: (g * s,))


def add_scalar(a: Node, s: float) -> Node:
    s = float(s)
    return a.tape.record("add_scalar", a.value + s, (a,), lambda g: (g,))


def log(a: Node) -> Node:
    """Natural log with the argument floored at ``LOG_FLOOR``."""
    av = a.value
    clipped = np.maximum(av, LOG_FLOOR)
    active = av > LOG_FLOOR
    return a.tape.record("log", np.log(clipped), (a,), lambda g: (np.where(active, g / clipped, 0.0),))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape.record("exp", out, (a,), lambda g: (g * out,))


def one_minus(a: Node) -> Node:
    return a.tape.record("one_minus", 1.0 - a.value, (a,), lambda g: (-g,))


def square(a: Node) -> Node:
    av = a.value
    return a.tape.record("square", av * av, (a,), lambda g: (2.0 * av * g,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape.record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def detach(a: Node) -> Node:
    return a.tape.constant(a.value.copy())


# channel structure ---------------------------------------------------------

def softmax_channels(logits: Node) -> Node:
    x = logits.value
    if x.ndim < 1 or x.shape[0] < 2:
        raise ParameterError("softmax_channels needs at least 2 channels")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax_channels: non-finite logits")
    e = np.exp(x - x.max(axis=0, keepdims=True))
    y = e / e.sum(axis=0, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=0, keepdims=True)),)

    return logits.tape.record("softmax_channels", y, (logits,), back)


def take_channels(a: Node, channels: Sequence[int]) -> Node:
    """Select entries along the leading axis (channels, or entries of a vector)."""
    idx = np.asarray(channels, dtype=np.intp)
    n = a.value.shape[0]
    if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise ParameterError(f"take_channels: invalid channels {list(channels)} for {n}")
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record("take_channels", a.value[idx], (a,), back)


def concat_channels(parts: Sequence[Node]) -> Node:
    if not parts:
        raise ParameterError("concat_channels: nothing to concatenate")
    tail = parts[0].value.shape[1:]
    for p in parts:
        if p.value.shape[1:] != tail:
            raise ParameterError("concat_channels: spatial shapes differ")
    sizes = np.cumsum([p.value.shape[0] for p in parts])[:-1]
    out = np.concatenate([p.value for p in parts], axis=0)
    return parts[0].tape.record("concat_channels", out, tuple(parts),
                                lambda g: tuple(np.split(g, sizes, axis=0)))


def broadcast_channels(a: Node, channels: int) -> Node:
    """Repeat a single-channel volume ``channels`` times."""
    if a.value.shape[0] != 1:
        raise ParameterError("broadcast_channels needs a single-channel input")
    out = np.repeat(a.value, channels, axis=0)
    return a.tape.record("broadcast_channels", out, (a,), lambda g: (g.sum(axis=0, keepdims=True),))


def channel_sum(a: Node) -> Node:
    return a.tape.record("channel_sum", a.value.sum(axis=0, keepdims=True), (a,),
                         lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def channel_product(a: Node) -> Node:
    """Per-voxel product across all channels; output has one channel."""
    v = a.value
    out = np.prod(v, axis=0, keepdims=True)

    def back(g):
        # product of the other channels, without dividing (entries may be 0)
        c = v.shape[0]
        prefix = np.ones_like(v)
        suffix = np.ones_like(v)
        for k in range(1, c):
            prefix[k] = prefix[k - 1] * v[k - 1]
        for k in range(c - 2, -1, -1):
            suffix[k] = suffix[k + 1] * v[k + 1]
        return (g * prefix * suffix,)

    return a.tape.record("channel_product", out, (a,), back)


def normalize_channels(a: Node) -> Node:
    """Divide every channel by the per-voxel channel sum."""
    v = a.value
    s = v.sum(axis=0, keepdims=True)
    out = v / s

    def back(g):
        return ((g - (g * out).sum(axis=0, keepdims=True)) / s,)

    return a.tape.record("normalize_channels", out, (a,), back)


# max pooling ---------------------------------------------------------------

def _maxpool_with_argmax(x: np.ndarray, radius: int):
    """Cubic-window max with zero padding and first-in-scan-order argmax.

    The window is scanned with x fastest, then y, then z. Reducing along x,
    then y, then z with strict ``>`` comparisons selects the smallest dz,
    then the smallest dy, then the smallest dx among maximal positions,
    which is the first maximum of the full lexicographic scan.
    Returns the pooled values and flat indices into ``x`` (-1 for padding).
    """
    c, nx, ny, nz = x.shape
    r = radius
    w = 2 * r + 1
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r)))
    # the winning window offset is carried as one code dx + w*dy + w*w*dz
    # axis x
    val = xp[:, 0:nx]
    code = np.zeros(val.shape, dtype=np.int32)
    for d in range(1, w):
        cand = xp[:, d:d + nx]
        better = cand > val
        val = np.where(better, cand, val)
        code = np.where(better, np.int32(d), code)
    # axis y
    v2, c2 = val[:, :, 0:ny], code[:, :, 0:ny]
    for d in range(1, w):
        cand = val[:, :, d:d + ny]
        better = cand > v2
        v2 = np.where(better, cand, v2)
        c2 = np.where(better, code[:, :, d:d + ny] + np.int32(w * d), c2)
    # axis z
    v3, c3 = v2[:, :, :, 0:nz], c2[:, :, :, 0:nz]
    for d in range(1, w):
        cand = v2[:, :, :, d:d + nz]
        better = cand > v3
        v3 = np.where(better, cand, v3)
        c3 = np.where(better, c2[:, :, :, d:d + nz] + np.int32(w * w * d), c3)
    v3 = np.ascontiguousarray(v3)
    c3 = c3.astype(np.intp)
    cc, gx, gy, gz = np.indices(v3.shape, sparse=True)
    px = gx + c3 % w - r
    py = gy + (c3 // w) % w - r
    pz = gz + c3 // (w * w) - r
    inside = (px >= 0) & (px < nx) & (py >= 0) & (py < ny) & (pz >= 0) & (pz < nz)
    flat = np.where(inside, ((cc * nx + px) * ny + py) * nz + pz, -1)
    return v3, flat


def maxpool3(a: Node, radius: int = 1) -> Node:
    """Stride-1 cubic max pooling (edge ``2*radius+1``) over each channel."""
    if radius < 1:
        raise ParameterError(f"maxpool3 radius must be >= 1, got {radius}")
    if a.value.ndim != 4:
        raise ParameterError("maxpool3 expects a (C, nx, ny, nz) volume")
    x = a.value
    r = int(radius)
    size, shape = x.size, x.shape
    out = np.pad(x, ((0, 0), (r, r), (r, r), (r, r)))
    for axis in (1, 2, 3):
        n = shape[axis]
        acc = out.take(range(0, n), axis=axis)
        for d in range(1, 2 * r + 1):
            acc = np.maximum(acc, out.take(range(d, d + n), axis=axis))
        out = acc

    def back(g):
        # the argmax is only needed for the adjoint, so it is found here
        _, flat = _maxpool_with_argmax(x, r)
        keep = flat >= 0
        routed = np.bincount(flat[keep], weights=g[keep], minlength=size)
        return (routed.reshape(shape),)

    return a.tape.record("maxpool3", out, (a,), back)


# reductions ----------------------------------------------------------------

def spatial_sum(a: Node) -> Node:
    """Sum every channel over space; returns a vector of length C."""
    v = a.value
    axes = tuple(range(1, v.ndim))
    return a.tape.record("spatial_sum", v.sum(axis=axes), (a,),
                         lambda g: (np.broadcast_to(g.reshape((-1,) + (1,) * (v.ndim - 1)), v.shape).copy(),))


def sum_all(a: Node) -> Node:
    v = a.value
    return a.tape.record("sum_all", v.sum(), (a,), lambda g: (np.full(v.shape, g, dtype=g.dtype),))


def mean_all(a: Node) -> Node:
    v = a.value
    n = v.size
    return a.tape.record("mean_all", v.mean(), (a,), lambda g: (np.full(v.shape, g / n, dtype=g.dtype),))


def l1_norm(a: Node) -> Node:
    v = a.value
    sign = np.sign(v)
    return a.tape.record("l1_norm", np.abs(v).sum(), (a,), lambda g: (sign * g,))
