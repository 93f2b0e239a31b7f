"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure that maps
the output gradient to parent-gradient contributions.  ``backward`` walks the
graph once in reverse topological order, so fan-out accumulates correctly.

Two run-level precisions exist: "standard" (float32) for training and "high"
(float64) for finite-difference gradient checks.  The precision is a global
switch; it applies to tensors created after the switch.

Multiply-add counting: each forward op adds its cost to a global counter so
callers can compare decoder variants by exact operation counts instead of
wall clock.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError, ShapeError

_PRECISIONS = {"standard": np.float32, "high": np.float64}
_state = {"dtype": np.float32, "grad": True, "madds": 0}


def set_precision(mode: str) -> None:
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _state["dtype"] = _PRECISIONS[mode]


def active_dtype():
    return _state["dtype"]


class precision:
    """Context manager form of the precision switch."""

    def __init__(self, mode: str):
        self.mode = mode

    def __enter__(self):
        self.saved = _state["dtype"]
        set_precision(self.mode)
        return self

    def __exit__(self, *exc):
        _state["dtype"] = self.saved
        return False


class no_grad:
    """Disable graph construction inside the block (inference / benchmarks)."""

    def __enter__(self):
        self.saved = _state["grad"]
        _state["grad"] = False
        return self

    def __exit__(self, *exc):
        _state["grad"] = self.saved
        return False


def grad_enabled() -> bool:
    return _state["grad"]


def reset_madds() -> None:
    _state["madds"] = 0


def madds() -> int:
    return _state["madds"]


def _count(n: int) -> None:
    _state["madds"] += int(n)


class Tensor:
    """A node in the reverse-mode computation graph.

    ``data`` is a contiguous numpy array; ``grad`` has the same shape and is
    allocated lazily on first accumulation.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad = None
        self._parents = _parents if _state["grad"] else ()
        self._backward = _backward if _state["grad"] else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    # -- operator sugar -----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def detach(self):
        return Tensor(self.data.copy())


class Parameter(Tensor):
    """A named trainable leaf tensor.

    ``name`` starts as the local attribute name and is rewritten to the full
    hierarchical path when the owning model finalizes its registry.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        # Parameters are leaves regardless of the no_grad state at creation.
        super().__init__(np.asarray(data, dtype=_state["dtype"]))
        self.name = name
        self.trainable = trainable


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after trailing-dim broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are not broadcast-compatible")


def _make(out_data, parents, backward):
    _count(out_data.size)
    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, parents, backward)


# -- arithmetic --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def bw(g):
        a._accum(_unbroadcast(g / b.data, a.data.shape))
        b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: a._accum(-g))


def power(a, p: float) -> Tensor:
    a = _lift(a)
    out_data = a.data ** p

    def bw(g):
        a._accum(g * p * a.data ** (p - 1))

    return _make(out_data, (a,), bw)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def bw(g):
        a._accum(g * out_data)

    return _make(out_data, (a,), bw)


def log(a) -> Tensor:
    a = _lift(a)
    out_data = np.log(a.data)

    def bw(g):
        a._accum(g / a.data)

    return _make(out_data, (a,), bw)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def abs_(a) -> Tensor:
    a = _lift(a)
    out_data = np.abs(a.data)

    def bw(g):
        a._accum(g * np.sign(a.data))

    return _make(out_data, (a,), bw)


def relu(a) -> Tensor:
    a = _lift(a)
    out_data = np.maximum(a.data, 0.0)

    def bw(g):
        a._accum(g * (a.data > 0))

    return _make(out_data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out_data = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out_data = np.where(a.data >= 0, out_data, 1.0 - out_data)

    def bw(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def softplus(a) -> Tensor:
    """ln(1 + e^x), computed branch-free stably as max(x,0) + log1p(e^-|x|)."""
    a = _lift(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bw(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
        s = np.where(a.data >= 0, s, 1.0 - s)
        a._accum(g * s)

    return _make(out_data, (a,), bw)


def tanh(a) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)

    def bw(g):
        a._accum(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


# -- contractions and reductions ----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data
    batch = int(np.prod(out_data.shape[:-2], dtype=np.int64)) if out_data.ndim > 2 else 1
    _count(batch * out_data.shape[-2] * a.shape[-1] * out_data.shape[-1])

    def bw(g):
        a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, (a, b), bw)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape))

    _count(a.size)
    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- shape manipulation --------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        a._accum(g.reshape(a.data.shape))

    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    out_data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bw(g):
        a._accum(g.transpose(inv))

    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, (a,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)])

    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, tuple(tensors), bw)


def slice_(a, key) -> Tensor:
    """Basic (possibly strided) slicing; gradient scatters back through the view."""
    a = _lift(a)
    out_data = a.data[key]

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        a._accum(buf)

    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, (a,), bw)


def pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    """Zero padding along one axis."""
    a = _lift(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out_data = np.pad(a.data, widths)

    def bw(g):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(before, before + a.shape[axis])
        a._accum(g[tuple(idx)])

    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, (a,), bw)


def expand(a, shape) -> Tensor:
    """Broadcast to ``shape``; gradient sums over the broadcast axes."""
    a = _lift(a)
    out_data = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))

    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, (a,), bw)


def gather_rows(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` (embedding); gradient scatter-adds per row."""
    table = _lift(table)
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def bw(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        table._accum(buf)

    _count(out_data.size)
    if not _state["grad"]:
        return Tensor(out_data)
    return Tensor(out_data, (table,), bw)


def stop_gradient(a) -> Tensor:
    a = _lift(a)
    return Tensor(a.data)


# -- composite neural ops -------------------------------------------------------

def softmax(a, axis: int) -> Tensor:
    """Max-stabilized softmax; outputs form a probability simplex along ``axis``."""
    a = _lift(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = sub(a, Tensor(a.data.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, sum_(e, axis=axis, keepdims=True))


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    gain = _lift(gain)
    x = _lift(x)
    if gain.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm gain extent {gain.shape} does not match feature extent {x.shape[-1]}")
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted-scaling dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return _lift(x)
    if rng is None:
        raise ValueError("training-mode dropout requires an explicit random generator")
    keep = (rng.random(x.shape) >= rate).astype(active_dtype()) / (1.0 - rate)
    return mul(x, Tensor(keep))


def bce_with_logits(logits, targets) -> Tensor:
    """Per-element binary cross-entropy from logits (softplus form, stable)."""
    logits = _lift(logits)
    targets = _lift(targets)
    return add(mul(targets, softplus(neg(logits))), mul(sub(1.0, targets), softplus(logits)))


# -- backward sweep ---------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; repeated calls accumulate into .grad."""
    if loss.data.shape != ():
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    loss._accum(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _topo_order(root: Tensor):
    """Iterative post-order over parents; each node appears exactly once."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order
