"""Small reverse-mode differentiation engine over float32 numpy arrays.

Operations are recorded on the active :class:`Tape` (``with Tape() as tape``).
Outside a tape nothing is recorded, which keeps inference cheap.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
"""
from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)


class ShapeError(ValueError):
    """Raised when operand shapes do not compose."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations, inputs always before outputs."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor) -> None:
        """Set ``t.grad`` = d(loss)/d(t) for every ``requires_grad`` tensor used on this tape.

        Tensors that do not reach ``loss`` receive a zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            need = tuple(t._tracked for t in node.inputs)
            for t in node.inputs:
                if t.requires_grad:
                    leaves.setdefault(id(t), t)
            if g is None:
                continue
            for t, gt in zip(node.inputs, node.backward(g, need)):
                if gt is None or not t._tracked:
                    continue
                key = id(t)
                grads[key] = grads[key] + gt if key in grads else gt
        for key, t in leaves.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(t.shape)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unwrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---- elementwise ---------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _make(a.data + DTYPE(b), (a,), lambda g, need: (g,))
    _check(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g, need: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias: x is (n, c) or (n, c, h, w), bias is (c,)."""
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match channels of {x.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    def back(g, need):
        return g, (g.sum(axis=axes) if need[1] else None)

    return _make(x.data + bias.data.reshape(shape), (x, bias), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a, b, "mul")

    def back(g, need):
        return (g * b.data if need[0] else None), (g * a.data if need[1] else None)

    return _make(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _make(a.data * c, (a,), lambda g, need: (g * c,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** DTYPE(p)
    return _make(out, (a,), lambda g, need: (g * DTYPE(p) * a.data ** DTYPE(p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, need: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g, need: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g, need: (g * DTYPE(0.5) / out,))


def tabs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g, need: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g, need: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = (DTYPE(1) / (DTYPE(1) + np.exp(-a.data))).astype(DTYPE)
    return _make(out, (a,), lambda g, need: (g * out * (DTYPE(1) - out),))


# ---- reductions and shape ------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis, dtype=DTYPE)

    def back(g, need):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(DTYPE),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / float(count))


def tmax(a: Tensor, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first arg-max entry."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def back(g, need):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (ga,)

    return _make(out, (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, need: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g, need: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g, need):
        return (g @ b.data.T if need[0] else None), (a.data.T @ g if need[1] else None)

    return _make(a.data @ b.data, (a, b), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g, need):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def broadcast_channels(mask: Tensor, channels: int) -> Tensor:
    """Repeat an (h, w) mask to (channels, h, w)."""
    out = np.broadcast_to(mask.data, (channels,) + mask.shape).copy()
    return _make(out, (mask,), lambda g, need: (g.sum(axis=0),))


def broadcast_batch(x: Tensor, n: int) -> Tensor:
    """Repeat a single sample-shaped tensor along a new leading batch axis."""
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _make(out, (x,), lambda g, need: (g.sum(axis=0),))


def blend(mask: Tensor, pattern: Tensor, x: Tensor) -> Tensor:
    """mask*pattern + (1-mask)*x with mask (h, w), pattern (c, h, w), x (n, c, h, w)."""
    if pattern.shape != x.shape[1:] or mask.shape != pattern.shape[1:]:
        raise ShapeError(f"blend: mask {mask.shape}, pattern {pattern.shape}, batch {x.shape}")
    m = mask.data[None, None]
    p = pattern.data[None]
    out = m * p + (1 - m) * x.data

    def back(g, need):
        gm = (g * (p - x.data)).sum(axis=(0, 1)) if need[0] else None
        gp = (g * m).sum(axis=0) if need[1] else None
        gx = g * (1 - m) if need[2] else None
        return gm, gp, gx

    return _make(out.astype(DTYPE), (mask, pattern, x), back)


# ---- neural-network primitives ------------------------------------------

def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1 same-padded 3x3 convolution. x: (n, c, h, w), w: (o, c, 3, 3)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.zeros((n, h + 2, wd + 2, c), dtype=DTYPE)
    xp[:, 1:-1, 1:-1, :] = x.data.transpose(0, 2, 3, 1)
    # columns ordered (kernel row, kernel col, channel)
    cols = np.concatenate([xp[:, i:i + h, j:j + wd, :] for i in range(3) for j in range(3)], axis=-1)
    cols = cols.reshape(n * h * wd, 9 * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, 9 * c)
    out = (cols @ wmat.T).reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def back(g, need):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * wd, o)
        gw = (gmat.T @ cols).reshape(o, 3, 3, c).transpose(0, 3, 1, 2) if need[1] else None
        gx = None
        if need[0]:
            gcols = (gmat @ wmat).reshape(n, h, wd, 9, c)
            gxp = np.zeros((n, h + 2, wd + 2, c), dtype=gcols.dtype)
            for k in range(9):
                i, j = divmod(k, 3)
                gxp[:, i:i + h, j:j + wd, :] += gcols[:, :, :, k, :]
            gx = gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), back)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max-pool with stride 2; ties route the gradient to the first maximal entry."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    d = x.data
    quads = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def back(g, need):
        gx = np.zeros(d.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for (di, dj), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, :, di::2, dj::2] = g * hit
        return (gx,)

    return _make(out, (x,), back)


def log_softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g, need):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (z,), back)


def softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g, need):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (z,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (n, k) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean(dtype=np.float64)

    def back(g, need):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), back)


def custom(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record an op with a hand-written backward ``backward(g, need) -> grads``."""
    def cast(g, need):
        return tuple(None if gi is None else np.asarray(gi, dtype=DTYPE) for gi in backward(g, need))

    return _make(np.asarray(data, dtype=DTYPE), inputs, cast)
