"""Tensor values and a define-by-run gradient tape.

Every op computes its forward value eagerly with numpy. When a :class:`Tape`
is active and at least one input requires a gradient, the op appends a node
holding its inputs and a closure that maps the output cotangent to input
cotangents. ``Tape.backward`` walks the nodes in reverse recording order,
which is a valid topological order because a node can only consume tensors
recorded before it.

Broadcasting between two tensors is restricted to scalars and trailing-dim
expansion (``b.shape == a.shape[-b.ndim:]``); anything else raises
:class:`ShapeMismatch`.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from ..errors import DomainError, NaNInput, ShapeMismatch

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def float64_mode():
    """Create new tensors as float64 inside the block (used by gradient checks)."""
    prev = get_default_dtype()
    _local.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _local.dtype = prev


def current_tape() -> Optional["Tape"]:
    tapes = _stack()
    return tapes[-1] if tapes else None


class Node:
    # keyed by the output's id rather than holding it, so no reference cycle
    # keeps a finished graph alive until the cyclic collector runs
    __slots__ = ("out_id", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out_id = id(out)
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records differentiable ops executed while it is the active tape.

    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        node = Node(out, inputs, backward)
        out.tape_node = node
        self.nodes.append(node)

    def backward(self, loss: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf tensor."""
        if self._done:
            raise RuntimeError("backward already ran on this tape")
        self._done = True
        if grad is None:
            if loss.size != 1:
                raise ShapeMismatch("backward without an explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads: dict[int, list] = {id(loss): [loss, np.asarray(grad, dtype=loss.dtype)]}
        for node in reversed(self.nodes):
            entry = grads.pop(node.out_id, None)
            if entry is None:
                continue
            in_grads = node.backward(entry[1])
            for t, g in zip(node.inputs, in_grads):
                if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                slot = grads.get(id(t))
                if slot is None:
                    grads[id(t)] = [t, g]
                else:
                    slot[1] = slot[1] + g
        # what remains are leaves (tensors not produced on this tape)
        for t, g in grads.values():
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes.clear()


class Tensor:
    """An n-d float array with an optional link into the active tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self.tape_node is None:
            raise RuntimeError("tensor was not produced under an active tape")
        for tape in _stack():
            if self.tape_node in tape.nodes:
                tape.backward(self, grad)
                return
        raise RuntimeError("the tape that produced this tensor is no longer active")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


# ---------------------------------------------------------------------------
# plumbing


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    dtype = next((t.dtype for t in inputs if isinstance(t, Tensor)), get_default_dtype())
    out = Tensor(np.asarray(data).astype(dtype, copy=False), dtype=dtype)
    tape = current_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b:
        return
    if math.prod(a) == 1 and len(a) <= len(b) or math.prod(b) == 1 and len(b) <= len(a):
        return
    small, large = sorted((tuple(a), tuple(b)), key=len)
    if large[len(large) - len(small):] == small:
        return
    raise ShapeMismatch(f"cannot broadcast shapes {a} and {b} (only scalar or trailing-dim expansion)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0 or math.prod(shape) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


def _binary_prep(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = _const(a, b) if not isinstance(a, Tensor) else a
    b = _const(b, a) if not isinstance(b, Tensor) else b
    _check_broadcast(a.shape, b.shape)
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    return mul(x, float(factor))


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    if not float(exponent).is_integer() and np.any(x.data < 0):
        raise DomainError("non-integer power of a negative value")
    if exponent < 0 and np.any(x.data == 0):
        raise DomainError("negative power of zero")
    out = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _make(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), backward)


def maximum(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in parts)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Supports ``(..., m, k) @ (k, n)`` (shared weight),
    ``(..., m, k) @ (..., k, n)`` with identical leading dims, and a vector
    ``(k,)`` on the left of a matrix.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        da = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            db = None
        elif b.ndim == 2:
            db = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, axis: int = -1, bias: Optional[np.ndarray] = None) -> Tensor:
    """Softmax with max-subtraction; ``bias`` is a constant additive mask."""
    d = x.data
    if not np.all(np.isfinite(d)):
        raise NaNInput("softmax input contains NaN or inf")
    if bias is not None:
        d = d + bias
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeMismatch("layer_norm needs at least one channel")
    gain, bias = as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# spatial ops (channel-first, optional leading batch axis)


def _as_batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           pad: Optional[int] = None) -> Tensor:
    """2-d cross-correlation via im2col.

    ``x`` is ``[C_in,H,W]`` or ``[B,C_in,H,W]``; ``kernel`` is
    ``[C_out,C_in,k,k]``. ``pad`` defaults to ``k // 2``.
    """
    x4, squeeze = _as_batched(x)
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeMismatch(f"kernel must be square with odd size, got {kernel.shape}")
    if x4.shape[1] != c_in:
        raise ShapeMismatch(f"input has {x4.shape[1]} channels, kernel expects {c_in}")
    k = kh
    pad = k // 2 if pad is None else pad
    B, _, H, W = x4.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x4.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x4.data
    cols = np.empty((B, c_in, k, k, Ho, Wo), dtype=x4.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(B, c_in * k * k, Ho * Wo)
    wmat = kernel.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(B, c_out, Ho, Wo)
    inputs = (x4, kernel) if bias is None else (x4, kernel, bias)

    def backward(g):
        g2 = g.reshape(B, c_out, Ho * Wo)
        dk = None
        if kernel.requires_grad:
            dk = np.einsum("bol,bkl->ok", g2, cols, optimize=True).reshape(kernel.shape)
        dx = None
        if x4.requires_grad:
            dcols = (wmat.T @ g2).reshape(B, c_in, k, k, Ho, Wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        grads = (dx, dk)
        if bias is not None:
            grads += (g2.sum(axis=(0, 2)) if bias.requires_grad else None,)
        return grads

    out = _make(out, inputs, backward)
    return reshape(out, out.shape[1:]) if squeeze else out


def upsample2x_nearest(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block; adjoint sums each block."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _make(out, (x,), backward)


def avgpool2x(x: Tensor) -> Tensor:
    s = x.shape
    if s[-1] % 2 or s[-2] % 2:
        raise ShapeMismatch(f"avgpool2x needs even spatial dims, got {s}")
    out = x.data.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).mean(axis=(-3, -1))

    def backward(g):
        return (0.25 * g.repeat(2, axis=-2).repeat(2, axis=-1),)

    return _make(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add adjoint."""
    return getitem(table, np.asarray(ids, dtype=np.int64))

