"""Parameter containers and the layers the model is assembled from."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from ..errors import ShapeMismatch
from . import tensor as T
from .init import xavier_init
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module tree: parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_init((d_in, d_out), rng).data)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Two dense layers with a relu between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: Optional[int] = None):
        self.weight = Parameter(xavier_init((c_out, c_in, k, k), rng).data)
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` subspaces.

    Inputs are ``(B, T, C)``. ``key_bias`` is a constant array broadcastable
    to ``(B, heads, T_q, T_k)``, typically ``-1e9`` at padded keys. Returns
    the output and the attention weights ``(B, heads, T_q, T_k)``.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, C = x.shape
        return x.reshape(B, L, self.heads, C // self.heads).transpose(0, 2, 1, 3)

    def forward(self, query: Tensor, key: Tensor, value: Tensor,
                key_bias: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
        B, Lq, C = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(C // self.heads))
        attn = T.softmax(scores, axis=-1, bias=key_bias)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Lq, C)
        return self.out_proj(ctx), attn


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm transformer encoder layer.

    ``pos`` (when given) is added to queries and keys of the self-attention
    but not to its values.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)

    def forward(self, x: Tensor, pos: Optional[Tensor] = None,
                key_bias: Optional[np.ndarray] = None) -> tuple[Tensor, np.ndarray]:
        h = self.norm1(x)
        qk = h + pos if pos is not None else h
        a, weights = self.attn(qk, qk, h, key_bias)
        x = x + a
        x = x + self.ffn(self.norm2(x))
        return x, weights.data


def key_padding_bias(valid: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``(B, T)`` boolean validity -> additive bias ``(B, 1, 1, T)``."""
    return np.where(valid, 0.0, -1e9).astype(dtype)[:, None, None, :]
