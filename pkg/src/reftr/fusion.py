"""Visual-lingual encoder over the concatenated image and text token sequence."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import numerics as nx
from .backbones import ImageFeatures
from .errors import BadChannelCount
from .numerics import EncoderLayer, LayerNorm, MLP, Module, Parameter, Tensor


def positional_embedding_2d(H: int, W: int, C: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed sine/cosine table ``(H*W, C)``, row-major over the grid.

    The first ``C/2`` channels encode the normalized row coordinate and the
    rest the column; inside each half, even channels are ``sin`` and odd
    channels ``cos`` of the coordinate over geometric frequencies.
    """
    return _pos2d(int(H), int(W), int(C), float(temperature)).copy()


@lru_cache(maxsize=32)
def _pos2d(H: int, W: int, C: int, temperature: float) -> np.ndarray:
    if C % 4:
        raise BadChannelCount(f"channel count {C} must be divisible by 4")
    half = C // 2
    k = np.arange(half)
    freq = temperature ** (2 * (k // 2) / half)
    y = (np.arange(H) + 1.0) / H * 2.0 * math.pi
    x = (np.arange(W) + 1.0) / W * 2.0 * math.pi

    def encode(v):
        t = v[:, None] / freq[None, :]
        return np.where(k % 2 == 0, np.sin(t), np.cos(t))

    py = np.repeat(encode(y)[:, None, :], W, axis=1)
    px = np.repeat(encode(x)[None, :, :], H, axis=0)
    return np.concatenate([py, px], axis=-1).reshape(H * W, C)


@dataclass
class JointSequence:
    """``f`` is ``(B, HW+N, C)``; ``pos`` holds ``P + E_label`` per token, added inside each layer."""

    f: Tensor
    pos: Tensor
    boundary: int
    text_valid: np.ndarray
    grid: tuple[int, int]

    @property
    def length(self) -> int:
        return self.f.shape[1]

    @property
    def valid(self) -> np.ndarray:
        B = self.f.shape[0]
        return np.concatenate([np.ones((B, self.boundary), dtype=bool), self.text_valid], axis=1)

    def image_part(self) -> Tensor:
        return self.f[:, :self.boundary]

    def text_part(self) -> Tensor:
        return self.f[:, self.boundary:]


@dataclass
class FusedFeatures:
    f_vl: Tensor
    boundary: int
    pos: Tensor
    valid: np.ndarray
    grid: tuple[int, int]
    attn: list = field(default_factory=list)


class VisualLingualEncoder(Module):
    def __init__(self, rng: np.random.Generator, image_dim: int = 64, text_dim: int = 64, dim: int = 128,
                 layers: int = 2, heads: int = 8, ffn_dim: Optional[int] = None, max_text_len: int = 64):
        if dim % 4:
            raise BadChannelCount(f"joint width {dim} must be divisible by 4")
        self.dim = dim
        self.img_proj = MLP(image_dim, dim, dim, rng)
        self.txt_proj = MLP(text_dim, dim, dim, rng)
        self.P_text = Parameter(rng.normal(0.0, 0.02, (max_text_len, dim)))
        self.E_img = Parameter(rng.normal(0.0, 0.02, dim))
        self.E_text = Parameter(rng.normal(0.0, 0.02, dim))
        self.layers = [EncoderLayer(dim, heads, ffn_dim or 4 * dim, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)

    def build_joint_sequence(self, image: ImageFeatures, text: Tensor,
                             text_valid: Optional[np.ndarray] = None) -> JointSequence:
        """``text`` is ``(B, N, C_t)`` context features."""
        if text.ndim == 2:
            text = text.reshape((1,) + text.shape)
        B, N, _ = text.shape
        if text_valid is None:
            text_valid = np.ones((B, N), dtype=bool)
        H, W = image.grid
        f = nx.concat([self.img_proj(image.f_I), self.txt_proj(text)], axis=1)
        p_img = Tensor(positional_embedding_2d(H, W, self.dim), dtype=f.dtype)
        pos = nx.concat([p_img + self.E_img, self.P_text[:N] + self.E_text], axis=0)
        return JointSequence(f, pos, H * W, np.asarray(text_valid, dtype=bool), (H, W))

    def forward(self, js: JointSequence) -> FusedFeatures:
        x = js.f
        bias = nx.key_padding_bias(js.valid, dtype=x.dtype)
        maps = []
        for layer in self.layers:
            x, w = layer(x, js.pos, bias)
            maps.append(w)
        if self.layers:
            x = self.norm(x)
        return FusedFeatures(x, js.boundary, js.pos, js.valid, js.grid, maps)

    encode = forward
