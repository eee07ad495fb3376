"""Referring decoder: query-graph self-attention, then cross-attention into the fused sequence."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NoQueries
from .fusion import FusedFeatures
from .numerics import FeedForward, LayerNorm, Module, MultiHeadAttention, Tensor, key_padding_bias, stack


@dataclass
class DecodedQueries:
    """``features[l]`` is ``(B, M, C)`` after layer ``l`` (final norm applied);
    ``attn_maps[l]`` is ``(B, M, heads, HW+N)``."""

    features: list[Tensor]
    attn_maps: list[Tensor]

    @property
    def final(self) -> Tensor:
        return self.features[-1]


class DecoderLayer(Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)

    def forward(self, x: Tensor, memory: Tensor, memory_pos: Tensor, query_bias: np.ndarray,
                memory_bias: np.ndarray, use_self_attn: bool = True) -> tuple[Tensor, Tensor]:
        if use_self_attn:
            h = self.norm1(x)
            a, _ = self.self_attn(h, h, h, query_bias)
            x = x + a
        h = self.norm2(x)
        a, weights = self.cross_attn(h, memory + memory_pos, memory, memory_bias)
        x = x + a
        x = x + self.ffn(self.norm3(x))
        return x, weights


class ReferringDecoder(Module):
    """Non-causal decoder over the M phrase queries. There is no positional
    encoding on the query axis, so the layer is permutation-equivariant."""

    def __init__(self, dim: int, heads: int, layers: int, rng: np.random.Generator,
                 ffn_dim: Optional[int] = None, use_self_attn: bool = True):
        if layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.layers = [DecoderLayer(dim, heads, ffn_dim or 4 * dim, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)
        self.use_self_attn = use_self_attn

    def forward(self, queries: Tensor, fused: FusedFeatures,
                query_valid: Optional[np.ndarray] = None) -> DecodedQueries:
        if queries.ndim == 2:
            queries = queries.reshape((1,) + queries.shape)
        B, M, _ = queries.shape
        if M == 0:
            raise NoQueries("decoder needs at least one phrase query")
        if query_valid is None:
            query_valid = np.ones((B, M), dtype=bool)
        qbias = key_padding_bias(query_valid, dtype=queries.dtype)
        mbias = key_padding_bias(fused.valid, dtype=queries.dtype)
        x = queries
        features, maps = [], []
        for layer in self.layers:
            x, w = layer(x, fused.f_vl, fused.pos, qbias, mbias, self.use_self_attn)
            features.append(self.norm(x))
            maps.append(w)
        return DecodedQueries(features, maps)


def decode_queries(decoder: ReferringDecoder, queries, fused: FusedFeatures) -> DecodedQueries:
    if isinstance(queries, (list, tuple)):
        if not queries:
            raise NoQueries("decoder needs at least one phrase query")
        queries = stack([q.q if hasattr(q, "q") else q for q in queries], axis=0)
    return decoder(queries, fused)
