"""Phrase queries from pooled phrase context and phrase encodings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import EmptySpan, SpanOutOfRange
from .fusion import FusedFeatures
from .numerics import MLP, Module, Parameter, Tensor


@dataclass(frozen=True)
class PhraseSpan:
    """Token bounds ``[l, r)`` inside the context sentence (not the joint sequence)."""

    l: int
    r: int

    def check(self, n_tokens: int) -> None:
        if self.l == self.r:
            raise EmptySpan(f"span ({self.l}, {self.r}) is empty")
        if not 0 <= self.l < self.r <= n_tokens:
            raise SpanOutOfRange(f"span ({self.l}, {self.r}) outside sentence of {n_tokens} tokens")


def _as_span(span) -> PhraseSpan:
    return span if isinstance(span, PhraseSpan) else PhraseSpan(int(span[0]), int(span[1]))


def pool_phrase_context(fused: FusedFeatures, span, sample: int = 0) -> Tensor:
    """Mean of the fused text columns covered by ``span`` for one sample, shape ``(C,)``."""
    span = _as_span(span)
    n_tokens = int(fused.valid[sample, fused.boundary:].sum())
    span.check(n_tokens)
    lo, hi = fused.boundary + span.l, fused.boundary + span.r
    return fused.f_vl[sample, lo:hi].mean(axis=0)


def context_pooling_weights(spans: Sequence[Sequence], boundary: int, length: int,
                            text_lengths: Sequence[int], dtype=np.float32) -> np.ndarray:
    """``(B, M_max, length)`` averaging weights; padded phrase rows are zero."""
    B = len(spans)
    m_max = max(1, max(len(s) for s in spans))
    w = np.zeros((B, m_max, length), dtype=dtype)
    for b, sample_spans in enumerate(spans):
        for i, raw in enumerate(sample_spans):
            span = _as_span(raw)
            span.check(int(text_lengths[b]))
            w[b, i, boundary + span.l:boundary + span.r] = 1.0 / (span.r - span.l)
    return w


@dataclass
class PhraseQuery:
    q: Tensor
    phrase_index: int


class QueryEncoder(Module):
    """``q = MLP([f_c ; f_p]) + E_p`` with one shared bias vector ``E_p``.

    The ``use_*`` switches zero an input to reproduce the query-feature
    ablations.
    """

    def __init__(self, dim: int, rng: np.random.Generator, use_context: bool = True, use_phrase: bool = True,
                 use_bias: bool = True):
        self.mlp = MLP(2 * dim, dim, dim, rng)
        self.E_p = Parameter(rng.normal(0.0, 0.02, dim))
        self.use_context = use_context
        self.use_phrase = use_phrase
        self.use_bias = use_bias

    def forward(self, f_c: Tensor, f_p: Tensor) -> Tensor:
        if not self.use_context:
            f_c = Tensor(np.zeros(f_c.shape), dtype=f_c.dtype)
        if not self.use_phrase:
            f_p = Tensor(np.zeros(f_p.shape), dtype=f_p.dtype)
        q = self.mlp(nx.concat([f_c, f_p], axis=-1))
        return q + self.E_p if self.use_bias else q

    def pool(self, fused: FusedFeatures, spans: Sequence[Sequence]) -> Tensor:
        """Batched phrase context ``(B, M_max, C)``."""
        lengths = fused.valid[:, fused.boundary:].sum(axis=1)
        w = context_pooling_weights(spans, fused.boundary, fused.f_vl.shape[1], lengths, fused.f_vl.dtype)
        return Tensor(w, dtype=fused.f_vl.dtype) @ fused.f_vl


def make_query(encoder: QueryEncoder, f_c: Tensor, f_p: Tensor, index: int = 0) -> PhraseQuery:
    return PhraseQuery(encoder(f_c, f_p), index)
