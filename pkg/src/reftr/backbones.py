"""Small trainable stand-ins for the image and language backbones.

Feature sequences are stored token-major, ``(..., T, C)``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import BadImageShape, EmptyPhrase, EmptyText, TextTooLong
from .numerics import Conv2d, EncoderLayer, LayerNorm, Linear, Module, Parameter, Tensor
from .shapes_world.scene import PAD_ID, UNK_ID, VOCAB

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Vocabulary:
    """Token list where the index is the id; 0 is PAD and 1 is UNK."""

    def __init__(self, tokens: Sequence[str] = VOCAB):
        tokens = list(tokens)
        if tokens[:2] != ["<pad>", "<unk>"]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))


@dataclass
class TokenizedText:
    token_ids: np.ndarray
    token_spans: list[tuple[int, int]]
    tokens: list[str]

    def __len__(self) -> int:
        return len(self.tokens)

    def slice(self, l: int, r: int) -> "TokenizedText":
        return TokenizedText(self.token_ids[l:r], self.token_spans[l:r], self.tokens[l:r])


def tokenize(text: str, vocab: Vocabulary, max_len: int = 64, max_chars: int = 512) -> TokenizedText:
    """Lowercase split on whitespace, keeping punctuation as separate tokens."""
    if len(text) > max_chars:
        raise TextTooLong(f"text has {len(text)} characters (limit {max_chars})")
    lowered = text.lower()
    matches = list(_TOKEN_RE.finditer(lowered))
    if len(matches) > max_len:
        raise TextTooLong(f"text has {len(matches)} tokens (limit {max_len})")
    tokens = [m.group() for m in matches]
    return TokenizedText(
        token_ids=np.array([vocab.id(t) for t in tokens], dtype=np.int64),
        token_spans=[m.span() for m in matches],
        tokens=tokens,
    )


# ---------------------------------------------------------------------------
# image


@dataclass
class ImageFeatures:
    """``stages[s]`` is ``(B, C_s, H0/2^(s+1), W0/2^(s+1))``; ``f_I`` is ``(B, H*W, C_i)``."""

    stages: list[Tensor]
    f_I: Tensor
    grid: tuple[int, int]


class ImageEncoder(Module):
    """Three stride-2 stages of [conv3x3 -> relu -> conv3x3 -> relu].

    Two constant channels holding the normalized row and column coordinate
    are appended to the RGB input, so features carry absolute position into
    attention values (which never receive positional embeddings).
    """

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (16, 32, 64)):
        self.channels = tuple(channels)
        blocks = []
        c_prev = 5
        for c in self.channels:
            blocks.append(Conv2d(c_prev, c, 3, rng, stride=2))
            blocks.append(Conv2d(c, c, 3, rng))
            c_prev = c
        self.blocks = blocks

    def forward(self, image: Tensor) -> ImageFeatures:
        if image.ndim == 3:
            image = image.reshape((1,) + image.shape)
        if image.ndim != 4 or image.shape[1] != 3:
            raise BadImageShape(f"expected (3, H, W) or (B, 3, H, W) image, got {image.shape}")
        H0, W0 = image.shape[-2:]
        if H0 % 8 or W0 % 8:
            raise BadImageShape(f"image size {H0}x{W0} must be divisible by 8")
        B = image.shape[0]
        x = nx.concat([(image - 0.5) * 4.0, Tensor(_coord_channels(B, H0, W0), dtype=image.dtype)], axis=1)
        stages = []
        for s in range(len(self.channels)):
            x = nx.relu(self.blocks[2 * s](x))
            x = nx.relu(self.blocks[2 * s + 1](x))
            stages.append(x)
        _, C, H, W = x.shape
        f_I = x.reshape(B, C, H * W).swapaxes(1, 2)
        return ImageFeatures(stages, f_I, (H, W))


def _coord_channels(B: int, H: int, W: int) -> np.ndarray:
    ys = np.linspace(-1.0, 1.0, H)
    xs = np.linspace(-1.0, 1.0, W)
    grid = np.stack([np.repeat(ys[:, None], W, axis=1), np.repeat(xs[None, :], H, axis=0)])
    return np.broadcast_to(grid, (B, 2, H, W)).copy()


def encode_image(encoder: ImageEncoder, image) -> ImageFeatures:
    return encoder(nx.as_tensor(image))


# ---------------------------------------------------------------------------
# text


class TextEncoder(Module):
    """Token + learned position embeddings followed by pre-norm encoder layers."""

    def __init__(self, vocab_size: int, rng: np.random.Generator, dim: int = 64, layers: int = 2,
                 heads: int = 4, max_len: int = 64):
        self.dim = dim
        self.max_len = max_len
        self.token_embed = Parameter(rng.normal(0.0, 0.02, (vocab_size, dim)))
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, (max_len, dim)))
        self.layers = [EncoderLayer(dim, heads, 4 * dim, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)

    def forward(self, ids: np.ndarray, valid: Optional[np.ndarray] = None) -> Tensor:
        """``ids`` ``(B, N)`` -> ``(B, N, dim)``; padded positions are masked as keys."""
        ids = np.asarray(ids, dtype=np.int64)
        B, N = ids.shape
        if N > self.max_len:
            raise TextTooLong(f"{N} tokens exceeds max_len {self.max_len}")
        if valid is None:
            valid = ids != PAD_ID
        x = nx.embedding(self.token_embed, ids) + self.pos_embed[:N]
        bias = nx.key_padding_bias(valid, dtype=x.dtype)
        for layer in self.layers:
            x, _ = layer(x, None, bias)
        return self.norm(x)


class PhrasePooler(Module):
    """Masked mean over tokens, then affine + tanh into the joint width."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.proj = Linear(d_in, d_out, rng)

    def forward(self, features: Tensor, valid: np.ndarray) -> Tensor:
        w = valid.astype(features.dtype)
        w = w / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
        pooled = (Tensor(w[:, None, :], dtype=features.dtype) @ features).reshape(features.shape[0], -1)
        return nx.tanh(self.proj(pooled))


def pad_ids(sequences: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with PAD; returns ``(ids, valid)``."""
    n = max(1, max((len(s) for s in sequences), default=1))
    ids = np.full((len(sequences), n), PAD_ID, dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, :len(s)] = s
    return ids, ids != PAD_ID


def encode_text(encoder: TextEncoder, tokens: TokenizedText) -> Tensor:
    """Context features ``(N, C_t)`` for one sentence."""
    if len(tokens) == 0:
        raise EmptyText("cannot encode an empty sentence")
    ids = np.asarray(tokens.token_ids, dtype=np.int64)[None]
    return encoder(ids, np.ones_like(ids, dtype=bool)).reshape(len(tokens), encoder.dim)


def encode_phrases(encoder: TextEncoder, pooler: PhrasePooler, phrases: Sequence[np.ndarray]) -> Tensor:
    """Phrase vectors ``(P, C)``; runs the shared text encoder on each phrase alone."""
    if any(len(p) == 0 for p in phrases):
        raise EmptyPhrase("cannot encode an empty phrase")
    ids, _ = pad_ids(phrases)
    valid = np.zeros_like(ids, dtype=bool)
    for i, p in enumerate(phrases):
        valid[i, :len(p)] = True
    return pooler(encoder(ids, valid), valid)


def encode_phrase(encoder: TextEncoder, pooler: PhrasePooler, phrase: TokenizedText) -> Tensor:
    if len(phrase) == 0:
        raise EmptyPhrase("cannot encode an empty phrase")
    return encode_phrases(encoder, pooler, [phrase.token_ids]).reshape(-1)
