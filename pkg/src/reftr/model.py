"""The full referring transformer: batching, forward pass, parameter groups, checkpoints."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .backbones import ImageEncoder, PhrasePooler, TextEncoder, Vocabulary, pad_ids, tokenize
from .decoder import ReferringDecoder
from .errors import ConfigMismatch, NoQueries
from .fusion import FusedFeatures, VisualLingualEncoder
from .heads import RecHead, ResHead
from .numerics import Module, Tensor, load_checkpoint, save_checkpoint
from .query_encoder import QueryEncoder
from .shapes_world.render import downsample_mask
from .shapes_world.scene import VOCAB

MASK_STRIDE = 4


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    vocab: tuple = tuple(VOCAB)
    dim: int = 128
    text_dim: int = 64
    image_channels: tuple = (16, 32, 64)
    text_layers: int = 2
    text_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 3
    heads: int = 8
    max_text_len: int = 64
    use_context: bool = True
    use_phrase: bool = True
    use_query_bias: bool = True
    use_decoder: bool = True
    use_self_attn: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        d["image_channels"] = list(self.image_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigMismatch(f"unknown model config keys {sorted(unknown)}")
        d = dict(d)
        for key in ("vocab", "image_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Batch:
    """Padded mini-batch.

    Phrases are flattened to ``P`` rows; ``index[p]``/``slot[p]`` locate
    phrase ``p`` in the ``(B, M_max)`` query grid. ``weights`` averages per
    phrase inside a sample, then over samples.
    """

    images: np.ndarray
    ids: np.ndarray
    text_valid: np.ndarray
    spans: list
    phrase_ids: list
    index: np.ndarray
    slot: np.ndarray
    query_valid: np.ndarray
    weights: np.ndarray
    boxes: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.images.shape[0]

    @property
    def num_phrases(self) -> int:
        return len(self.index)


def collate(samples: Sequence, vocab: Vocabulary, max_text_len: int = 64, with_targets: bool = True) -> Batch:
    """Build a :class:`Batch` from grounding samples (anything with ``image``,
    ``sentence`` and ``phrases``; targets also need ``boxes`` and ``masks``)."""
    if not samples:
        raise ValueError("empty batch")
    sentences, spans, phrase_ids, index, slot = [], [], [], [], []
    for b, s in enumerate(samples):
        if not s.phrases:
            raise NoQueries(f"sample {b} has no phrases")
        sentences.append(tokenize(s.sentence, vocab, max_len=max_text_len).token_ids)
        spans.append([tuple(p.span) for p in s.phrases])
        for i, p in enumerate(s.phrases):
            phrase_ids.append(tokenize(p.text, vocab, max_len=max_text_len).token_ids)
            index.append(b)
            slot.append(i)
    ids, _ = pad_ids(sentences)
    valid = np.zeros_like(ids, dtype=bool)
    for b, t in enumerate(sentences):
        valid[b, :len(t)] = True
    B = len(samples)
    m_max = max(len(s) for s in spans)
    query_valid = np.zeros((B, m_max), dtype=bool)
    weights = np.empty(len(index))
    for p, (b, i) in enumerate(zip(index, slot)):
        query_valid[b, i] = True
        weights[p] = 1.0 / (len(spans[b]) * B)
    batch = Batch(
        images=np.stack([np.asarray(s.image, dtype=np.float32) for s in samples]),
        ids=ids, text_valid=valid, spans=spans, phrase_ids=phrase_ids,
        index=np.asarray(index, dtype=np.int64), slot=np.asarray(slot, dtype=np.int64),
        query_valid=query_valid, weights=weights,
    )
    if with_targets:
        batch.boxes = np.concatenate([np.asarray(s.boxes, dtype=np.float32) for s in samples])
        batch.masks = np.concatenate(
            [np.stack([downsample_mask(m, MASK_STRIDE) for m in s.masks]) for s in samples])
    return batch


@dataclass
class ModelOutput:
    """Per-phrase predictions, flattened in batch order.

    ``boxes`` is ``(P, 4)`` from the last decoder layer; ``aux_boxes`` holds
    every layer's boxes when requested. ``masks`` is ``(P, H0/4, W0/4)``.
    ``attn`` is the last cross-attention image slice ``(P, heads, HW)``.
    """

    boxes: Optional[Tensor]
    masks: Optional[Tensor]
    attn: Tensor
    grid: tuple
    aux_boxes: Optional[list] = None


class ReferringTransformer(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.vocab = Vocabulary(cfg.vocab)
        self.image_encoder = ImageEncoder(rng, cfg.image_channels)
        self.text_encoder = TextEncoder(len(self.vocab), rng, cfg.text_dim, cfg.text_layers, cfg.text_heads,
                                        cfg.max_text_len)
        self.phrase_pooler = PhrasePooler(cfg.text_dim, cfg.dim, rng)
        self.fusion = VisualLingualEncoder(rng, cfg.image_channels[-1], cfg.text_dim, cfg.dim, cfg.enc_layers,
                                           cfg.heads, max_text_len=cfg.max_text_len)
        self.query_encoder = QueryEncoder(cfg.dim, rng, cfg.use_context, cfg.use_phrase, cfg.use_query_bias)
        self.decoder = (ReferringDecoder(cfg.dim, cfg.heads, cfg.dec_layers, rng, use_self_attn=cfg.use_self_attn)
                        if cfg.use_decoder else None)
        self.rec_head = RecHead(cfg.dim, rng)
        self.res_head = ResHead(cfg.dim, cfg.heads, cfg.image_channels, rng)

    # -- parameter bookkeeping

    def parameter_groups(self) -> tuple[list, list]:
        """``(backbone, main)``: the image and context encoders train at the lower rate."""
        backbone = self.image_encoder.parameters() + self.text_encoder.parameters()
        ids = {id(p) for p in backbone}
        return backbone, [p for p in self.parameters() if id(p) not in ids]

    def head_parameters(self, which: str) -> list:
        return (self.rec_head if which == "rec" else self.res_head).parameters()

    # -- forward

    def forward(self, batch: Batch, want_boxes: bool = True, want_masks: bool = True,
                aux: bool = False) -> ModelOutput:
        cfg = self.cfg
        img = self.image_encoder(Tensor(batch.images))
        context = self.text_encoder(batch.ids, batch.text_valid)
        js = self.fusion.build_joint_sequence(img, context, batch.text_valid)
        fused = self.fusion(js)
        P, B, m_max = batch.num_phrases, batch.size, batch.query_valid.shape[1]
        H, W = img.grid
        HW = H * W
        f_c = self.query_encoder.pool(fused, batch.spans)

        if self.decoder is not None:
            pids, pvalid = pad_ids(batch.phrase_ids)
            for i, t in enumerate(batch.phrase_ids):
                pvalid[i] = False
                pvalid[i, :len(t)] = True
            f_p = self.phrase_pooler(self.text_encoder(pids, pvalid), pvalid)
            # scatter phrase rows into the (B, M_max) query grid; padded cells read a zero row
            grid_idx = np.full((B, m_max), P, dtype=np.int64)
            grid_idx[batch.index, batch.slot] = np.arange(P)
            f_p_grid = nx.concat([f_p, Tensor(np.zeros((1, cfg.dim)), dtype=f_p.dtype)], axis=0)[grid_idx]
            queries = self.query_encoder(f_c, f_p_grid)
            decoded = self.decoder(queries, fused, batch.query_valid)
            layer_feats = decoded.features
            attn = decoded.attn_maps[-1][batch.index, :, batch.slot, :HW]
        else:
            layer_feats = [f_c]
            attn = _dot_product_attention(f_c, fused, batch, cfg.heads)

        boxes = aux_boxes = None
        if want_boxes:
            feats = layer_feats if aux else layer_feats[-1:]
            aux_boxes = [self.rec_head(f[batch.index, batch.slot]) for f in feats]
            boxes = aux_boxes[-1]
        masks = None
        if want_masks:
            image_tokens = fused.f_vl[:, :HW].swapaxes(1, 2).reshape(B, cfg.dim, H, W)
            masks = self.res_head(attn, image_tokens, img.stages, batch.index)
        return ModelOutput(boxes, masks, attn, (H, W), aux_boxes if aux else None)

    def predict(self, batch: Batch) -> dict:
        out = self.forward(batch)
        return {"boxes": out.boxes.data.astype(np.float64), "masks": out.masks.data.astype(np.float64),
                "attn": out.attn.data, "grid": out.grid}

    # -- persistence

    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = {"model_config": self.cfg.to_dict()}
        meta.update(extra or {})
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path, expect: Optional[ModelConfig] = None) -> tuple["ReferringTransformer", dict]:
        arrays, meta = load_checkpoint(path)
        if "model_config" not in meta:
            raise ConfigMismatch(f"{path} has no model config")
        cfg = ModelConfig.from_dict(meta["model_config"])
        if expect is not None and expect != cfg:
            raise ConfigMismatch("checkpoint model config differs from the requested one")
        model = cls(cfg)
        try:
            model.load_state_dict(arrays)
        except (KeyError, ValueError) as exc:
            raise ConfigMismatch(str(exc)) from exc
        return model, meta


def _dot_product_attention(f_c: Tensor, fused: FusedFeatures, batch: Batch, heads: int) -> Tensor:
    """Phrase-to-pixel attention for the decoder-free ablation, ``(P, heads, HW)``."""
    H, W = fused.grid
    HW = H * W
    q = f_c[batch.index, batch.slot]
    keys = fused.f_vl[:, :HW][batch.index]
    P, C = q.shape
    scores = (keys @ q.reshape(P, C, 1)).reshape(P, 1, HW) * (1.0 / math.sqrt(C))
    attn = nx.softmax(scores, axis=-1)
    return nx.concat([attn] * heads, axis=1)
