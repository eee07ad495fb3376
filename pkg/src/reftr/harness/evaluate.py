"""Batched inference and the evaluation report."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import EmptyDataset
from ..model import MASK_STRIDE, ModelConfig, ReferringTransformer, collate
from ..shapes_world.render import downsample_mask
from .metrics import MASK_THRESHOLD, box_hits, inconsistent, mask_iou


@dataclass
class EvalReport:
    p_at_50: float
    miou: float
    ie: float
    num_phrases: int
    wall_time: float
    per_sample: list = field(default_factory=list)

    def to_dict(self, with_samples: bool = True) -> dict:
        d = asdict(self)
        if not with_samples:
            d.pop("per_sample")
        return d

    def metrics(self) -> dict:
        return {"p_at_50": self.p_at_50, "miou": self.miou, "ie": self.ie}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def predict_dataset(model: ReferringTransformer, samples: Sequence, batch_size: int = 64) -> list[dict]:
    """Per-sample predictions ``{"boxes", "masks", "attn"}`` in dataset order."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = collate(chunk, model.vocab, model.cfg.max_text_len, with_targets=False)
        pred = model.predict(batch)
        for b in range(len(chunk)):
            rows = batch.index == b
            out.append({"boxes": pred["boxes"][rows], "masks": pred["masks"][rows], "attn": pred["attn"][rows],
                        "grid": pred["grid"]})
    return out


def _load(model_or_path, expect: Optional[ModelConfig]) -> ReferringTransformer:
    if isinstance(model_or_path, ReferringTransformer):
        return model_or_path
    model, _ = ReferringTransformer.load(model_or_path, expect)
    return model


def evaluate(model_or_path: Union[ReferringTransformer, str, Path], samples: Sequence, iou_thresh: float = 0.5,
             expect: Optional[ModelConfig] = None, batch_size: int = 64) -> EvalReport:
    """P@0.5, mask mIoU at quarter resolution, and inconsistency error.

    ``expect`` guards against evaluating a checkpoint built for another
    configuration (``ConfigMismatch``).
    """
    if len(samples) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    start = time.perf_counter()
    model = _load(model_or_path, expect)
    preds = predict_dataset(model, samples, batch_size)
    report = evaluate_predictions(samples, [p["boxes"] for p in preds], [p["masks"] for p in preds], iou_thresh)
    report.wall_time = time.perf_counter() - start
    return report


def evaluate_predictions(samples: Sequence, boxes: Sequence, masks: Sequence, iou_thresh: float = 0.5) -> EvalReport:
    """Score per-sample predictions: boxes ``(M, 4)`` and mask scores ``(M, h, w)``.

    Masks may come at quarter resolution (what the model emits) or any finer
    integer multiple, e.g. full-resolution ground truth fed as an oracle.
    mIoU is always taken at quarter resolution; IE at the given one.
    """
    if len(samples) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    start = time.perf_counter()
    records, hits, ious, flags = [], [], [], []
    for i, (s, b, m) in enumerate(zip(samples, boxes, masks)):
        gt_masks = np.stack([downsample_mask(x, MASK_STRIDE) for x in s.masks])
        h = box_hits(b, s.boxes, iou_thresh)
        mi = mask_iou(_to_grid(np.asarray(m), gt_masks.shape[-2:]), gt_masks)
        f = inconsistent(b, m)
        records.append({"index": i, "box_correct": h.tolist(), "mask_iou": mi.tolist(), "inconsistent": f.tolist()})
        hits.append(h)
        ious.append(mi)
        flags.append(f)
    hits, ious, flags = np.concatenate(hits), np.concatenate(ious), np.concatenate(flags)
    return EvalReport(float(hits.mean()), float(ious.mean()), float(flags.mean()), int(hits.size),
                      time.perf_counter() - start, records)


def _to_grid(scores: np.ndarray, grid) -> np.ndarray:
    """Threshold finer score maps and downsample them with the ground-truth rule."""
    factor = scores.shape[-1] // grid[-1]
    if scores.shape[-2:] == tuple(grid) or factor < 1 or scores.shape[-1] != factor * grid[-1]:
        return scores
    return downsample_mask(scores > MASK_THRESHOLD, factor).astype(np.float64)
