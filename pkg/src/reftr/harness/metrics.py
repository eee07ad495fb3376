"""Grounding metrics: box precision, mask IoU, box/mask inconsistency, chance rate."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import LengthMismatch
from ..heads import iou
from ..shapes_world.render import mask_tight_box, object_box

MASK_THRESHOLD = 0.5


def box_hits(pred_boxes, gt_boxes, iou_thresh: float = 0.5) -> np.ndarray:
    """Per-phrase correctness: IoU strictly above ``iou_thresh``."""
    return np.asarray(iou(np.asarray(pred_boxes), np.asarray(gt_boxes))) > iou_thresh


def mask_iou(pred_scores, gt_masks, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Per-map IoU of thresholded scores vs a binary mask; two empty masks score 1."""
    pred = np.asarray(pred_scores) > threshold
    gt = np.asarray(gt_masks, dtype=bool)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    axes = tuple(range(1, pred.ndim))
    inter = (pred & gt).sum(axis=axes)
    union = (pred | gt).sum(axis=axes)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def inconsistent(boxes: Sequence, masks: Sequence, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Per-phrase flag: box disagrees with the tight box of its thresholded mask.

    Works at any mask resolution since boxes are normalized.
    """
    if len(boxes) != len(masks):
        raise LengthMismatch(f"{len(boxes)} boxes but {len(masks)} masks")
    flags = np.zeros(len(boxes), dtype=bool)
    for i, (box, mask) in enumerate(zip(boxes, masks)):
        tight = mask_tight_box(np.asarray(mask) > threshold)
        flags[i] = tight is None or iou(np.asarray(box), tight) < 0.5
    return flags


def inconsistency_error(boxes: Sequence, masks: Sequence, threshold: float = MASK_THRESHOLD) -> float:
    if len(boxes) != len(masks):
        raise LengthMismatch(f"{len(boxes)} boxes but {len(masks)} masks")
    if len(boxes) == 0:
        return 0.0
    return float(inconsistent(boxes, masks, threshold).mean())


def chance_rate(samples, iou_thresh: float = 0.5) -> float:
    """Expected P@0.5 of guessing a uniformly random object of the scene per phrase."""
    scores = []
    for s in samples:
        size = s.image.shape[-1]
        obj_boxes = np.stack([object_box(o, size) for o in s.objects])
        for gt in np.asarray(s.boxes):
            scores.append(float(np.mean(iou(obj_boxes, gt[None]) > iou_thresh)))
    return float(np.mean(scores)) if scores else 0.0
