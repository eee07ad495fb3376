"""Box and mask heads, box geometry, and the detection/segmentation losses.

Boxes are ``(cx, cy, h, w)`` in normalized image coordinates throughout.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ModeUnknown, ShapeMismatch
from .numerics import Conv2d, MLP, Module, Tensor

LOSS_MODES = ("rec_only", "res_only", "joint")
FOCAL_CLAMP = 1e-6


# ---------------------------------------------------------------------------
# box geometry on plain arrays


def box_to_corners(box) -> np.ndarray:
    """``(..., 4)`` centre/size boxes to ``(x0, y0, x1, y1)``."""
    b = np.asarray(box, dtype=np.float64)
    cx, cy, h, w = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def corners_to_box(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    x0, y0, x1, y1 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, y1 - y0, x1 - x0], axis=-1)


def _overlap_terms(a, b):
    ca, cb = box_to_corners(a), box_to_corners(b)
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    hull = ((np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0]))
            * (np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])))
    return inter, union, hull


def iou(a, b) -> np.ndarray:
    """Box IoU, broadcasting over leading dims. Zero-area unions give 0."""
    inter, union, _ = _overlap_terms(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out if out.ndim else float(out)


def giou(a, b) -> np.ndarray:
    inter, union, hull = _overlap_terms(a, b)
    safe_u = np.where(union > 0, union, 1.0)
    safe_h = np.where(hull > 0, hull, 1.0)
    out = np.where(union > 0, inter / safe_u - (hull - union) / safe_h, 0.0)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# differentiable box geometry


def _cols(box: Tensor):
    return box[..., 0], box[..., 1], box[..., 2], box[..., 3]


def giou_tensor(pred, target) -> Tensor:
    """GIoU over the last axis; either argument may be a constant array."""
    pred = nx.as_tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=pred.dtype)
    pcx, pcy, ph, pw = _cols(pred)
    tcx, tcy, th, tw = _cols(target)
    px0, px1, py0, py1 = pcx - pw * 0.5, pcx + pw * 0.5, pcy - ph * 0.5, pcy + ph * 0.5
    tx0, tx1, ty0, ty1 = tcx - tw * 0.5, tcx + tw * 0.5, tcy - th * 0.5, tcy + th * 0.5
    iw = nx.relu(nx.minimum(px1, tx1) - nx.maximum(px0, tx0))
    ih = nx.relu(nx.minimum(py1, ty1) - nx.maximum(py0, ty0))
    inter = iw * ih
    union = ph * pw + th * tw - inter
    hull = (nx.maximum(px1, tx1) - nx.minimum(px0, tx0)) * (nx.maximum(py1, ty1) - nx.minimum(py0, ty0))
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    lambda_focal: float = 1.0
    lambda_dice: float = 1.0

    def __post_init__(self):
        vals = list(asdict(self).values())
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be nonnegative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("loss weights cannot all be zero")

    def to_dict(self) -> dict:
        return asdict(self)


def _reduce(per_item: Tensor, weights: Optional[np.ndarray]) -> Tensor:
    """Mean over items, or a weighted sum when ``weights`` is given."""
    if weights is None:
        return per_item.mean()
    return (per_item * np.asarray(weights, dtype=per_item.dtype)).sum()


def rec_loss(target, pred, w: LossWeights = LossWeights(), weights: Optional[np.ndarray] = None) -> Tensor:
    """``λ_iou (1 - GIoU) + λ_L1 |b - b̃|_1`` per phrase, averaged over phrases.

    ``target`` and ``pred`` are ``(M, 4)`` (or any ``(..., 4)``); ``weights``
    replaces the plain mean with a weighted sum over the leading dims.
    """
    pred = nx.as_tensor(pred)
    target_t = target if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=pred.dtype)
    per = nx.abs_(pred - target_t).sum(axis=-1) * w.lambda_l1
    if w.lambda_iou:
        per = per + (1.0 - giou_tensor(pred, target_t)) * w.lambda_iou
    return _reduce(per, weights)


def focal_loss(target, pred, alpha: float = 0.25, gamma: float = 2.0,
               weights: Optional[np.ndarray] = None) -> Tensor:
    """Pixel-mean focal loss per map, then averaged over maps.

    A 2-d input is one map; a 3-d input ``(M, H, W)`` is M maps.
    """
    pred = nx.as_tensor(pred)
    s = np.asarray(target, dtype=pred.dtype)
    if s.shape != pred.shape:
        raise ShapeMismatch(f"mask {s.shape} vs prediction {pred.shape}")
    p = nx.clip(pred, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    p_t = p * s + (1.0 - p) * (1.0 - s)
    alpha_t = (alpha * s + (1.0 - alpha) * (1.0 - s)).astype(pred.dtype)
    per_px = -(nx.log(p_t) * alpha_t)
    if gamma:
        per_px = per_px * nx.power(1.0 - p_t, gamma)
    if pred.ndim <= 2:
        return per_px.mean()
    return _reduce(per_px.mean(axis=tuple(range(1, pred.ndim))), weights)


def dice_loss(target, pred, eps: float = 1.0, weights: Optional[np.ndarray] = None) -> Tensor:
    pred = nx.as_tensor(pred)
    s = np.asarray(target, dtype=pred.dtype)
    if s.shape != pred.shape:
        raise ShapeMismatch(f"mask {s.shape} vs prediction {pred.shape}")
    if pred.ndim <= 2:
        return 1.0 - ((pred * s).sum() * 2.0 + eps) / (pred.sum() + (float(s.sum()) + eps))
    axes = tuple(range(1, pred.ndim))
    num = (pred * s).sum(axis=axes) * 2.0 + eps
    den = pred.sum(axis=axes) + Tensor(s.sum(axis=axes) + eps, dtype=pred.dtype)
    return _reduce(1.0 - num / den, weights)


def seg_loss(target, pred, w: LossWeights = LossWeights(), alpha: float = 0.25, gamma: float = 2.0,
             weights: Optional[np.ndarray] = None) -> Tensor:
    loss = focal_loss(target, pred, alpha, gamma, weights) * w.lambda_focal
    if w.lambda_dice:
        loss = loss + dice_loss(target, pred, weights=weights) * w.lambda_dice
    return loss


@dataclass
class LossBreakdown:
    total: Tensor
    det: float
    seg: float


def total_loss(gt: dict, preds: dict, w: LossWeights = LossWeights(), mode: str = "joint",
               weights: Optional[np.ndarray] = None) -> LossBreakdown:
    """``gt`` holds ``boxes`` and ``masks``; ``preds`` holds ``boxes`` (a Tensor
    or a list of per-layer Tensors for the auxiliary loss) and ``masks``.

    Single-task modes skip the other head's term entirely.
    """
    if mode not in LOSS_MODES:
        raise ModeUnknown(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    terms = []
    det = seg = 0.0
    if mode in ("rec_only", "joint"):
        layers = preds["boxes"] if isinstance(preds["boxes"], (list, tuple)) else [preds["boxes"]]
        for boxes in layers:
            terms.append(rec_loss(gt["boxes"], boxes, w, weights))
        det = float(sum(t.item() for t in terms))
    if mode in ("res_only", "joint"):
        s = seg_loss(gt["masks"], preds["masks"], w, weights=weights)
        seg = s.item()
        terms.append(s)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossBreakdown(total, det, seg)


# ---------------------------------------------------------------------------
# heads


class RecHead(Module):
    """Two-layer perceptron to four sigmoid-bounded box coordinates."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.mlp = MLP(dim, dim, 4, rng)

    def forward(self, decoded: Tensor) -> Tensor:
        return nx.sigmoid(self.mlp(decoded))


def rec_head(head: RecHead, decoded: Tensor) -> Tensor:
    return head(decoded)


class ResHead(Module):
    """FPN-style mask head at a quarter of the input resolution.

    Per phrase, the ``heads`` attention maps over the image grid are stacked
    with the fused image features, then refined by two blocks of
    [nearest upsample x2, add projected backbone skip, conv3x3, relu]. The
    second block overshoots to half resolution, so an average pool brings
    the map to quarter resolution before the 1x1 scoring conv.

    Attention rows are multiplied by the grid size so a uniform map is 1.
    """

    def __init__(self, dim: int, heads: int, stage_channels: Sequence[int], rng: np.random.Generator,
                 widths: Sequence[int] = (32, 16, 16)):
        c1, c2 = stage_channels[0], stage_channels[1]
        w0, w1, w2 = widths
        self.heads = heads
        self.conv_in = Conv2d(heads + dim, w0, 3, rng)
        self.skip2 = Conv2d(c2, w0, 1, rng)
        self.conv2 = Conv2d(w0, w1, 3, rng)
        self.skip1 = Conv2d(c1, w1, 1, rng)
        self.conv1 = Conv2d(w1, w2, 3, rng)
        self.score = Conv2d(w2, 1, 1, rng)

    def forward(self, attn: Tensor, image: Tensor, stages: Sequence[Tensor],
                index: Optional[np.ndarray] = None) -> Tensor:
        """``attn`` ``(P, heads, HW)``; ``image`` ``(B, C, H, W)``; ``stages``
        the backbone maps ``(B, C_s, H_s, W_s)``; ``index[p]`` is the sample
        of phrase ``p``. Returns ``(P, 4H, 4W)`` scores in (0, 1)."""
        if image.ndim == 3:
            image = image.reshape((1,) + image.shape)
            stages = [s.reshape((1,) + s.shape) if s.ndim == 3 else s for s in stages]
        B, C, H, W = image.shape
        P = attn.shape[0]
        if attn.shape[1:] != (self.heads, H * W):
            raise ShapeMismatch(f"attention {attn.shape} does not match {self.heads} heads on a {H}x{W} grid")
        if stages[1].shape[-2:] != (2 * H, 2 * W) or stages[0].shape[-2:] != (4 * H, 4 * W):
            raise ShapeMismatch(
                f"skip resolutions {stages[0].shape[-2:]}, {stages[1].shape[-2:]} do not match grid {H}x{W}")
        index = np.zeros(P, dtype=np.int64) if index is None else np.asarray(index, dtype=np.int64)
        a = (attn * float(H * W)).reshape(P, self.heads, H, W)
        x = nx.concat([a, image[index]], axis=1)
        x = nx.relu(self.conv_in(x))
        x = nx.upsample2x_nearest(x) + self.skip2(stages[1])[index]
        x = nx.relu(self.conv2(x))
        x = nx.upsample2x_nearest(x) + self.skip1(stages[0])[index]
        x = nx.relu(self.conv1(x))
        x = nx.avgpool2x(x)
        return nx.sigmoid(self.score(x)).reshape(P, 2 * H, 2 * W)


def res_head(head: ResHead, attn_last: Tensor, f_vl_img: Tensor, stages: Sequence[Tensor]) -> Tensor:
    """Single-sample form: ``attn_last`` ``(M, heads, HW)``, ``f_vl_img`` ``(C, HW)``."""
    C, HW = f_vl_img.shape
    H, W = stages[-1].shape[-2:]
    return head(attn_last, f_vl_img.reshape(1, C, H, W), stages)
