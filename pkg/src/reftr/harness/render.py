"""Decoder attention heatmaps and prediction overlays as netpbm files."""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

from ..errors import IoError
from ..heads import box_to_corners
from ..model import ReferringTransformer, collate
from ..shapes_world.io import encode_pgm, encode_ppm


def attention_heatmap(attn: np.ndarray, grid: tuple[int, int], size: tuple[int, int]) -> np.ndarray:
    """Head-averaged ``(heads, HW)`` attention to a ``uint8`` map of ``size``, max mapped to 255."""
    H, W = grid
    heat = np.asarray(attn, dtype=np.float64).mean(axis=0).reshape(H, W)
    up = ndimage.zoom(heat, (size[0] / H, size[1] / W), order=1, grid_mode=True, mode="nearest")
    up = np.clip(up, 0.0, None)
    peak = up.max()
    if peak <= 0:
        return np.zeros(size, dtype=np.uint8)
    return np.round(up / peak * 255.0).astype(np.uint8)


def heat_overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Blend a red/yellow heat ramp over a grayscale copy of ``image`` ``(3, H, W)``."""
    h = heat.astype(np.float64) / 255.0
    gray = image.mean(axis=0)
    ramp = np.stack([np.clip(2 * h, 0, 1), np.clip(2 * h - 1, 0, 1), np.zeros_like(h)])
    return (1 - alpha * h) * gray + alpha * h * ramp


def prediction_overlay(image: np.ndarray, box, mask_scores: np.ndarray) -> np.ndarray:
    """Tint the predicted mask (upsampled to image size) and draw the predicted box in green."""
    _, H, W = image.shape
    out = image.astype(np.float64).copy()
    mask = np.asarray(mask_scores) > 0.5
    fy, fx = H // mask.shape[0], W // mask.shape[1]
    mask = mask.repeat(fy, axis=0).repeat(fx, axis=1)
    out[:, mask] = 0.5 * out[:, mask] + 0.5 * np.array([0.0, 0.4, 1.0])[:, None]
    x0, y0, x1, y1 = box_to_corners(box) * np.array([W, H, W, H])
    c0, c1 = int(np.clip(np.floor(x0), 0, W - 1)), int(np.clip(np.ceil(x1) - 1, 0, W - 1))
    r0, r1 = int(np.clip(np.floor(y0), 0, H - 1)), int(np.clip(np.ceil(y1) - 1, 0, H - 1))
    green = np.array([0.0, 1.0, 0.0])[:, None]
    out[:, r0, c0:c1 + 1] = green
    out[:, r1, c0:c1 + 1] = green
    out[:, r0:r1 + 1, c0] = green
    out[:, r0:r1 + 1, c1] = green
    return out


def render_attention(model_or_path: Union[ReferringTransformer, str, Path], sample, out_dir,
                     prefix: str = "") -> list[Path]:
    """Write, per phrase, the last-layer attention heatmap (PGM), its overlay
    on the image (PPM) and the predicted box/mask overlay (PPM)."""
    model = model_or_path if isinstance(model_or_path, ReferringTransformer) else \
        ReferringTransformer.load(model_or_path)[0]
    batch = collate([sample], model.vocab, model.cfg.max_text_len, with_targets=False)
    pred = model.predict(batch)
    image = np.asarray(sample.image, dtype=np.float64)
    size = image.shape[-2:]
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(batch.num_phrases):
            heat = attention_heatmap(pred["attn"][i], pred["grid"], size)
            files = {
                f"{prefix}attn_{i:02d}.pgm": encode_pgm(heat),
                f"{prefix}overlay_{i:02d}.ppm": encode_ppm(heat_overlay(image, heat)),
                f"{prefix}pred_{i:02d}.ppm": encode_ppm(prediction_overlay(image, pred["boxes"][i],
                                                                           pred["masks"][i])),
            }
            for name, data in files.items():
                (out / name).write_bytes(data)
                written.append(out / name)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return written


def attention_peak_inside(attn: np.ndarray, grid: tuple[int, int], size: tuple[int, int], box) -> bool:
    """Whether the heatmap's argmax pixel lies inside ``box`` (normalized)."""
    heat = attention_heatmap(attn, grid, size)
    r, c = np.unravel_index(int(np.argmax(heat)), heat.shape)
    x0, y0, x1, y1 = box_to_corners(box) * np.array([size[1], size[0], size[1], size[0]])
    return x0 <= c + 0.5 <= x1 and y0 <= r + 0.5 <= y1
