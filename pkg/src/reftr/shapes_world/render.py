"""Anti-aliased rasterisation of scene objects."""
from __future__ import annotations

import numpy as np

from .scene import BACKGROUND, COLORS, SceneObject

SUPERSAMPLE = 4
# coverage threshold for the binary masks; 1/4 keeps triangle tips inside the
# one-pixel tolerance between mask tight box and geometric box
MASK_COVERAGE = 0.25


def _subpixel_grid(height: int, width: int):
    off = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    xs = (np.arange(width)[:, None] + off[None]).reshape(-1)
    ys = (np.arange(height)[:, None] + off[None]).reshape(-1)
    return np.meshgrid(xs, ys)


def coverage(obj: SceneObject, height: int, width: int) -> np.ndarray:
    """Fraction of each pixel covered by ``obj``, shape ``(height, width)``."""
    x0, y0, x1, y1 = obj.extent()
    # rasterise only the bounding window
    c0, c1 = max(0, int(np.floor(x0)) - 1), min(width, int(np.ceil(x1)) + 1)
    r0, r1 = max(0, int(np.floor(y0)) - 1), min(height, int(np.ceil(y1)) + 1)
    out = np.zeros((height, width))
    if c0 >= c1 or r0 >= r1:
        return out
    X, Y = _subpixel_grid(r1 - r0, c1 - c0)
    X = X + c0
    Y = Y + r0
    if obj.kind == "circle":
        inside = (X - obj.cx) ** 2 + (Y - obj.cy) ** 2 <= obj.radius ** 2
    else:
        v = obj.vertices()
        inside = np.ones_like(X, dtype=bool)
        for i in range(len(v)):
            (ax, ay), (bx, by) = v[i], v[(i + 1) % len(v)]
            inside &= (bx - ax) * (Y - ay) - (by - ay) * (X - ax) >= 0
    h, w = r1 - r0, c1 - c0
    out[r0:r1, c0:c1] = inside.reshape(h, SUPERSAMPLE, w, SUPERSAMPLE).mean(axis=(1, 3))
    return out


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to 8-bit levels so images survive the PPM round trip bit-exactly."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0))


def render(objects: list[SceneObject], size: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``image (3,H,W) float32`` and per-object ``masks (K,H,W) bool``."""
    image = np.empty((3, size, size))
    image[:] = np.asarray(BACKGROUND)[:, None, None]
    masks = np.zeros((len(objects), size, size), dtype=bool)
    for k, obj in enumerate(objects):
        cov = coverage(obj, size, size)
        color = np.asarray(COLORS[obj.color])[:, None, None]
        image = image * (1.0 - cov) + color * cov
        masks[k] = cov >= MASK_COVERAGE
    return quantize(image), masks


def object_box(obj: SceneObject, size: int) -> np.ndarray:
    """Normalized ``(cx, cy, h, w)`` of the visible part of ``obj``."""
    extent = obj.visible_extent(size)
    if extent is None:
        return np.array([0.5, 0.5, 0.0, 0.0])
    return box_from_extent(extent, size)


def box_from_extent(extent, size: int) -> np.ndarray:
    """Clip ``(x0, y0, x1, y1)`` to the image and return normalized ``(cx, cy, h, w)``."""
    x0, y0, x1, y1 = (float(np.clip(v, 0.0, size)) for v in extent)
    return np.array([(x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (y1 - y0) / size, (x1 - x0) / size])


def mask_tight_box(mask: np.ndarray) -> np.ndarray | None:
    """Normalized ``(cx, cy, h, w)`` of the set pixels, or None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    H, W = mask.shape
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return np.array([(x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (y1 - y0) / H, (x1 - x0) / W])


def downsample_mask(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    """Area-average ``factor x factor`` blocks of a binary mask, then threshold at 0.5."""
    *lead, H, W = mask.shape
    blocks = mask.reshape(*lead, H // factor, factor, W // factor, factor).mean(axis=(-3, -1))
    return blocks >= 0.5
