"""Photometric jitter and small similarity transforms.

There is deliberately no horizontal flip: it would turn "left of" phrases
into false statements.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import affine_transform

from .dataset import GroundingSample
from .render import object_box, quantize
from .scene import BACKGROUND, SceneObject


@dataclass(frozen=True)
class AugmentParams:
    brightness: float = 1.0
    saturation: float = 1.0
    rotation_deg: float = 0.0
    scale: float = 1.0
    shift_x: float = 0.0  # fraction of width
    shift_y: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self == AugmentParams()

    @property
    def is_geometric_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.scale == 1.0 and self.shift_x == 0.0 and self.shift_y == 0.0


def sample_params(rng: np.random.Generator, max_rotation: float = 10.0, max_shift: float = 0.05,
                  scale_range=(0.9, 1.1), jitter: float = 0.2) -> AugmentParams:
    return AugmentParams(
        brightness=float(rng.uniform(1 - jitter, 1 + jitter)),
        saturation=float(rng.uniform(1 - jitter, 1 + jitter)),
        rotation_deg=float(rng.uniform(-max_rotation, max_rotation)),
        scale=float(rng.uniform(*scale_range)),
        shift_x=float(rng.uniform(-max_shift, max_shift)),
        shift_y=float(rng.uniform(-max_shift, max_shift)),
    )


def _forward_point(x: float, y: float, p: AugmentParams, size: int) -> tuple[float, float]:
    c = size / 2.0
    t = math.radians(p.rotation_deg)
    dx, dy = x - c, y - c
    return (c + p.scale * (math.cos(t) * dx - math.sin(t) * dy) + p.shift_x * size,
            c + p.scale * (math.sin(t) * dx + math.cos(t) * dy) + p.shift_y * size)


def transform_object(obj: SceneObject, p: AugmentParams, size: int) -> SceneObject:
    cx, cy = _forward_point(obj.cx, obj.cy, p, size)
    return replace(obj, cx=cx, cy=cy, radius=obj.radius * p.scale, angle=obj.angle + math.radians(p.rotation_deg))


def _warp(channel: np.ndarray, p: AugmentParams, fill: float, order: int) -> np.ndarray:
    # affine_transform maps output index -> input index; index i sits at i + 0.5
    size = channel.shape[0]
    c = size / 2.0 - 0.5
    t = math.radians(p.rotation_deg)
    # forward in (row, col): [dy', dx'] = s [[cos, sin], [-sin, cos]] [dy, dx]
    inv = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]) / p.scale
    shift = np.array([p.shift_y * size, p.shift_x * size])
    center = np.array([c, c])
    offset = center - inv @ (center + shift)
    return affine_transform(channel, inv, offset=offset, order=order, mode="constant", cval=fill)


def apply_augmentation(sample: GroundingSample, p: AugmentParams) -> GroundingSample:
    if p.is_identity:
        return sample
    size = sample.image.shape[-1]
    image = sample.image.astype(np.float64)
    masks = sample.masks
    objects = sample.objects
    boxes = sample.boxes
    if not p.is_geometric_identity:
        image = np.stack([_warp(image[ch], p, BACKGROUND[ch], order=1) for ch in range(3)])
        masks = np.stack([_warp(m.astype(np.float64), p, 0.0, order=1) >= 0.5 for m in sample.masks])
        objects = [transform_object(o, p, size) for o in sample.objects]
        boxes = np.stack([object_box(objects[ph.target], size) for ph in sample.phrases])
    gray = image.mean(axis=0, keepdims=True)
    image = (gray + p.saturation * (image - gray)) * p.brightness
    return sample.replace(image=quantize(image), masks=masks, objects=objects, boxes=boxes)


def augment(sample: GroundingSample, rng: np.random.Generator, **kwargs) -> GroundingSample:
    return apply_augmentation(sample, sample_params(rng, **kwargs))
