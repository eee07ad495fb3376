from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .render import object_box, render
from .scene import Phrase, SceneConfig, SceneObject, compose_scene

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


@dataclass
class GroundingSample:
    """One image with a sentence and M referring phrases.

    ``boxes`` is ``(M, 4)`` normalized ``(cx, cy, h, w)``; ``masks`` is
    ``(M, H, W)`` bool at full resolution. ``objects`` keeps the scene
    geometry the generator drew, which augmentation and the matcher use.
    """

    image: np.ndarray
    sentence: str
    phrases: list[Phrase]
    boxes: np.ndarray
    masks: np.ndarray
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def num_phrases(self) -> int:
        return len(self.phrases)

    @property
    def spans(self) -> list[tuple[int, int]]:
        return [p.span for p in self.phrases]

    def scene_hash(self) -> str:
        h = hashlib.sha256(self.image.tobytes())
        h.update(self.sentence.encode())
        return h.hexdigest()

    def replace(self, **changes) -> "GroundingSample":
        return replace(self, **changes)


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> GroundingSample:
    scene = compose_scene(cfg, rng)
    image, object_masks = render(scene.objects, cfg.image_size)
    targets = [p.target for p in scene.phrases]
    boxes = np.stack([object_box(scene.objects[t], cfg.image_size) for t in targets])
    return GroundingSample(
        image=image,
        sentence=scene.sentence,
        phrases=scene.phrases,
        boxes=boxes,
        masks=object_masks[targets],
        objects=scene.objects,
    )


def sample_rng(base_seed: int, index: int, split: str = "train") -> np.random.Generator:
    """Independent stream per (seed, split, index); splits never share a stream."""
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), SPLIT_IDS[split], int(index)]))


def generate_dataset(cfg: SceneConfig, count: int, seed: int | None = None,
                     split: str = "train") -> list[GroundingSample]:
    seed = cfg.seed if seed is None else seed
    return [generate_scene(cfg, sample_rng(seed, i, split)) for i in range(count)]
