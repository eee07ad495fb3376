"""Scene sampling, referring-phrase composition and the attribute matcher.

Coordinates are continuous pixels with x to the right and y down; pixel
``(row, col)`` covers ``[col, col+1) x [row, row+1)``.

Spatial relations use a 90-degree cone: ``A left of B`` holds when the
offset ``B - A`` satisfies ``dx > |dy|``. The generator only emits a
relation when the target sits at least ``REL_MARGIN_DEG`` inside the cone
and every same-looking distractor sits at least that far outside it, so the
meaning survives the small rotations applied during augmentation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..errors import GenerationFailed

KINDS = ("circle", "square", "triangle")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "purple": (0.60, 0.20, 0.80),
    "orange": (1.00, 0.55, 0.05),
    "cyan": (0.10, 0.85, 0.90),
    "white": (0.98, 0.98, 0.98),
}
SIZES = ("small", "big")
RELATIONS = {"left": ("left", "of"), "right": ("right", "of"), "above": ("above",), "below": ("below",)}
BACKGROUND = (0.25, 0.25, 0.25)
REL_MARGIN_DEG = 12.0

VOCAB = ["<pad>", "<unk>", "the", "and", "of", ",", "."] + list(SIZES) + list(COLORS) + list(KINDS) + [
    "left", "right", "above", "below"]
PAD_ID, UNK_ID = 0, 1


@dataclass(frozen=True)
class SceneObject:
    kind: str
    color: str
    size: str
    cx: float
    cy: float
    radius: float
    angle: float = 0.0

    def vertices(self) -> np.ndarray:
        if self.kind == "square":
            ang = np.deg2rad([45.0, 135.0, 225.0, 315.0]) + self.angle
            rad = self.radius * math.sqrt(2.0)
        elif self.kind == "triangle":
            ang = np.deg2rad([-90.0, 30.0, 150.0]) + self.angle
            rad = self.radius * 1.15
        else:
            raise ValueError("circles have no vertices")
        return np.stack([self.cx + rad * np.cos(ang), self.cy + rad * np.sin(ang)], axis=1)

    def outline(self) -> np.ndarray:
        """Polygon outline; circles are approximated by a 256-gon."""
        if self.kind != "circle":
            return self.vertices()
        ang = np.linspace(0.0, 2.0 * math.pi, 256, endpoint=False)
        return np.stack([self.cx + self.radius * np.cos(ang), self.cy + self.radius * np.sin(ang)], axis=1)

    def visible_extent(self, size: int) -> Optional[tuple[float, float, float, float]]:
        """Extent of the part of the shape inside ``[0, size]^2``, or None if it left the frame."""
        poly = _clip_polygon(self.outline(), 0.0, float(size))
        if len(poly) == 0:
            return None
        return float(poly[:, 0].min()), float(poly[:, 1].min()), float(poly[:, 0].max()), float(poly[:, 1].max())

    def extent(self) -> tuple[float, float, float, float]:
        """Geometric (x0, y0, x1, y1), not clipped to the image."""
        if self.kind == "circle":
            r = self.radius
            return self.cx - r, self.cy - r, self.cx + r, self.cy + r
        v = self.vertices()
        return float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max())


def _clip_polygon(poly: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon to the square ``[lo, hi]^2``."""
    pts = [tuple(p) for p in poly]
    for axis, bound, keep_below in ((0, lo, False), (0, hi, True), (1, lo, False), (1, hi, True)):
        if not pts:
            break

        def inside(p):
            return p[axis] <= bound if keep_below else p[axis] >= bound

        out = []
        for i, cur in enumerate(pts):
            prev = pts[i - 1]
            if inside(cur) != inside(prev):
                t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            if inside(cur):
                out.append(cur)
        pts = out
    return np.asarray(pts, dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class Description:
    """Structured referring expression: ``the [size] [color] kind [relation the color kind]``."""

    kind: str
    color: Optional[str] = None
    size: Optional[str] = None
    relation: Optional[str] = None
    anchor_color: Optional[str] = None
    anchor_kind: Optional[str] = None

    def words(self) -> list[str]:
        w = ["the"]
        if self.size:
            w.append(self.size)
        if self.color:
            w.append(self.color)
        w.append(self.kind)
        if self.relation:
            w += list(RELATIONS[self.relation]) + ["the", self.anchor_color, self.anchor_kind]
        return w

    def text(self) -> str:
        return " ".join(self.words())

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "Description":
        return cls(**d)


@dataclass
class SceneConfig:
    image_size: int = 64
    min_shapes: int = 2
    max_shapes: int = 6
    max_phrases: int = 8
    kinds: tuple = KINDS
    colors: tuple = tuple(COLORS)
    small_radius: tuple = (5.0, 7.0)
    big_radius: tuple = (10.0, 13.0)
    use_size: bool = True
    use_relations: bool = True
    relation_rate: float = 0.3
    max_attempts: int = 100
    seed: int = 0

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.colors = tuple(self.colors)
        self.small_radius = tuple(self.small_radius)
        self.big_radius = tuple(self.big_radius)
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if not (self.use_size or self.use_relations) and self.max_shapes > len(self.kinds) * len(self.colors):
            raise ValueError("duplicate shapes need at least size or relation attributes enabled")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# matching


def _offset_angle(a: SceneObject, b: SceneObject, relation: str) -> float:
    """Angle in degrees between ``b - a`` and the direction that makes ``a <relation> b`` true."""
    dx, dy = b.cx - a.cx, b.cy - a.cy
    axis = {"left": (1.0, 0.0), "right": (-1.0, 0.0), "above": (0.0, 1.0), "below": (0.0, -1.0)}[relation]
    norm = math.hypot(dx, dy)
    if norm == 0:
        return 180.0
    cos = (dx * axis[0] + dy * axis[1]) / norm
    return math.degrees(math.acos(max(-1.0, min(1.0, cos))))


def relation_holds(a: SceneObject, b: SceneObject, relation: str) -> bool:
    """``a <relation> b`` with the canonical 90-degree cone."""
    dx, dy = b.cx - a.cx, b.cy - a.cy
    if relation == "left":
        return dx > abs(dy)
    if relation == "right":
        return -dx > abs(dy)
    if relation == "above":
        return dy > abs(dx)
    if relation == "below":
        return -dy > abs(dx)
    raise ValueError(f"unknown relation {relation!r}")


def _attrs_match(o: SceneObject, kind, color=None, size=None) -> bool:
    return o.kind == kind and (color is None or o.color == color) and (size is None or o.size == size)


def match(desc: Description, objects: list[SceneObject]) -> list[int]:
    """Indices of all objects satisfying ``desc`` (exhaustive, canonical predicates)."""
    anchors = []
    if desc.relation:
        anchors = [j for j, o in enumerate(objects) if _attrs_match(o, desc.anchor_kind, desc.anchor_color)]
    hits = []
    for i, o in enumerate(objects):
        if not _attrs_match(o, desc.kind, desc.color, desc.size):
            continue
        if desc.relation and not any(j != i and relation_holds(o, objects[j], desc.relation) for j in anchors):
            continue
        hits.append(i)
    return hits


def _robustly_unique(desc: Description, target: int, objects: list[SceneObject]) -> bool:
    """Target matches inside the margin and no other object comes close to matching."""
    if match(desc, objects) != [target]:
        return False
    if not desc.relation:
        return True
    anchors = [j for j, o in enumerate(objects) if _attrs_match(o, desc.anchor_kind, desc.anchor_color)]
    if len(anchors) != 1 or anchors[0] == target:
        return False
    anchor = objects[anchors[0]]
    if _offset_angle(objects[target], anchor, desc.relation) > 45.0 - REL_MARGIN_DEG:
        return False
    for i, o in enumerate(objects):
        if i in (target, anchors[0]) or not _attrs_match(o, desc.kind, desc.color, desc.size):
            continue
        if _offset_angle(o, anchor, desc.relation) < 45.0 + REL_MARGIN_DEG:
            return False
    return True


def describe(target: int, objects: list[SceneObject], cfg: SceneConfig,
             rng: np.random.Generator) -> Optional[Description]:
    """A random description that picks out ``objects[target]`` and nothing else."""
    t = objects[target]
    plain = [Description(t.kind), Description(t.kind, color=t.color)]
    if cfg.use_size:
        plain += [Description(t.kind, size=t.size), Description(t.kind, color=t.color, size=t.size)]
    relational = []
    if cfg.use_relations:
        for j, a in enumerate(objects):
            if j == target:
                continue
            for rel in RELATIONS:
                for color in (None, t.color):
                    relational.append(Description(t.kind, color=color, relation=rel,
                                                  anchor_color=a.color, anchor_kind=a.kind))
    plain = [d for d in plain if _robustly_unique(d, target, objects)]
    relational = [d for d in relational if _robustly_unique(d, target, objects)]
    prefer_rel = relational and (not plain or rng.random() < cfg.relation_rate)
    pool = relational if prefer_rel else plain
    if not pool:
        return None
    return pool[int(rng.integers(len(pool)))]


# ---------------------------------------------------------------------------
# placement


def _place_objects(cfg: SceneConfig, rng: np.random.Generator) -> Optional[list[SceneObject]]:
    size = cfg.image_size
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    objects: list[SceneObject] = []
    boxes = []
    for _ in range(n):
        for _try in range(50):
            kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
            color = cfg.colors[int(rng.integers(len(cfg.colors)))]
            sz = SIZES[int(rng.integers(2))] if cfg.use_size else "big"
            lo, hi = cfg.small_radius if sz == "small" else cfg.big_radius
            r = float(rng.uniform(lo, hi))
            angle = float(rng.uniform(-0.15, 0.15))
            probe = SceneObject(kind, color, sz, 0.0, 0.0, r, angle)
            x0, y0, x1, y1 = probe.extent()
            if x1 - x0 > size - 4 or y1 - y0 > size - 4:
                continue
            cx = float(rng.uniform(2 - x0, size - 2 - x1))
            cy = float(rng.uniform(2 - y0, size - 2 - y1))
            obj = SceneObject(kind, color, sz, cx, cy, r, angle)
            b = obj.extent()
            # bounding boxes kept at least 2 px apart, so pairwise IoU is 0
            if all(b[0] > o[2] + 2 or b[2] < o[0] - 2 or b[1] > o[3] + 2 or b[3] < o[1] - 2 for o in boxes):
                objects.append(obj)
                boxes.append(b)
                break
        else:
            return None
    return objects


@dataclass
class Phrase:
    text: str
    span: tuple[int, int]
    target: int
    description: Description


@dataclass
class Scene:
    objects: list[SceneObject]
    phrases: list[Phrase]
    sentence: str = ""
    tokens: list[str] = field(default_factory=list)


def compose_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    """Sample objects and referring phrases; raises GenerationFailed after ``max_attempts``."""
    for _ in range(cfg.max_attempts):
        objects = _place_objects(cfg, rng)
        if objects is None:
            continue
        m = int(rng.integers(1, min(len(objects), cfg.max_phrases) + 1))
        targets = rng.permutation(len(objects))[:m]
        descs = [describe(int(t), objects, cfg, rng) for t in targets]
        if any(d is None for d in descs):
            continue
        tokens: list[str] = []
        phrases = []
        for k, (t, d) in enumerate(zip(targets, descs)):
            if k:
                tokens.append("and")
            words = d.words()
            phrases.append(Phrase(" ".join(words), (len(tokens), len(tokens) + len(words)), int(t), d))
            tokens.extend(words)
        return Scene(objects, phrases, " ".join(tokens), tokens)
    raise GenerationFailed(f"no valid scene after {cfg.max_attempts} attempts")
