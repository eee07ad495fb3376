"""Dataset directories.

Layout::

    manifest.jsonl          one JSON object per sample
    images/NNNNNN.ppm       binary PPM (P6), 8-bit RGB
    masks/NNNNNN.rle        run-length encoded binary masks

Mask files are little-endian: ``b"RLEM"``, uint32 ``M``, ``H``, ``W``, then
for each mask a uint32 run count followed by that many uint32 run lengths.
Runs alternate starting with background (the first run may be empty).
Each manifest record carries the sha256 of its image and mask file bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import ChecksumMismatch, CorruptManifest, IoError
from .dataset import GroundingSample
from .scene import Description, Phrase, SceneObject

_MAGIC = b"RLEM"


# -- PPM / PGM ------------------------------------------------------------------

def encode_ppm(image: np.ndarray) -> bytes:
    """``image`` is ``(3, H, W)`` in [0, 1]."""
    _, H, W = image.shape
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{W} {H}\n255\n".encode() + data.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    """``gray`` is ``(H, W)`` uint8."""
    H, W = gray.shape
    return f"P5\n{W} {H}\n255\n".encode() + np.asarray(gray, dtype=np.uint8).tobytes()


def _parse_netpbm(raw: bytes, magic: bytes):
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptManifest("truncated netpbm header")
        fields.append(raw[start:pos])
    if fields[0] != magic:
        raise CorruptManifest(f"expected {magic!r} image, got {fields[0]!r}")
    W, H, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise CorruptManifest("only 8-bit netpbm files are supported")
    return W, H, raw[pos + 1:]


def decode_ppm(raw: bytes) -> np.ndarray:
    W, H, body = _parse_netpbm(raw, b"P6")
    if len(body) != H * W * 3:
        raise CorruptManifest("PPM pixel data has the wrong length")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


def decode_pgm(raw: bytes) -> np.ndarray:
    W, H, body = _parse_netpbm(raw, b"P5")
    if len(body) != H * W:
        raise CorruptManifest("PGM pixel data has the wrong length")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W).copy()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# -- RLE masks ----------------------------------------------------------------

def encode_masks(masks: np.ndarray) -> bytes:
    M, H, W = masks.shape
    parts = [_MAGIC, struct.pack("<III", M, H, W)]
    for m in masks:
        flat = m.reshape(-1).astype(np.int8)
        change = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        runs = np.diff(bounds)
        if flat.size and flat[0] == 1:
            runs = np.concatenate([[0], runs])
        parts.append(struct.pack("<I", len(runs)))
        parts.append(runs.astype("<u4").tobytes())
    return b"".join(parts)


def decode_masks(raw: bytes) -> np.ndarray:
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CorruptManifest("mask file header missing or damaged")
    M, H, W = struct.unpack("<III", raw[4:16])
    pos = 16
    out = np.zeros((M, H * W), dtype=bool)
    for k in range(M):
        if pos + 4 > len(raw):
            raise CorruptManifest("mask file truncated")
        (n,) = struct.unpack("<I", raw[pos:pos + 4])
        pos += 4
        if pos + 4 * n > len(raw):
            raise CorruptManifest("mask file truncated")
        runs = np.frombuffer(raw, dtype="<u4", count=n, offset=pos).astype(np.int64)
        pos += 4 * n
        if runs.sum() != H * W:
            raise CorruptManifest("mask run lengths do not cover the image")
        ends = np.cumsum(runs)
        for start, stop in zip(ends[0::2], ends[1::2]):
            out[k, start:stop] = True
    if pos != len(raw):
        raise CorruptManifest("trailing bytes in mask file")
    return out.reshape(M, H, W)


# -- manifest -----------------------------------------------------------------

def _sample_record(i: int, s: GroundingSample, image_ref: str, mask_ref: str, digest: str) -> dict:
    return {
        "index": i,
        "sentence": s.sentence,
        "phrases": [{"text": p.text, "span": list(p.span), "target": p.target,
                     "description": p.description.to_dict()} for p in s.phrases],
        "boxes": [[float(v) for v in b] for b in s.boxes],
        "objects": [{"kind": o.kind, "color": o.color, "size": o.size, "cx": o.cx, "cy": o.cy,
                     "radius": o.radius, "angle": o.angle} for o in s.objects],
        "image": image_ref,
        "masks": mask_ref,
        "sha256": digest,
    }


def write_dataset(samples: list[GroundingSample], directory, meta: dict | None = None) -> str:
    """Write ``samples`` under ``directory``; returns the manifest sha256."""
    root = Path(directory)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        lines = []
        for i, s in enumerate(samples):
            image_ref, mask_ref = f"images/{i:06d}.ppm", f"masks/{i:06d}.rle"
            img_bytes, mask_bytes = encode_ppm(s.image), encode_masks(s.masks)
            (root / image_ref).write_bytes(img_bytes)
            (root / mask_ref).write_bytes(mask_bytes)
            digest = hashlib.sha256(img_bytes + mask_bytes).hexdigest()
            lines.append(json.dumps(_sample_record(i, s, image_ref, mask_ref, digest), sort_keys=True))
        manifest = ("\n".join(lines) + "\n").encode()
        (root / "manifest.jsonl").write_bytes(manifest)
        if meta is not None:
            (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return hashlib.sha256(manifest).hexdigest()


def manifest_hash(directory) -> str:
    return hashlib.sha256((Path(directory) / "manifest.jsonl").read_bytes()).hexdigest()


def read_dataset(directory, verify: bool = True) -> list[GroundingSample]:
    root = Path(directory)
    try:
        text = (root / "manifest.jsonl").read_text()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    samples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            img_bytes = (root / rec["image"]).read_bytes()
            mask_bytes = (root / rec["masks"]).read_bytes()
        except (json.JSONDecodeError, KeyError) as exc:
            raise CorruptManifest(f"manifest line {lineno}: {exc}") from exc
        except OSError as exc:
            raise IoError(str(exc)) from exc
        masks = decode_masks(mask_bytes)
        image = decode_ppm(img_bytes)
        if verify and hashlib.sha256(img_bytes + mask_bytes).hexdigest() != rec["sha256"]:
            raise ChecksumMismatch(f"manifest line {lineno}: file contents do not match sha256")
        phrases = [Phrase(p["text"], tuple(p["span"]), int(p["target"]), Description.from_dict(p["description"]))
                   for p in rec["phrases"]]
        if len(phrases) != masks.shape[0]:
            raise CorruptManifest(f"manifest line {lineno}: {len(phrases)} phrases but {masks.shape[0]} masks")
        samples.append(GroundingSample(
            image=image,
            sentence=rec["sentence"],
            phrases=phrases,
            boxes=np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
            masks=masks,
            objects=[SceneObject(**o) for o in rec["objects"]],
        ))
    return samples


def dataset_exists(directory) -> bool:
    return os.path.exists(Path(directory) / "manifest.jsonl")
