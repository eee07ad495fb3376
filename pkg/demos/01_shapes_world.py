"""A tour of the synthetic grounding data.

Every scene is a handful of coloured shapes. The sentence names some of
them with phrases that pick out exactly one object, sometimes through a
spatial relation ("the red square left of the cyan square"). Each phrase
comes with a box and a pixel mask.

    python demos/01_shapes_world.py [OUT_DIR]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from reftr.harness.metrics import chance_rate
from reftr.shapes_world import RELATIONS, SceneConfig, generate_dataset, read_dataset, write_dataset

cfg = SceneConfig()
samples = generate_dataset(cfg, 200, seed=0)

for s in samples[:3]:
    print(f"\n{s.sentence!r}  ({len(s.objects)} objects)")
    for phrase, box, mask in zip(s.phrases, s.boxes, s.masks):
        cx, cy, h, w = np.round(box, 3)
        print(f"  {phrase.text:45s} span={phrase.span} box=(cx {cx}, cy {cy}, h {h}, w {w}) "
              f"mask pixels={int(mask.sum())}")

phrases = [p for s in samples for p in s.phrases]
relational = np.mean([any(" " + " ".join(w) + " " in p.text for w in RELATIONS.values()) for p in phrases])
print(f"\n{len(samples)} scenes, {len(phrases)} phrases, {relational:.0%} relational")

# Guessing a random object per phrase: the floor a grounding model has to beat.
print(f"chance P@0.5 of a random-object guess: {chance_rate(samples):.3f}")

# Datasets are plain files: PPM images, packed masks and a JSON-lines manifest.
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
digest = write_dataset(samples, out / "demo")
back = read_dataset(out / "demo")
same = all(np.array_equal(a.image, b.image) and np.array_equal(a.masks, b.masks) for a, b in zip(samples, back))
print(f"wrote {out / 'demo'} (manifest sha256 {digest[:12]}...), lossless reload: {same}")
