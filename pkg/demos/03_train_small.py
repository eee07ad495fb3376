"""Train a reduced model for a few minutes, evaluate it and look at its attention.

The full toy recipe (configs/toy.json, 5000 scenes, 30 epochs) takes over an
hour on one core; this script shrinks data and width so the loop, the
metrics and the renderings can be seen quickly. Expect low precision.

    python demos/03_train_small.py [OUT_DIR]
"""
import logging
import sys
import tempfile
from pathlib import Path

from reftr.harness.config import TrainConfig
from reftr.harness.evaluate import evaluate
from reftr.harness.render import render_attention
from reftr.harness.train import train
from reftr.model import ModelConfig
from reftr.shapes_world import SceneConfig, generate_dataset

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())

scene = SceneConfig()
train_set = generate_dataset(scene, 400, seed=0)
val_set = generate_dataset(scene, 100, seed=0, split="val")

cfg = TrainConfig(lr_main=1e-3, lr_backbone=1e-3, epochs=10, grad_clip=0.0,
                  model=ModelConfig(dim=64, text_dim=32, heads=4, dec_layers=2))
result = train(cfg, train_set, val_set, out / "run")
print(f"best epoch {result.best_epoch}, {result.wall_time:.0f}s; log at {result.log_path}")

report = evaluate(result.best_checkpoint, val_set)
print(f"val P@0.5 {report.p_at_50:.3f}  mIoU {report.miou:.3f}  IE {report.ie:.3f}")

# Per phrase: the decoder's last-layer attention, its overlay, and the predicted box and mask.
files = render_attention(result.best_checkpoint, val_set[0], out / "attention")
print(f"{val_set[0].sentence!r}: wrote {len(files)} files to {out / 'attention'}")
