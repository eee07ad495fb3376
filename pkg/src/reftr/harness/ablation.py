"""Ablation suite: task-mode and query-feature variants trained with shared seeds."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from ..errors import InvalidConfig
from ..model import ReferringTransformer
from ..shapes_world.dataset import generate_dataset
from ..shapes_world.scene import SceneConfig
from .config import TrainConfig
from .evaluate import EvalReport, evaluate, evaluate_predictions, predict_dataset
from .metrics import chance_rate
from .train import train

log = logging.getLogger(__name__)

# variant -> (training-config changes, model-config changes)
VARIANTS: dict[str, tuple[dict, dict]] = {
    "joint": ({"mode": "joint"}, {}),
    "rec_only": ({"mode": "rec_only"}, {}),
    "res_only": ({"mode": "res_only"}, {}),
    "no_context": ({}, {"use_context": False}),
    "no_phrase": ({}, {"use_phrase": False}),
    "no_query_bias": ({}, {"use_query_bias": False}),
    "no_context_phrase": ({}, {"use_context": False, "use_phrase": False}),
    "no_decoder": ({}, {"use_decoder": False}),
}
PAIR_ROW = "rec_only+res_only"


@dataclass
class AblationSuite:
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    train_count: int = 5000
    val_count: int = 500
    data_seed: int = 0
    variants: tuple = tuple(VARIANTS)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSuite":
        d = dict(d)
        unknown = set(d) - {"train", "scene", "train_count", "val_count", "data_seed", "variants"}
        if unknown:
            raise InvalidConfig(f"unknown suite keys {sorted(unknown)}")
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "scene" in d:
            d["scene"] = SceneConfig(**d["scene"])
        if "variants" in d:
            bad = set(d["variants"]) - set(VARIANTS)
            if bad:
                raise InvalidConfig(f"unknown variants {sorted(bad)}")
            d["variants"] = tuple(d["variants"])
        return cls(**d)


@dataclass
class AblationRow:
    variant: str
    p_at_50: Optional[float]
    miou: Optional[float]
    ie: Optional[float]


@dataclass
class AblationTable:
    rows: list
    chance_p_at_50: float

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def to_markdown(self) -> str:
        lines = ["| variant | P@0.5 | mIoU | IE |", "|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r.variant} | {_cell(r.p_at_50)} | {_cell(r.miou)} | {_cell(r.ie)} |")
        lines.append("")
        lines.append(f"Chance P@0.5 (random object per phrase): {self.chance_p_at_50:.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["variant", "p_at_50", "miou", "ie"])
        for r in self.rows:
            w.writerow([r.variant, _cell(r.p_at_50), _cell(r.miou), _cell(r.ie)])
        return buf.getvalue()


def _cell(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.4f}"


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    train_changes, model_changes = VARIANTS[variant]
    cfg = base.with_changes(**train_changes) if train_changes else base
    return cfg.with_model(**model_changes) if model_changes else cfg


def train_variant(cfg: TrainConfig, train_set: Sequence, val_set: Sequence, out_dir,
                  reuse: bool = True) -> ReferringTransformer:
    """Train into ``out_dir`` unless a finished run with the same config is already there."""
    out = Path(out_dir)
    done = out / "done.json"
    if reuse and done.exists() and json.loads(done.read_text()).get("train_config") == cfg.to_dict():
        return ReferringTransformer.load(out / "best.ckpt")[0]
    result = train(cfg, train_set, val_set, out)
    model = ReferringTransformer.load(result.best_checkpoint)[0]
    done.write_text(json.dumps({"train_config": cfg.to_dict(), "best_epoch": result.best_epoch,
                                "wall_time": result.wall_time}))
    return model


def run_ablation(suite: AblationSuite, out_dir, train_set: Optional[Sequence] = None,
                 val_set: Optional[Sequence] = None, reuse: bool = True) -> AblationTable:
    """Train every variant with the suite's shared seeds and tabulate val metrics.

    Single-task rows leave the untrained head's metric empty; when both
    ``rec_only`` and ``res_only`` run, an extra row scores the pair's IE
    (boxes from one model, masks from the other).
    """
    out = Path(out_dir)
    if train_set is None:
        train_set = generate_dataset(suite.scene, suite.train_count, seed=suite.data_seed, split="train")
    if val_set is None:
        val_set = generate_dataset(suite.scene, suite.val_count, seed=suite.data_seed, split="val")
    rows, models = [], {}
    for variant in suite.variants:
        cfg = variant_config(suite.train, variant)
        log.info("ablation variant %s", variant)
        model = train_variant(cfg, train_set, val_set, out / variant, reuse)
        models[variant] = model
        rep: EvalReport = evaluate(model, val_set, batch_size=cfg.eval_batch_size)
        mode = cfg.mode
        rows.append(AblationRow(
            variant,
            None if mode == "res_only" else rep.p_at_50,
            None if mode == "rec_only" else rep.miou,
            rep.ie if mode == "joint" else None,
        ))
    if "rec_only" in models and "res_only" in models:
        boxes = [p["boxes"] for p in predict_dataset(models["rec_only"], val_set)]
        masks = [p["masks"] for p in predict_dataset(models["res_only"], val_set)]
        pair = evaluate_predictions(val_set, boxes, masks)
        rows.append(AblationRow(PAIR_ROW, pair.p_at_50, pair.miou, pair.ie))
    table = AblationTable(rows, chance_rate(val_set))
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(table.to_markdown())
    (out / "ablation.csv").write_text(table.to_csv())
    return table
