"""Training configuration, loaded from and saved to JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from ..errors import InvalidConfig
from ..heads import LOSS_MODES, LossWeights
from ..model import ModelConfig
from ..shapes_world.scene import SceneConfig

SCHEDULES = ("single", "two-phase")


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run.

    ``lr_backbone`` applies to the image and context encoders, ``lr_main``
    to everything else. ``schedule="two-phase"`` first trains the REC task
    alone with the auxiliary loss for ``phase1_epochs``, then switches to
    joint training without it. ``target_p_at_50``/``target_miou`` enable
    stopping once both validation targets are met; ``patience`` stops after
    that many epochs without improvement.
    """

    lr_main: float = 1e-4
    lr_backbone: float = 1e-5
    batch_size: int = 16
    epochs: int = 30
    mode: str = "joint"
    aux_loss: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    warmup_steps: int = 100
    lr_drop_epoch: Optional[int] = None
    augment: bool = True
    schedule: str = "single"
    phase1_epochs: int = 5
    seed: int = 0
    target_p_at_50: Optional[float] = None
    target_miou: Optional[float] = None
    patience: Optional[int] = None
    eval_batch_size: int = 64
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr_main <= 0 or self.lr_backbone <= 0:
            raise InvalidConfig("learning rates must be positive")
        if self.lr_backbone > self.lr_main:
            raise InvalidConfig(f"lr_backbone {self.lr_backbone} exceeds lr_main {self.lr_main}")
        if self.mode not in LOSS_MODES:
            raise InvalidConfig(f"mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.schedule not in SCHEDULES:
            raise InvalidConfig(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_batch_size < 1:
            raise InvalidConfig("batch sizes and epochs must be positive")
        if self.schedule == "two-phase" and not 0 < self.phase1_epochs < self.epochs:
            raise InvalidConfig("two-phase schedule needs 0 < phase1_epochs < epochs")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["loss"] = self.loss.to_dict()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown training config keys {sorted(unknown)}")
        d = dict(d)
        try:
            if "loss" in d:
                d["loss"] = LossWeights(**d["loss"])
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc

    def with_changes(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def with_model(self, **changes) -> "TrainConfig":
        return replace(self, model=replace(self.model, **changes))


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_dict(load_json(path))


def load_scene_config(path) -> SceneConfig:
    d = load_json(path)
    known = {f.name for f in fields(SceneConfig)}
    unknown = set(d) - known
    if unknown:
        raise InvalidConfig(f"unknown scene config keys {sorted(unknown)}")
    try:
        return SceneConfig(**d)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from exc


def config_json(cfg) -> str:
    return json.dumps(cfg.to_dict() if hasattr(cfg, "to_dict") else asdict(cfg), indent=2, sort_keys=True)
