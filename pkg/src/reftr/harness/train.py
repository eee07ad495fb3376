"""The training loop: two-rate AdamW, per-epoch validation, CSV log, best checkpoint."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import DivergedLoss, EmptyDataset
from ..heads import total_loss
from ..model import ReferringTransformer, collate
from ..numerics import AdamW, Tape
from ..shapes_world.augment import augment
from .config import TrainConfig
from .evaluate import EvalReport, evaluate

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "loss", "loss_det", "loss_seg", "p_at_50", "miou", "ie"]


@dataclass
class TrainResult:
    model: ReferringTransformer
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    best_epoch: int = -1
    best_report: Optional[EvalReport] = None
    wall_time: float = 0.0


def phase_of(cfg: TrainConfig, epoch: int) -> tuple[str, bool]:
    """``(loss mode, auxiliary loss)`` for ``epoch``."""
    if cfg.schedule == "two-phase":
        return ("rec_only", True) if epoch < cfg.phase1_epochs else ("joint", False)
    return cfg.mode, cfg.aux_loss


def selection_score(mode: str, report: EvalReport) -> float:
    if mode == "rec_only":
        return report.p_at_50
    if mode == "res_only":
        return report.miou
    return report.p_at_50 + report.miou


def lr_scale(cfg: TrainConfig, step: int, epoch: int) -> float:
    scale = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0
    if cfg.lr_drop_epoch is not None and epoch >= cfg.lr_drop_epoch:
        scale *= 0.1
    return scale


def build_optimizer(model: ReferringTransformer, cfg: TrainConfig) -> AdamW:
    backbone, main = model.parameter_groups()
    return AdamW([{"params": backbone, "lr": cfg.lr_backbone}, {"params": main, "lr": cfg.lr_main}],
                 weight_decay=cfg.weight_decay)


def train(cfg: TrainConfig, train_set: Sequence, val_set: Sequence, out_dir,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train from scratch; writes ``metrics.csv``, ``best.ckpt`` and ``last.ckpt`` into ``out_dir``.

    Fully determined by ``cfg`` and the datasets: shuffling and augmentation
    draw from streams seeded by ``(cfg.seed, epoch)``.
    """
    if len(train_set) == 0:
        raise EmptyDataset("training set is empty")
    if len(val_set) == 0:
        raise EmptyDataset("validation set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    model = ReferringTransformer(cfg.model)
    opt = build_optimizer(model, cfg)
    log_path = out / "metrics.csv"
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    result = TrainResult(model, best_path, last_path, log_path)
    best_score = -math.inf
    stale = 0
    step = 0
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for epoch in range(cfg.epochs):
            mode, aux = phase_of(cfg, epoch)
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919, epoch]))
            order = rng.permutation(len(train_set))
            sums = np.zeros(3)
            n_batches = 0
            for lo in range(0, len(order), cfg.batch_size):
                chunk = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
                if cfg.augment:
                    chunk = [augment(s, rng) for s in chunk]
                batch = collate(chunk, model.vocab, cfg.model.max_text_len)
                with Tape() as tape:
                    outp = model(batch, want_boxes=mode != "res_only", want_masks=mode != "rec_only", aux=aux)
                    preds = {"boxes": outp.aux_boxes if aux else outp.boxes, "masks": outp.masks}
                    losses = total_loss({"boxes": batch.boxes, "masks": batch.masks}, preds, cfg.loss, mode,
                                        batch.weights)
                value = losses.total.item()
                if not math.isfinite(value):
                    raise DivergedLoss(f"non-finite loss {value} at epoch {epoch}, step {step}")
                opt.zero_grad()
                tape.backward(losses.total)
                if cfg.grad_clip:
                    opt.clip_grad_norm(cfg.grad_clip)
                opt.step(lr_scale(cfg, step, epoch))
                step += 1
                sums += (value, losses.det, losses.seg)
                n_batches += 1
                result.step_losses.append(value)
            report = evaluate(model, val_set, batch_size=cfg.eval_batch_size)
            mean_loss, mean_det, mean_seg = sums / n_batches
            row = {"epoch": epoch, "step": step, "loss": mean_loss, "loss_det": mean_det, "loss_seg": mean_seg,
                   **report.metrics()}
            writer.writerow([row["epoch"], row["step"]] + [f"{row[k]:.6f}" for k in LOG_HEADER[2:]])
            fh.flush()
            result.history.append(row)
            log.info("epoch %d step %d loss %.4f P@0.5 %.3f mIoU %.3f IE %.3f", epoch, step, mean_loss,
                     report.p_at_50, report.miou, report.ie)
            if on_epoch is not None:
                on_epoch(row)
            score = selection_score(mode, report)
            meta = {"train_config": cfg.to_dict(), "epoch": epoch, "step": step, "metrics": report.metrics()}
            if score > best_score:
                best_score, stale = score, 0
                result.best_epoch, result.best_report = epoch, report
                model.save(best_path, meta)
            else:
                stale += 1
            model.save(last_path, meta)
            if _targets_met(cfg, mode, report) or (cfg.patience is not None and stale >= cfg.patience):
                break
    result.wall_time = time.perf_counter() - start
    return result


def _targets_met(cfg: TrainConfig, mode: str, report: EvalReport) -> bool:
    """Both configured targets met; single-task runs only answer for their own head."""
    box_target = None if mode == "res_only" else cfg.target_p_at_50
    mask_target = None if mode == "rec_only" else cfg.target_miou
    if box_target is None and mask_target is None:
        return False
    ok_box = box_target is None or report.p_at_50 >= box_target
    ok_mask = mask_target is None or report.miou >= mask_target
    return ok_box and ok_mask


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
