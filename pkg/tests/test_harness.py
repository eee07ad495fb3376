"""Metrics, evaluation, training loop, rendering, ablation table and CLI."""
import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reftr.errors import ConfigMismatch, EmptyDataset, EmptySpan, InvalidConfig, LengthMismatch, SpanOutOfRange
from reftr.harness import cli
from reftr.harness.ablation import VARIANTS, AblationRow, AblationTable, variant_config
from reftr.harness.config import TrainConfig
from reftr.harness.evaluate import evaluate, evaluate_predictions
from reftr.harness.gradsuite import CASES, run_grad_suite
from reftr.harness.metrics import box_hits, chance_rate, inconsistency_error, inconsistent, mask_iou
from reftr.harness.render import attention_heatmap, render_attention
from reftr.harness.train import LOG_HEADER, lr_scale, phase_of, read_log, train
from reftr.heads import iou
from reftr.model import MASK_STRIDE, ModelConfig, ReferringTransformer
from reftr.shapes_world import SceneConfig, downsample_mask, generate_dataset
from reftr.shapes_world.io import decode_pgm, decode_ppm

TINY = ModelConfig(dim=32, text_dim=16, image_channels=(4, 8, 8), text_layers=1, text_heads=2, enc_layers=1,
                   dec_layers=2, heads=4)
FAST = TrainConfig(lr_main=2e-3, lr_backbone=2e-3, batch_size=4, epochs=2, warmup_steps=2, eval_batch_size=8,
                   model=TINY)


@pytest.fixture(scope="module")
def data():
    scene = SceneConfig()
    return generate_dataset(scene, 8, seed=11), generate_dataset(scene, 4, seed=11, split="val")


def gt_masks(s):
    return np.stack([downsample_mask(m, MASK_STRIDE) for m in s.masks]).astype(float)


# ---------------------------------------------------------------- metrics


def test_oracle_predictions_score_perfectly(data):
    _, val = data
    rep = evaluate_predictions(val, [s.boxes for s in val], [s.masks.astype(float) for s in val])
    assert (rep.p_at_50, rep.miou, rep.ie) == (1.0, 1.0, 0.0)
    assert rep.num_phrases == sum(s.num_phrases for s in val)


def test_full_image_boxes_rarely_hit(data):
    train_set, _ = data
    full = [np.tile([0.5, 0.5, 1.0, 1.0], (s.num_phrases, 1)) for s in train_set]
    rep = evaluate_predictions(train_set, full, [gt_masks(s) for s in train_set])
    assert rep.p_at_50 < 0.05


def test_p_at_50_recounts_from_per_sample(data):
    train_set, _ = data
    rng = np.random.default_rng(0)
    boxes = [s.boxes + rng.normal(0, 0.05, s.boxes.shape) for s in train_set]
    rep = evaluate_predictions(train_set, boxes, [gt_masks(s) for s in train_set])
    flat = [h for r in rep.per_sample for h in r["box_correct"]]
    assert rep.p_at_50 == pytest.approx(sum(flat) / len(flat))
    assert rep.miou == pytest.approx(np.mean([v for r in rep.per_sample for v in r["mask_iou"]]))


def test_strict_threshold():
    box = np.array([[0.5, 0.5, 0.25, 0.25]])
    half = np.array([[0.5, 0.5, 0.25, 0.125]])  # IoU exactly 0.5 in binary
    assert iou(box[0], half[0]) == 0.5
    assert not box_hits(half, box)[0]


def test_mask_iou_empty_union_is_one():
    z = np.zeros((1, 4, 4))
    assert mask_iou(z, z.astype(bool))[0] == 1.0
    with pytest.raises(LengthMismatch):
        mask_iou(np.zeros((1, 4, 4)), np.zeros((1, 4, 5), bool))


def _ie_reference(boxes, masks):
    """Straight-line reimplementation: tight box from pixel extents, IoU by corners."""
    bad = 0
    for (cx, cy, h, w), m in zip(boxes, masks):
        ys, xs = np.nonzero(m > 0.5)
        if ys.size == 0:
            bad += 1
            continue
        H, W = m.shape
        tx0, tx1, ty0, ty1 = xs.min() / W, (xs.max() + 1) / W, ys.min() / H, (ys.max() + 1) / H
        bx0, bx1, by0, by1 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
        iw = max(0.0, min(bx1, tx1) - max(bx0, tx0))
        ih = max(0.0, min(by1, ty1) - max(by0, ty0))
        inter = iw * ih
        union = w * h + (tx1 - tx0) * (ty1 - ty0) - inter
        bad += inter / union < 0.5
    return bad / len(boxes)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ie_matches_reference(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(1, 6)
    masks = rng.random((n, 16, 16)) ** 3
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.1, 0.6, (n, 2))])
    assert inconsistency_error(boxes, masks) == pytest.approx(_ie_reference(boxes, masks))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_ie_of_ground_truth_is_zero(seed):
    for s in generate_dataset(SceneConfig(), 5, seed=seed):
        assert not inconsistent(s.boxes, s.masks.astype(float)).any()


def test_ie_length_mismatch():
    with pytest.raises(LengthMismatch):
        inconsistency_error(np.zeros((2, 4)), np.zeros((3, 4, 4)))


def test_chance_rate_is_object_count_expectation(data):
    train_set, _ = data
    # every phrase names one object and objects rarely overlap by >0.5, so chance ~ mean 1/N
    expected = np.mean([1.0 / len(s.objects) for s in train_set for _ in s.phrases])
    assert chance_rate(train_set) == pytest.approx(expected, abs=0.05)
    assert 0 < chance_rate(train_set) < 1


# ---------------------------------------------------------------- config


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(lr_main=1e-4, lr_backbone=1e-3)
    with pytest.raises(InvalidConfig):
        TrainConfig(mode="both")
    with pytest.raises(InvalidConfig):
        TrainConfig(schedule="two-phase", epochs=3, phase1_epochs=3)
    with pytest.raises(InvalidConfig):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(FAST.to_dict()) == FAST


def test_schedule_helpers():
    cfg = TrainConfig(schedule="two-phase", epochs=4, phase1_epochs=2, warmup_steps=10, lr_drop_epoch=3)
    assert phase_of(cfg, 0) == ("rec_only", True)
    assert phase_of(cfg, 2) == ("joint", False)
    assert lr_scale(cfg, 0, 0) < lr_scale(cfg, 9, 0) <= 1.0
    assert lr_scale(cfg, 50, 3) == pytest.approx(0.1)


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("run")
    return train(FAST, *data, out), out


def test_train_writes_artifacts(trained):
    result, out = trained
    assert result.best_checkpoint.exists() and result.last_checkpoint.exists()
    rows = read_log(out / "metrics.csv")
    with open(out / "metrics.csv") as fh:
        assert tuple(next(csv.reader(fh))) == tuple(LOG_HEADER)
    assert [r["epoch"] for r in rows] == [0, 1]
    assert rows[-1]["step"] == 2 * 2  # 8 samples / batch 4, two epochs
    assert all(0 <= r["p_at_50"] <= 1 and 0 <= r["ie"] <= 1 for r in rows)


def test_train_is_deterministic(tmp_path, trained, data):
    first, out = trained
    second = train(FAST, *data, tmp_path)
    assert (out / "metrics.csv").read_text() == (tmp_path / "metrics.csv").read_text()
    assert first.step_losses == second.step_losses


def test_checkpoint_reload_gives_identical_eval(trained, data):
    result, _ = trained
    a = evaluate(result.best_checkpoint, data[1])
    b = evaluate(result.best_checkpoint, data[1], expect=TINY)
    assert a.per_sample == b.per_sample
    with pytest.raises(ConfigMismatch):
        evaluate(result.best_checkpoint, data[1], expect=ModelConfig())


def test_loss_falls_over_training(tmp_path, data):
    cfg = FAST.with_changes(epochs=100, batch_size=8, augment=False)
    result = train(cfg, data[0], data[1][:1], tmp_path)
    assert len(result.step_losses) == 100
    assert result.step_losses[-1] < result.step_losses[0]


def test_empty_datasets_rejected(tmp_path, data):
    with pytest.raises(EmptyDataset):
        train(FAST, [], data[1], tmp_path)
    with pytest.raises(EmptyDataset):
        evaluate(ReferringTransformer(TINY), [])


def test_early_stop_on_targets(tmp_path, data):
    result = train(FAST.with_changes(epochs=5, target_p_at_50=0.0, target_miou=0.0), *data, tmp_path)
    assert len(result.history) == 1


# ---------------------------------------------------------------- rendering


def test_render_attention_files(tmp_path, data):
    sample = data[1][0]
    files = render_attention(ReferringTransformer(TINY), sample, tmp_path)
    assert len(files) == 3 * sample.num_phrases
    for f in files:
        raw = f.read_bytes()
        if f.suffix == ".pgm":
            heat = decode_pgm(raw)
            assert heat.shape == (64, 64) and heat.max() == 255
        else:
            assert decode_ppm(raw).shape == (3, 64, 64)


def test_heatmap_peak_follows_attention():
    attn = np.zeros((2, 16))
    attn[:, 5] = 1.0  # cell (1, 1) of a 4x4 grid
    heat = attention_heatmap(attn, (4, 4), (64, 64))
    r, c = np.unravel_index(heat.argmax(), heat.shape)
    assert 16 <= r < 32 and 16 <= c < 32


# ---------------------------------------------------------------- ablation


def test_variant_configs():
    base = TrainConfig()
    assert variant_config(base, "rec_only").mode == "rec_only"
    both = variant_config(base, "no_context_phrase").model
    assert not both.use_context and not both.use_phrase
    assert not variant_config(base, "no_decoder").model.use_decoder
    assert set(VARIANTS) >= {"joint", "rec_only", "res_only", "no_context_phrase"}


def test_ablation_table_format():
    table = AblationTable([AblationRow("joint", 0.9, 0.8, 0.05), AblationRow("rec_only", 0.88, None, None)], 0.28)
    md = table.to_markdown().splitlines()
    assert md[0] == "| variant | P@0.5 | mIoU | IE |"
    assert md[2] == "| joint | 0.9000 | 0.8000 | 0.0500 |"
    assert md[3] == "| rec_only | 0.8800 |  |  |"
    assert "0.2800" in md[-1]
    rows = list(csv.reader(table.to_csv().splitlines()))
    assert rows[0] == ["variant", "p_at_50", "miou", "ie"] and rows[2][2] == ""


# ---------------------------------------------------------------- gradient suite


def test_grad_suite_covers_losses_and_passes():
    results, wall = run_grad_suite(["matmul", "conv2d", "rec_loss", "seg_loss"], points=3)
    assert all(r.passed for r in results)
    assert {"rec_loss", "seg_loss", "softmax", "layer_norm", "conv2d"} <= set(CASES)


# ---------------------------------------------------------------- CLI


def test_cli_end_to_end(tmp_path, capsys):
    data_dir = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data_dir), "--count", "8", "--val-count", "4", "--seed", "5"]) == 0
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps(FAST.with_changes(epochs=1).to_dict()))
    assert cli.main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "run")]) == 0
    ckpt = tmp_path / "run" / "best.ckpt"
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir),
                     "--report", str(tmp_path / "r.json")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) >= {"p_at_50", "miou", "ie"}
    assert json.loads((tmp_path / "r.json").read_text())["per_sample"]
    assert cli.main(["render-attn", "--ckpt", str(ckpt), "--data", str(data_dir), "--n", "1",
                     "--out", str(tmp_path / "attn")]) == 0
    assert len(list((tmp_path / "attn").iterdir())) % 3 == 0
    img = next((data_dir / "val").rglob("*.ppm"))
    capsys.readouterr()
    assert cli.main(["infer", "--ckpt", str(ckpt), "--image", str(img), "--sentence", "the red circle and the blue square",
                     "--phrases", "the red circle;the blue square"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["spans"] == [[0, 3], [4, 7]] and len(out["boxes"]) == 2


def test_cli_exit_codes(tmp_path):
    assert cli.main(["grad-check", "--op", "relu", "--points", "2"]) == 0
    assert cli.main(["grad-check", "--op", "nope"]) == 1
    assert cli.main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lr_main": 1e-5, "lr_backbone": 1e-3}))
    assert cli.main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1


def test_phrase_span_errors():
    assert cli.phrase_span(["a", "b", "c"], ["b", "c"]) == (1, 3)
    with pytest.raises(SpanOutOfRange):
        cli.phrase_span(["a"], ["z"])
    with pytest.raises(EmptySpan):
        cli.phrase_span(["a"], [])
