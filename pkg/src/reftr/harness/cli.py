"""Command-line entry point: ``reftr <subcommand>``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace
from typing import Optional, Sequence

import numpy as np

from ..backbones import tokenize
from ..errors import EmptySpan, InvalidConfig, ReftrError, SpanOutOfRange
from ..model import ReferringTransformer, collate
from ..shapes_world.dataset import generate_dataset
from ..shapes_world.io import encode_pgm, read_dataset, read_ppm, write_dataset
from ..shapes_world.scene import SceneConfig

log = logging.getLogger("reftr")


# ---------------------------------------------------------------------------
# dataset layout helpers


def _splits(data_dir) -> tuple[list, Optional[list]]:
    """``DIR/train`` + ``DIR/val`` when present, otherwise ``DIR`` alone."""
    root = Path(data_dir)
    if (root / "train" / "manifest.jsonl").exists():
        val = read_dataset(root / "val") if (root / "val" / "manifest.jsonl").exists() else None
        return read_dataset(root / "train"), val
    return read_dataset(root), None


def _eval_split(data_dir) -> list:
    root = Path(data_dir)
    for name in ("val", "test"):
        if (root / name / "manifest.jsonl").exists():
            return read_dataset(root / name)
    return read_dataset(root)


def phrase_span(sentence_tokens: Sequence[str], phrase_tokens: Sequence[str]) -> tuple[int, int]:
    """Token span of the first occurrence of ``phrase_tokens`` inside the sentence."""
    n, k = len(sentence_tokens), len(phrase_tokens)
    if k == 0:
        raise EmptySpan("empty phrase")
    for i in range(n - k + 1):
        if list(sentence_tokens[i:i + k]) == list(phrase_tokens):
            return i, i + k
    raise SpanOutOfRange(f"phrase {' '.join(phrase_tokens)!r} does not occur in the sentence")


def infer(model: ReferringTransformer, image: np.ndarray, sentence: str, phrases: Sequence[str]) -> dict:
    """Boxes and quarter-resolution mask scores for free-form phrases of ``sentence``."""
    words = tokenize(sentence, model.vocab, model.cfg.max_text_len).tokens
    items = []
    for text in phrases:
        span = phrase_span(words, tokenize(text, model.vocab, model.cfg.max_text_len).tokens)
        items.append(SimpleNamespace(text=text, span=span))
    sample = SimpleNamespace(image=image, sentence=sentence, phrases=items)
    pred = model.predict(collate([sample], model.vocab, model.cfg.max_text_len, with_targets=False))
    return {"phrases": list(phrases), "spans": [list(p.span) for p in items],
            "boxes": pred["boxes"].tolist(), "masks": pred["masks"]}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .config import load_scene_config
    cfg = load_scene_config(args.config) if args.config else SceneConfig()
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    meta = {"scene_config": cfg.to_dict(), "seed": seed}
    if args.val_count:
        digests = {}
        for split, count in (("train", args.count), ("val", args.val_count)):
            digests[split] = write_dataset(generate_dataset(cfg, count, seed=seed, split=split), out / split,
                                           {**meta, "split": split, "count": count})
        print(json.dumps({"out": str(out), "manifest_sha256": digests}))
    else:
        digest = write_dataset(generate_dataset(cfg, args.count, seed=seed, split=args.split), out,
                               {**meta, "split": args.split, "count": args.count})
        print(json.dumps({"out": str(out), "manifest_sha256": digest}))
    return 0


def cmd_train(args) -> int:
    from .config import TrainConfig, load_train_config
    from .train import train
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    train_set, val_set = _splits(args.data)
    if args.val:
        val_set = read_dataset(args.val)
    if val_set is None:
        cut = max(1, len(train_set) // 10)
        train_set, val_set = train_set[:-cut], train_set[-cut:]
    result = train(cfg, train_set, val_set, args.out)
    print(json.dumps({"best_checkpoint": str(result.best_checkpoint), "log": str(result.log_path),
                      "best_epoch": result.best_epoch, "metrics": result.best_report.metrics(),
                      "wall_time": result.wall_time}))
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate
    report = evaluate(args.ckpt, _eval_split(args.data), iou_thresh=args.iou_thresh)
    if args.report:
        report.save(args.report)
    print(json.dumps(report.to_dict(with_samples=False)))
    return 0


def cmd_infer(args) -> int:
    model, _ = ReferringTransformer.load(args.ckpt)
    phrases = [p.strip() for p in args.phrases.split(";") if p.strip()]
    if not phrases:
        raise InvalidConfig("--phrases needs at least one phrase")
    result = infer(model, read_ppm(args.image), args.sentence, phrases)
    masks = result.pop("masks")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(masks):
            (out / f"mask_{i:02d}.pgm").write_bytes(encode_pgm(np.round(m * 255).astype(np.uint8)))
    result["mask_area"] = [int((m > 0.5).sum()) for m in masks]
    print(json.dumps(result))
    return 0


def cmd_render_attn(args) -> int:
    from .render import render_attention
    model, _ = ReferringTransformer.load(args.ckpt)
    samples = _eval_split(args.data)[:args.n]
    written = []
    for i, s in enumerate(samples):
        written += render_attention(model, s, args.out, prefix=f"s{i:04d}_")
    print(json.dumps({"files": len(written), "out": str(args.out)}))
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_grad_suite
    results, wall = run_grad_suite([args.op] if args.op else None, points=args.points)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:20s} max_rel_err={r.max_error:.3e} tol={r.tolerance:g}")
    print(f"{len(results)} checks in {wall:.1f}s")
    return 0 if all(r.passed for r in results) else 2


def cmd_ablate(args) -> int:
    from .ablation import AblationSuite, run_ablation
    from .config import load_json
    suite = AblationSuite.from_dict(load_json(args.suite)) if args.suite else AblationSuite()
    out = Path(args.out)
    work = Path(args.work) if args.work else out.with_suffix("")
    table = run_ablation(suite, work)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table.to_markdown())
    print(table.to_markdown())
    return 0


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors, so they exit with 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reftr", description="Referring transformer on synthetic shape scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a shapes dataset")
    g.add_argument("--config", help="scene config JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--split", default="train", choices=["train", "val", "test"])
    g.add_argument("--val-count", type=int, default=0, help="also write DIR/train and DIR/val")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--val", help="validation dataset directory")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.add_argument("--iou-thresh", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="ground phrases of a sentence in one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--sentence", required=True)
    i.add_argument("--phrases", required=True, help="semicolon-separated phrases")
    i.add_argument("--out", help="directory for mask PGMs")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("render-attn", help="write attention heatmaps and overlays")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--n", type=int, default=4)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render_attn)

    c = sub.add_parser("grad-check", help="finite-difference gradient checks")
    c.add_argument("--op")
    c.add_argument("--points", type=int, default=10)
    c.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("ablate", help="run the ablation suite")
    a.add_argument("--suite", help="suite JSON")
    a.add_argument("--out", required=True, help="markdown table path")
    a.add_argument("--work", help="directory for per-variant runs")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ReftrError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
