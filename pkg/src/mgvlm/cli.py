"""Command-line entry points.

Subcommands: gen-data, train, eval-retrieval, eval-grounding, swap-text,
grad-check, emit-curves. Failures print one machine-parsable line to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import TrainConfig, config_from_dict, load_config, parse_value
from .data import Dataset, color_shape_words, generate_shapes_video, generate_shapes_world
from .evaluate import eval_grounding, eval_masked_words, eval_retrieval
from .trainer import (fresh_text_parameters, load_checkpoint, model_from_checkpoint,
                      save_checkpoint, swap_text_module, train)
from .verification import full_loss_grad_check


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="key = value config file")
    for f in dataclasses.fields(TrainConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                            default=None, metavar="V")


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    values = load_config(args.config).to_dict() if args.config else {}
    for f in dataclasses.fields(TrainConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            values[f.name] = parse_value(f.name, str(raw))
    cfg = config_from_dict(values)
    cfg.validate()
    return cfg


def _cmd_gen_data(args) -> int:
    if args.video:
        generate_shapes_video(args.seed, args.n, args.out, image_size=args.image_size,
                              grid=args.grid, patch_size=args.patch_size,
                              frames=args.frames, lang=args.lang)
    else:
        generate_shapes_world(args.seed, args.n, args.out, image_size=args.image_size,
                              grid=args.grid, patch_size=args.patch_size, lang=args.lang,
                              max_shapes=args.max_shapes,
                              caption_only_rate=args.caption_only_rate,
                              annotation_only_rate=args.annotation_only_rate)
    print(f"wrote dataset to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    final = train(cfg)
    print(f"final checkpoint: {final}")
    return 0


def _load_eval_target(args):
    ckpt = load_checkpoint(args.ckpt)
    model, _ = model_from_checkpoint(ckpt)
    dataset = Dataset.load(args.data)
    if dataset.vocab.tokens != ckpt.vocab_tokens:
        raise ValueError("dataset vocab does not match the checkpoint vocab")
    return model, dataset, ckpt


def _write_metrics(path: str | None, records: list[dict]) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _cmd_eval_retrieval(args) -> int:
    model, dataset, ckpt = _load_eval_target(args)
    res = eval_retrieval(model, dataset, k=args.k, eval_frames=ckpt.config.eval_frames)
    records = []
    print(f"{'direction':<10}{'R@1':>8}{'R@5':>8}{'R@10':>8}")
    for direction in ("t2v", "v2t"):
        table = res.recalls[direction]
        print(f"{direction:<10}{table[1]:>8.4f}{table[5]:>8.4f}{table[10]:>8.4f}")
        records.append({"metric": f"recall_{direction}", **{f"r{m}": v for m, v in table.items()}})
    _write_metrics(args.out, records)
    return 0


def _cmd_eval_grounding(args) -> int:
    model, dataset, ckpt = _load_eval_target(args)
    res = eval_grounding(model, dataset, eval_frames=ckpt.config.eval_frames)
    mlm = eval_masked_words(model, dataset,
                            focus_words=color_shape_words(dataset.manifest.get("lang", "en")),
                            eval_frames=ckpt.config.eval_frames)
    print(f"{'mean IoU':<14}{res.mean_iou:.4f}")
    print(f"{'acc@0.5':<14}{res.accuracy_at_half:.4f}")
    print(f"{'masked-acc':<14}{mlm['accuracy']:.4f}")
    _write_metrics(args.out, [
        {"metric": "grounding", "mean_iou": res.mean_iou,
         "accuracy_at_half": res.accuracy_at_half, "skipped": res.skipped},
        {"metric": "masked_words", **mlm},
    ])
    return 0


def _cmd_swap_text(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    vocab_tokens = [ln for ln in Path(args.vocab).read_text(encoding="utf-8").splitlines() if ln]
    if args.text_from:
        donor = load_checkpoint(args.text_from)
        if donor.vocab_tokens != vocab_tokens:
            raise ValueError("--text-from checkpoint vocab does not match --vocab")
        replacement = {n: a for n, a in donor.tensors.items() if n.startswith("text.")}
    else:
        replacement = fresh_text_parameters(ckpt.config, len(vocab_tokens), args.init_seed)
    swapped = swap_text_module(ckpt, replacement, vocab_tokens)
    save_checkpoint(args.out, swapped)
    print(f"wrote swapped checkpoint: {args.out}")
    return 0


def _cmd_grad_check(args) -> int:
    res = full_loss_grad_check(max_coords=args.coords, epsilon=args.epsilon,
                               seed=args.seed)
    print(f"max relative error {res.max_rel_error:.3e} over {res.coords_checked} "
          f"coordinates (worst: {res.worst})")
    return 0 if res.max_rel_error < args.threshold else 1


def _cmd_emit_curves(args) -> int:
    columns = ["step", "lr", "cl", "match", "mlm", "bbox", "total"]
    rows = []
    with open(args.log, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rows.append([rec.get(c, "") for c in columns])
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgvlm",
                                     description="Desk-scale multi-grained "
                                                 "vision-language pre-training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a shapes-world dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--lang", choices=("en", "de"), default="en")
    p.add_argument("--max-shapes", type=int, default=4)
    p.add_argument("--caption-only-rate", type=float, default=0.0)
    p.add_argument("--annotation-only-rate", type=float, default=0.0)
    p.add_argument("--video", action="store_true")
    p.add_argument("--frames", type=int, default=4)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="run a training job")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval-retrieval", help="two-stage retrieval metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_eval_retrieval)

    p = sub.add_parser("eval-grounding", help="box-prediction metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_eval_grounding)

    p = sub.add_parser("swap-text", help="replace the text module in a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--text-from", default=None,
                   help="take text.* tensors from this checkpoint")
    p.add_argument("--init-seed", type=int, default=0,
                   help="random-init replacement seed (when no --text-from)")
    p.set_defaults(fn=_cmd_swap_text)

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    p.add_argument("--coords", type=int, default=500)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_grad_check)

    p = sub.add_parser("emit-curves", help="training log -> TSV curve table")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_emit_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-data" and args.grid is None:
        args.grid = 4 if args.video else 2
    try:
        return args.fn(args)
    except Exception as err:  # single-line machine-parsable failure
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
