"""Command-line interface.

Verbs: train, eval, generate, inspect, make-synthetic. Config-file keys and
flags are the same names (flags spelled with dashes); flags win. Success exits
0; failures print a single machine-parsable `error: ...` line to stderr and
exit 2.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import SCHEMA, make_config
from .data import make_blob_dataset, make_two_mode_dataset
from .metrics import SegMetrics
from .train import evaluate, generate, inspect, train


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="key = value config file")
    for key in SCHEMA:
        parser.add_argument("--" + key.replace("_", "-"), dest=key,
                            metavar="V", default=None)


def _config_from_args(args) -> "TrainConfig":
    overrides = {}
    for key, (_, parse) in SCHEMA.items():
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = parse(raw) if isinstance(raw, str) else raw
    return make_config(args.config, **overrides)


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    result = train(cfg, resume=args.resume)
    for row in result.log_rows:
        print(f"epoch {row['epoch']}\tloss {row['train_loss']:.6f}"
              + (f"\tval_iou {row['val_iou']:.4f}\tval_f1 {row['val_f1']:.4f}"
                 if row["val_iou"] is not None else ""))
    print(f"best_metric = {result.best_metric!r}")
    print(f"best_checkpoint = {result.best_path}")
    print(f"last_checkpoint = {result.last_path}")
    return 0


def _write_eval_report(out_dir, metrics: SegMetrics) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.txt").write_text(
        "\n".join(metrics.report_lines()) + "\n", encoding="utf-8")
    lines = ["image\tiou\tf1"]
    for i, (a, b) in enumerate(zip(metrics.per_image_iou, metrics.per_image_f1)):
        lines.append(f"{i}\t{a!r}\t{b!r}")
    (out / "eval_per_image.tsv").write_text("\n".join(lines) + "\n",
                                            encoding="utf-8")


def _cmd_eval(args) -> int:
    metrics = evaluate(args.checkpoint, split=args.split, data_dir=args.data_dir)
    for line in metrics.report_lines():
        print(line)
    out_dir = args.out_dir or str(Path(args.checkpoint).parent)
    _write_eval_report(out_dir, metrics)
    return 0


def _cmd_generate(args) -> int:
    paths = generate(args.checkpoint, n=args.num_samples, seed=args.seed,
                     out_dir=args.out_dir, batch_size=args.batch_size)
    print(f"wrote {len(paths)} samples to {args.out_dir}")
    return 0


def _cmd_inspect(args) -> int:
    info = inspect(_config_from_args(args))
    print(f"params = {info['params']}")
    print(f"flops = {info['flops']}")
    print("input = " + "x".join(str(v) for v in info["input"]))
    for group, count in sorted(info["param_groups"].items()):
        print(f"params.{group} = {count}")
    return 0


def _cmd_make_synthetic(args) -> int:
    if args.kind == "blobs":
        manifest = make_blob_dataset(args.out, n=args.num_images, size=args.size,
                                     seed=args.seed, split_ratio=args.split_ratio)
    elif args.kind == "two-mode":
        manifest = make_two_mode_dataset(args.out, size=args.size, seed=args.seed)
    else:
        raise ValueError(f"unknown synthetic kind {args.kind!r}")
    manifest.save(Path(args.out) / "manifest.tsv")
    print(f"wrote {len(manifest.rows)} samples under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ukan",
        description="Spline-activation (KAN) U-Net: segmentation training and "
                    "DDPM image generation on a self-contained autodiff core.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a segmentation or diffusion model")
    _add_config_flags(p)
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--data-dir", default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("generate", help="sample images from a diffusion checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", "--num-samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("inspect", help="report parameter and FLOP counts")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_inspect)

    p = sub.add_parser("make-synthetic", help="emit a toy dataset")
    p.add_argument("--kind", required=True, choices=("blobs", "two-mode"))
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-ratio", type=float, default=0.75)
    p.set_defaults(fn=_cmd_make_synthetic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error funnel
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
