"""Command-line interface: synth / train / infer / eval / curves.

Exit codes: 0 success, 1 validation failure (bad config, unmatched or
degenerate inputs, non-finite loss), 2 I/O failure (missing or unreadable
paths).  Worker count for evaluation comes from --workers or the
ICON_SOD_WORKERS environment variable (default 1).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import (
    DatasetIndex,
    load_image,
    save_gray_png,
    synth_dataset,
    IMAGE_EXTS,
    IMAGE_MEAN,
    IMAGE_STD,
)
from .errors import ConfigError
from .evaluate import evaluate_dirs, format_fnr_percent, write_report
from .network import (
    IconConfig,
    icon_forward,
    infer,
    load_checkpoint,
    parse_kv_text,
)
from .tensor import Tensor
from .train import TrainConfig, train


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="output directory (images/ + masks/)")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def _add_train(sub):
    p = sub.add_parser("train", help="train on an image/mask directory pair")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--val-images", help="held-out images (defaults to a tail split)")
    p.add_argument("--val-masks")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--net-config", help="network config file (key = value lines)")
    p.add_argument("--train-config", help="training config file (key = value lines)")
    p.add_argument("--input-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))


def _add_infer(sub):
    p = sub.add_parser("infer", help="write saliency PNGs for a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, help="binarize output at this value")
    p.add_argument("--heatmap-dir", help="dump pre/post channel-enhancement heatmaps")


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curves", action="store_true", help="also write curves + figures")
    p.add_argument("--fnr-threshold", type=float, default=0.5)
    p.add_argument("--workers", type=int)


def _add_curves(sub):
    p = sub.add_parser("curves", help="write PR / F-measure curves and figures only")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icon-sod",
        description="Integrity-aware salient object detection: toy training, "
        "inference and batch metric evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_train(sub)
    _add_infer(sub)
    _add_eval(sub)
    _add_curves(sub)
    return parser


def _load_kv_file(path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text())


def cmd_synth(args) -> int:
    index = synth_dataset(args.count, args.size, args.seed, args.out)
    print(f"wrote {len(index)} scenes under {args.out}")
    return 0


def cmd_train(args) -> int:
    # desk-scale defaults, overlaid by the config file, overlaid by flags
    net_kv = IconConfig.desk().to_kv()
    if args.net_config:
        net_kv.update(_load_kv_file(args.net_config))
    if args.input_size is not None:
        net_kv["input_size"] = str(args.input_size)
    if args.dtype is not None:
        net_kv["dtype"] = args.dtype
    icon_cfg = IconConfig.from_kv(net_kv)

    train_kv = _load_kv_file(args.train_config) if args.train_config else {}
    for name in ("lr", "epochs", "batch_size", "warmup_epochs", "seed"):
        val = getattr(args, name)
        if val is not None:
            train_kv[name] = str(val)
    train_cfg = TrainConfig.from_kv(train_kv) if train_kv else TrainConfig()

    full = DatasetIndex.from_dirs(args.images, args.masks, tag="train")
    if args.val_images:
        if not args.val_masks:
            raise ConfigError("--val-images needs --val-masks")
        train_index = full
        val_index = DatasetIndex.from_dirs(args.val_images, args.val_masks, tag="val")
    else:
        n_val = max(1, int(len(full) * args.val_fraction))
        if n_val >= len(full):
            raise ConfigError("validation split leaves no training data")
        train_index = DatasetIndex(pairs=full.pairs[:-n_val], tag="train")
        val_index = DatasetIndex(pairs=full.pairs[-n_val:], tag="val")

    result = train(train_index, val_index, icon_cfg, train_cfg, args.out)
    from .figures import plot_training_log

    plot_training_log(
        list(range(result.epochs_run)),
        result.train_loss,
        result.val_mae,
        Path(args.out) / "train_log.png",
    )
    print(
        f"trained {result.epochs_run} epochs; best val MAE {result.best_val_mae:.4f} "
        f"at epoch {result.best_epoch}; checkpoints in {args.out}"
    )
    return 0


def cmd_infer(args) -> int:
    from PIL import Image as PILImage

    params, config, _ = load_checkpoint(args.checkpoint)
    in_dir = Path(args.images)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {in_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.heatmap_dir:
        Path(args.heatmap_dir).mkdir(parents=True, exist_ok=True)

    files = [p for p in sorted(in_dir.iterdir()) if p.suffix.lower() in IMAGE_EXTS]
    if not files:
        raise FileNotFoundError(f"no images under {in_dir}")
    size = config.input_size
    first_heatmap = True
    for path in files:
        raw = load_image(path)
        oh, ow = raw.shape[:2]
        if oh % 32 != 0 or ow % 32 != 0:
            print(
                f"warning: {path.name} is {oh}x{ow} (not divisible by 32); "
                f"resizing through {size}x{size}",
                file=sys.stderr,
            )
        img = np.asarray(
            PILImage.fromarray(raw).resize((size, size), PILImage.BILINEAR),
            dtype=np.float64,
        ) / 255.0
        x = ((img - IMAGE_MEAN) / IMAGE_STD).transpose(2, 0, 1)[None]
        x = x.astype(config.np_dtype)
        if args.heatmap_dir and first_heatmap:
            from .tensor import no_grad

            with no_grad():
                icon_forward(
                    Tensor(x), params, config, training=False, heatmap_dir=args.heatmap_dir
                )
            first_heatmap = False
        sal = infer(Tensor(x), params, config)[0, 0]
        # carry the float map through the resize; binarize only at the end
        sal_full = np.asarray(
            PILImage.fromarray(sal.astype(np.float32), mode="F").resize(
                (ow, oh), PILImage.BILINEAR
            ),
            dtype=np.float64,
        ).clip(0.0, 1.0)
        if args.threshold is not None:
            sal_full = (sal_full >= args.threshold).astype(np.float64)
        save_gray_png(sal_full, out_dir / f"{path.stem}.png")
    print(f"wrote {len(files)} saliency maps to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    report, skipped = evaluate_dirs(
        args.pred,
        args.gt,
        fnr_threshold=args.fnr_threshold,
        with_curves=args.curves,
        workers=args.workers,
    )
    write_report(report, args.out)
    agg = report.aggregate
    print(f"evaluated {agg['n_images']} image pairs -> {args.out}")
    if agg["n_images"]:
        print(
            f"  MAE {agg['mae']:.4f} | wF {agg['wfm']:.4f} | S {agg['sm']:.4f} | "
            f"Em {agg['em_mean']:.4f} | FNR {format_fnr_percent(agg['fnr'])}"
        )
    for line in skipped:
        print(f"  skipped {line}", file=sys.stderr)
    return 1 if skipped or not report.per_image else 0


def cmd_curves(args) -> int:
    report, skipped = evaluate_dirs(
        args.pred, args.gt, with_curves=True, workers=args.workers
    )
    written = write_report(report, args.out)
    if "curves" in written:
        print(f"curves written to {written['curves']}")
    for line in skipped:
        print(f"  skipped {line}", file=sys.stderr)
    return 1 if skipped or not report.per_image else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "infer": cmd_infer,
        "eval": cmd_eval,
        "curves": cmd_curves,
    }
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
