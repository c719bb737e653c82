"""Command-line entry points: make-data, train-export, export-dataset.

Exit codes: 0 success, 1 export/data failure, 2 usage.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .archive import read_idx_pair, write_idx_pair
from .data import shape_set
from .errors import ExportError
from .export import export_dataset, export_model
from .models import CnnSpec, SmallResNet
from .training import TrainSettings, accuracy, train_cnn


def _load_split(data_dir: str, split: str):
    stem = "train" if split == "train" else "t10k"
    return read_idx_pair(
        os.path.join(data_dir, f"{stem}-images-idx3-ubyte"),
        os.path.join(data_dir, f"{stem}-labels-idx1-ubyte"),
    )


def cmd_make_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    train = shape_set(args.train_count, seed=args.seed)
    test = shape_set(args.test_count, seed=args.seed + 1)
    write_idx_pair(args.out, "train", *train)
    write_idx_pair(args.out, "t10k", *test)
    print(f"wrote {args.train_count} train / {args.test_count} test images to {args.out}")
    return 0


def cmd_train_export(args) -> int:
    train_images, train_labels = _load_split(args.data_dir, "train")
    test_images, test_labels = _load_split(args.data_dir, "test")
    spec = CnnSpec(width=args.width, norm=args.norm, groups=args.groups)
    net = SmallResNet(spec)
    settings = TrainSettings(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed
    )
    metrics = train_cnn(net, train_images, train_labels, settings)
    clean = accuracy(net, test_images, test_labels)
    probe_count = min(args.probe_count, len(test_images))
    probe = (test_images[:probe_count].astype(np.float32) / np.float32(255.0))[..., None]
    manifest = export_model(
        net,
        input_shape=train_images.shape[1:] + (1,),
        path=args.out,
        probe=probe,
        dataset=f"idx:{os.path.basename(os.path.abspath(args.data_dir))}",
        training={
            "epochs": settings.epochs,
            "lr": settings.lr,
            "momentum": settings.momentum,
            "batch_size": settings.batch_size,
            "seed": settings.seed,
        },
        clean_accuracy=clean,
    )
    print(
        f"exported {args.out} (norm={args.norm}, train acc "
        f"{metrics['train_accuracy']:.3f}, clean acc {clean:.3f}, "
        f"probe {manifest['probe']['count']})"
    )
    return 0


def cmd_export_dataset(args) -> int:
    images, labels = _load_split(args.data_dir, args.split)
    if args.count and args.count < len(images):
        images, labels = images[: args.count], labels[: args.count]
    export_dataset(args.out, images, labels, corruption=args.corruption)
    print(f"wrote {len(images)} {args.split} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwexport", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write synthetic train/t10k IDX pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, default=1200)
    p.add_argument("--test-count", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train-export", help="train a reference CNN and export it")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--norm", default="bn", choices=("bn", "gn", "frn"))
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-count", type=int, default=1000)
    p.set_defaults(func=cmd_train_export)

    p = sub.add_parser("export-dataset", help="repackage an IDX split as .dwd")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--count", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--corruption", default=None)
    p.set_defaults(func=cmd_export_dataset)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ExportError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
