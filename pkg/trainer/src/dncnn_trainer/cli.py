"""Command line front end: make-corpus, train, evaluate."""

from __future__ import annotations

import argparse
import sys

from dncnn_trainer.data import make_corpus
from dncnn_trainer.errors import TrainerError
from dncnn_trainer.evaluate import evaluate
from dncnn_trainer.train import TrainConfig, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dncnn-train",
        description="Train and evaluate residual CNN denoisers (.dnw files)")
    sub = parser.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-corpus", help="generate a synthetic image folder")
    mk.add_argument("--folder", required=True)
    mk.add_argument("--count", type=int, default=48)
    mk.add_argument("--size", type=int, default=128)
    mk.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="train a model and export weights")
    tr.add_argument("--folder", required=True, help="training image folder")
    tr.add_argument("--sigma", type=int, default=10)
    tr.add_argument("--rho", type=float, default=0.0)
    tr.add_argument("--layers", type=int, default=7)
    tr.add_argument("--epochs", type=int, default=12)
    tr.add_argument("--patch", type=int, default=40)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--hidden", type=int, default=64)
    tr.add_argument("--batch", type=int, default=32)
    tr.add_argument("--batches-per-epoch", type=int, default=48)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--out", default="dncnn.dnw")
    tr.add_argument("--log", default=None)
    tr.add_argument("--no-intensity-augment", action="store_true")

    ev = sub.add_parser("evaluate", help="PSNR report over a test folder")
    ev.add_argument("--weights", required=True)
    ev.add_argument("--folder", required=True)
    ev.add_argument("--sigma", type=float, default=10.0)
    ev.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-corpus":
            paths = make_corpus(args.folder, count=args.count, size=args.size,
                                seed=args.seed)
            print(f"wrote {len(paths)} images of {args.size}x{args.size} "
                  f"to {args.folder}")
        elif args.command == "train":
            config = TrainConfig(
                image_folder=args.folder, sigma=args.sigma, rho=args.rho,
                layers=args.layers, epochs=args.epochs, patch_size=args.patch,
                seed=args.seed, hidden=args.hidden, batch_size=args.batch,
                batches_per_epoch=args.batches_per_epoch, lr=args.lr,
                out_path=args.out, log_path=args.log,
                intensity_augment=not args.no_intensity_augment)
            path = train(config, verbose=True)
            print(f"wrote weights to {path}")
        else:
            report = evaluate(args.weights, args.folder, args.sigma, seed=args.seed)
            print(report.summary())
    except TrainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
