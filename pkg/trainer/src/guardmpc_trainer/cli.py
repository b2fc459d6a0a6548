"""Command line for fitting and exporting approximators.

guardmpc-trainer train --dataset DS --arch 50,50 --epochs 200 --out W.json
"""

from __future__ import annotations

import argparse
import sys

from .train import DEFAULT_BATCH, DEFAULT_LR, export_weights, train


def make_parser():
    parser = argparse.ArgumentParser(prog="guardmpc-trainer")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="fit an MLP on a dataset and export weights")
    p.add_argument("--dataset", required=True, help="dataset base path (no extension)")
    p.add_argument("--arch", default="50,50",
                   help="comma-separated hidden layer widths")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        arch = tuple(int(w) for w in args.arch.split(",") if w)
        result = train(args.dataset, arch=arch, epochs=args.epochs,
                       batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       log_every=args.log_every)
        export_weights(result, args.out, probe_seed=args.probe_seed)
        print(f"validation rmse (scaled): {result.val_rmse:.6e}")
        print(f"wrote {args.out}")
        return 0
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
