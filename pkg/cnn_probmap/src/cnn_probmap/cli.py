"""CLI: train a probability-map network and run inference on SFV1 volumes."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .net import NetSpec
from .sfv import SfvError
from .train import TrainConfig, predict_file, save_checkpoint, train


def cmd_train(args) -> int:
    spec = NetSpec(base_channels=args.channels, leaky_slope=args.leaky_slope, seed=args.seed)
    cfg = TrainConfig(learning_rate=args.lr, steps=args.steps, seed=args.seed)
    model, history = train(args.data, spec, cfg)
    save_checkpoint(model, spec, args.out)
    hist_path = Path(args.out).with_suffix(".history.json")
    hist_path.write_text(json.dumps({"loss": history}))
    tail = sum(history[-10:]) / max(len(history[-10:]), 1)
    print(f"trained {cfg.steps} steps; final loss (last-10 mean) {tail:.4f} -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    result = predict_file(args.ckpt, args.infile, args.out)
    print(f"probability map {result.dims} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cnn-probmap",
                                 description="Toy 3D CNN emitting SFV1 probability maps")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on (image, mask) SFV1 pairs")
    p.add_argument("--data", required=True, help="directory with images|maps/ and truth/")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--leaky-slope", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write the foreground probability map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, SfvError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
