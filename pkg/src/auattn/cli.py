"""Command-line entry point: ``auattn {train,eval,predict,synth,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataio import DROP, MASK, SyntheticSpec, generate_synthetic, load_dataset, load_image
from .exceptions import ConfigError
from .gradcheck import TOLERANCE, run_suite
from .model import ModelConfig, parse_pool_schedule, predict_proba
from .objective import AU_NAMES
from .trainer import TrainConfig, evaluate, format_log, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
VAL_FRACTION = 0.2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="auattn", description="Attention-based facial action unit detector.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True, help="dataset root (annotations/ + images/)")
    t.add_argument("--epochs", required=True, type=int)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--lr", type=float, default=1e-3, help="initial learning rate; drops 10x after epoch 5")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--policy", choices=(MASK, DROP), default=MASK)
    t.add_argument("--pool-schedule", default="111100", help="one 0/1 per conv block")
    t.add_argument("--out", required=True, help="output directory for checkpoints and log.csv")

    e = sub.add_parser("eval", help="macro F1 of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--verbose", action="store_true", help="also print per-AU confusion counts")

    pr = sub.add_parser("predict", help="AU probabilities for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--threshold", type=float, default=0.5)

    s = sub.add_parser("synth", help="write a synthetic pattern dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", required=True, type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=112)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    g.add_argument("--points", type=int, default=100)
    return p


def split_dataset(root, policy, image_size):
    """``root/train`` + ``root/val`` when present, else the last 20% of frames for validation."""
    root = Path(root)
    if (root / "train").is_dir() and (root / "val").is_dir():
        return (load_dataset(root / "train", policy, image_size, cache=True),
                load_dataset(root / "val", policy, image_size, cache=True))
    full = load_dataset(root, policy, image_size, cache=True)
    n_val = int(round(len(full) * VAL_FRACTION))
    n_train = len(full) - n_val
    return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, len(full)))


def cmd_train(args, out):
    model_config = ModelConfig(pool_schedule=parse_pool_schedule(args.pool_schedule)).validate()
    train_config = TrainConfig(initial_lr=args.lr, post_warm_lr=args.lr / 10, epochs=args.epochs,
                               batch_size=args.batch_size, seed=args.seed,
                               deterministic=args.deterministic, checkpoint_dir=args.out).validate()
    train_set, val_set = split_dataset(args.data, args.policy, model_config.input_size)
    ckpt = train(model_config, train_config, train_set, val_set)
    Path(args.out, "log.csv").write_text(format_log(ckpt.log))
    out.write(format_log(ckpt.log))
    return EXIT_OK


def cmd_eval(args, out):
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, MASK, ckpt.model_config.input_size)
    report = evaluate(ckpt, ckpt.model_config, data, args.threshold)
    out.write(report.format(verbose=args.verbose) + "\n")
    return EXIT_OK


def cmd_predict(args, out):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.model_config
    image = load_image(args.image, cfg.input_size)[None].astype(ckpt.params.dtype)
    probs = predict_proba(image, ckpt.params, cfg)[0]
    names = AU_NAMES if cfg.num_aus == len(AU_NAMES) else [f"AU{i}" for i in range(cfg.num_aus)]
    for name, p in zip(names, probs):
        out.write(f"{name} {p:.6f} {int(p >= args.threshold)}\n")
    return EXIT_OK


def cmd_synth(args, out):
    spec = SyntheticSpec(n=args.n, seed=args.seed, image_size=args.size)
    generate_synthetic(spec, args.out)
    out.write(f"wrote {args.n} samples to {args.out}\n")
    return EXIT_OK


def cmd_gradcheck(args, out):
    suite = run_suite(points=args.points)
    for name, res in suite.results.items():
        status = "ok" if res.passed(TOLERANCE) else "FAIL"
        extra = f" nan at {res.nan_at}" if res.nan_at else ""
        out.write(f"{name:<20} max_rel_error={res.max_rel_error:.3e} {status}{extra}\n")
    out.write(f"total {suite.seconds:.1f}s\n")
    return EXIT_OK if suite.passed else EXIT_RUNTIME


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "synth": cmd_synth, "gradcheck": cmd_gradcheck}


def run(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        err.write(f"{exc}\n")
        return EXIT_USAGE
    threads = os.environ.get("AUATTN_THREADS")
    limiter = ad.set_num_threads(int(threads)) if threads else None
    try:
        return COMMANDS[args.command](args, out)
    except (OSError, ValueError, RuntimeError, ConfigError) as exc:
        err.write(f"auattn {args.command}: {exc}\n")
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
