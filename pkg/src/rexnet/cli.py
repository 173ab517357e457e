"""``rexnet`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .data import DatasetError, gen_synthetic_corpus
from .rxt import RXTFormatError
from .train import TrainingError

log = logging.getLogger("rexnet")

COMMANDS = ("gen", "segment", "train", "predict", "refine-depth", "eval", "gradcheck")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rexnet", description="Region-based saliency pipeline on a dataset directory.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file (defaults used when omitted)")
    p.add_argument("--data", help="dataset root (images/, gt/, edges/, depth/, manifest.csv)")
    p.add_argument("--out", help="output location; default depends on the command")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--checkpoint", help="predict: checkpoint directory (default <data>/run/checkpoint/final)")
    p.add_argument("--pred", help="eval: predictions root (default <data>/pred)")
    p.add_argument("--split", default="test", choices=("train", "test"), help="split used by predict/refine/eval")
    p.add_argument("--workers", type=int, help="process pool size for per-image work")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict[str, str]:
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.workers is not None:
        pairs["workers"] = str(args.workers)
    return pairs


def run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    cmd = args.command
    if cmd == "gradcheck":
        return 0 if pipeline.cmd_gradcheck(cfg) else 1
    if cmd == "gen":
        out = args.out or args.data
        if not out:
            raise ConfigError("gen needs --out (or --data) for the corpus root")
        man = gen_synthetic_corpus(out, cfg.n_train, cfg.n_test, cfg.image_size, cfg.seed)
        log.info("wrote %d samples to %s", len(man.entries), out)
        return 0
    if not args.data:
        raise ConfigError(f"{cmd} needs --data")
    if cmd == "segment":
        pipeline.cmd_segment(cfg, args.data, args.out)
    elif cmd == "train":
        pipeline.cmd_train(cfg, args.data, args.out)
    elif cmd == "predict":
        n = pipeline.cmd_predict(cfg, args.data, args.checkpoint, args.out, args.split)
        log.info("predicted %d images", n)
    elif cmd == "refine-depth":
        n = pipeline.cmd_refine_depth(cfg, args.data, args.out or args.pred, args.split)
        log.info("refined %d images", n)
    elif cmd == "eval":
        for kr in pipeline.cmd_eval(cfg, args.data, args.pred, args.out, args.split):
            s = kr.summary
            print(f"{kr.kind:3s} max_fbeta={s.f_beta:.4f} mae={s.mae:.4f} auc={s.auc:.4f} n={len(kr.per_image)}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigError, DatasetError, RXTFormatError, TrainingError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
