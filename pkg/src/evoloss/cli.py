"""Command line entry point: ``evoloss <command> --config run.json``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .harness import ConfigError, ExperimentConfig
from .report import read_history, write_report

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evoloss", description="Evolve multi-task loss weights on synthetic video.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON); defaults if omitted")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    sp = common(sub.add_parser("init-config", help="write a default config file"))
    sp.add_argument("path")
    common(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    sp = common(sub.add_parser("evolve", help="search loss weights"))
    sp.add_argument("--strategy", choices=["tournament", "cmaes", "random", "grid"])
    sp.add_argument("--fitness", choices=list(harness.FITNESS_MODES))
    sp.add_argument("--budget", type=int)
    sp = common(sub.add_parser("train", help="train a full model with a weights file"))
    sp.add_argument("--weights", help=f"defaults to <out>/{harness.BEST}")
    sp = common(sub.add_parser("eval", help="probe a checkpoint"))
    sp.add_argument("--protocol", choices=list(harness.PROTOCOLS), default="linear")
    sp.add_argument("--checkpoint", help=f"defaults to <out>/{harness.CHECKPOINT}")
    sp = common(sub.add_parser("report", help="write CSV tables from history files"))
    sp.add_argument("--history", help=f"defaults to <out>/{harness.HISTORY}")
    sp.add_argument("--compare", nargs="*", default=[], help="more histories for the strategy summary")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(
        seed=args.seed, out_dir=args.out,
        strategy=getattr(args, "strategy", None),
        fitness=getattr(args, "fitness", None),
        budget=getattr(args, "budget", None),
    )


def run(args) -> int:
    cfg = load_config(args)
    if args.command == "init-config":
        cfg.save(args.path)
        print(f"wrote {args.path}")
    elif args.command == "gen-data":
        path, hist = harness.cmd_gen_data(cfg)
        print(f"wrote {path} ({cfg.dataset.num_clips} clips)")
        for c, n in enumerate(hist):
            print(f"class {c}: {n}")
    elif args.command == "evolve":
        weights, history = harness.cmd_evolve(cfg)
        best = max(r["fitness"] for r in history)
        print(f"{len(history)} evaluations, best fitness {best:.6f}")
        print(weights.to_text(), end="")
    elif args.command == "train":
        path = harness.cmd_train_final(cfg, args.weights)
        print(f"wrote {path}")
    elif args.command == "eval":
        res = harness.cmd_eval(cfg, args.protocol, args.checkpoint)
        print(f"{res.protocol} accuracy {res.accuracy:.4f}")
    elif args.command == "report":
        hist = read_history(args.history or cfg.out / harness.HISTORY)
        extra = [read_history(h) for h in args.compare]
        for name, path in write_report(cfg.out, hist, cfg.keys, extra).items():
            print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"evoloss: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, RuntimeError, PermissionError) as exc:
        print(f"evoloss: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
