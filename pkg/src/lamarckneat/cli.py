"""Command line front end: ``lamarckneat {evolve,train-best,export,resume}``.

Settings come from a JSON config file, then ``LNEAT_<KEY>`` environment
variables (e.g. ``LNEAT_SEED=3``), then command-line flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runner
from .config import ABLATIONS, ConfigError, load_config
from .datasets import DatasetError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with RunConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--ablation", choices=ABLATIONS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lamarckneat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run the architecture search")
    _add_common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--repeat", type=int, default=1, help="independent runs with consecutive seeds")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("train-best", help="final training of a best-genome file")
    _add_common(p)
    p.add_argument("--genome", type=Path, help="defaults to <output-dir>/best_genome.json")
    p.add_argument("--epochs", type=int, help="overrides final_epochs")

    p = sub.add_parser("export", help="write a genome as DOT or JSON")
    p.add_argument("genome", type=Path)
    p.add_argument("--format", choices=runner.EXPORT_FORMATS, default="dot")
    p.add_argument("--out", type=Path, help="defaults to stdout")

    p = sub.add_parser("resume", help="continue a run from a checkpoint")
    p.add_argument("checkpoint", type=Path)
    _add_common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    return parser


def _config(args):
    overrides = {k: getattr(args, k, None) for k in ("seed", "output_dir", "ablation")}
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evolve":
            config = _config(args)
            if args.repeat > 1:
                rows = runner.run_repeats(config, args.repeat, args.workers, not args.no_figures)
                for r in rows:
                    print(f"seed {r['seed']}: best {r['best_fitness']:.4f}")
            else:
                res = runner.run_evolve(config, args.workers, figures=not args.no_figures)
                print(f"best validation accuracy {res.state.best_fitness:.4f}; log {res.csv_path}")
        elif args.command == "train-best":
            config = _config(args)
            genome = args.genome or Path(config.output_dir) / runner.BEST_NAME
            result = runner.run_train_best(config, genome, epochs=args.epochs)
            print(json.dumps(result, sort_keys=True))
        elif args.command == "export":
            text = runner.export(args.genome, args.format, args.out)
            if args.out is None:
                sys.stdout.write(text)
        elif args.command == "resume":
            config = _config(args) if args.config else None
            if config is None and (args.seed is not None or args.ablation is not None):
                raise ConfigError("--seed/--ablation on resume need --config")
            res = runner.resume(args.checkpoint, config, args.workers, not args.no_figures,
                                output_dir=args.output_dir)
            print(f"best validation accuracy {res.state.best_fitness:.4f}; log {res.csv_path}")
    except (ConfigError, DatasetError, runner.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"lamarckneat: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
