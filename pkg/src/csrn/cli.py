"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 numeric divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import connect, maze
from .errors import ConditioningError, ConfigError, CSRNError, DivergenceError
from .harness import (BENCHMARKS, TRAINERS, ExperimentConfig, emit_plot_data, evaluate,
                      load_weights, make_task, run_experiment)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not exit status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config_flags(p, cycles=True):
    p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    p.add_argument("--seed", type=int, help="base seed (data, weights, transform = s, s+1, s+2)")
    p.add_argument("--benchmark", choices=BENCHMARKS)
    p.add_argument("--trainer", choices=TRAINERS)
    if cycles:
        p.add_argument("--cycles", type=int, help="training cycle cap")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csrn", description="Cellular SRN experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, bench in (("gen-mazes", "maze"), ("gen-patterns", "connect")):
        p = sub.add_parser(name, help=f"write a seeded {bench} train/test split")
        _add_config_flags(p, cycles=False)
        p.add_argument("--out", type=Path, required=True)
        p.set_defaults(fixed_benchmark=bench)

    p = sub.add_parser("train", help="run one experiment and persist its outputs")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="score saved weights on a dataset directory")
    _add_config_flags(p, cycles=False)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("plot-data", help="metrics.json -> tab-separated columns")
    p.add_argument("--metrics", type=Path, required=True)
    p.add_argument("--out", type=Path, help="output file (default stdout)")
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    bench = getattr(args, "fixed_benchmark", None) or args.benchmark
    if bench:
        changes["benchmark"] = bench
    if args.trainer:
        changes["trainer"] = args.trainer
    if getattr(args, "cycles", None) is not None:
        changes["max_cycles"] = args.cycles
    cfg = dataclasses.replace(cfg, **changes)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _generate(args):
    cfg = config_from_args(args)
    task = make_task(cfg)
    train, test = task.generate(cfg.data_seed)
    task.save(train, args.out / "train", "train")
    task.save(test, args.out / "test", "test")
    print(f"wrote {len(train)} training and {len(test)} test items to {args.out}")


def _train(args):
    cfg = config_from_args(args)
    result = run_experiment(cfg, args.out)
    rec = result.final
    print(f"stopped after cycle {rec.cycle} ({result.stop_reason}): "
          f"train sse {rec.train_sse:.4g}, test sse {_fmt(rec.test_sse)}, "
          f"test {make_task(cfg).score_name} {_fmt(rec.test_score)}")


def _load_items(cfg, directory: Path):
    if not directory.is_dir():
        raise ConfigError(f"data directory {directory} does not exist")
    if cfg.benchmark == "maze":
        items = maze.load_mazes(directory, "*")
    else:
        items = connect.load_patterns(directory, "*")
    if not items:
        raise ConfigError(f"no {cfg.benchmark} files in {directory}")
    return items


def _eval(args):
    cfg = config_from_args(args)
    task = make_task(cfg)
    data = task.make_dataset(_load_items(cfg, args.data))
    w = load_weights(args.weights, task.grid)
    sse, score, settled = evaluate(task, w, data)
    print(f"items {len(data)}  sse/pattern {sse:.6g}  {task.score_name} {score:.2f}  "
          f"settled {settled:.2f}")


def _plot(args):
    text = emit_plot_data(args.metrics)
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)


def _fmt(v):
    return "n/a" if v is None else f"{v:.4g}"


COMMANDS = {"gen-mazes": _generate, "gen-patterns": _generate, "train": _train,
            "eval": _eval, "plot-data": _plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (DivergenceError, ConditioningError, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CSRNError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
