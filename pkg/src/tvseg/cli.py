"""Command-line entry point: ``tvseg {gen-data,train,eval,gradcheck,ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import LADDER, PRESETS, RunConfig, get_preset, load_config
from .errors import ConfigError, DimensionError, NumericalError, SpecError, UsageError, VocabularyError
from .fileio import FormatError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad arguments; usage errors here are status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _cmd_gen_data(args) -> int:
    from .fileio import write_dataset
    from .world import make_dataset

    clips = make_dataset(args.preset, args.clips, args.seed, args.canvas, args.canvas, args.frames, args.noise)
    write_dataset(args.out, clips)
    print(f"wrote {len(clips)} {args.preset} clips to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .train import train

    cfg = load_config(args.config) if args.config else RunConfig()
    res = train(cfg, get_preset(args.ablation), args.out, echo=print)
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .train import evaluate

    report = evaluate(args.checkpoint, args.data, args.report)
    print(report.table())
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradsuite import CHECKS, run_suite

    names = None
    if args.module:
        if args.module not in CHECKS:
            raise UsageError(f"unknown module {args.module!r}; choose from {', '.join(CHECKS)}")
        names = [args.module]
    results = run_suite(names, args.tol, echo=print)
    failed = [n for n, (rep, _) in results.items() if not rep.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERICAL if failed else EXIT_OK


def _cmd_ablate(args) -> int:
    from .ablation import run_ablation_ladder, run_seed_sweep

    cfg = load_config(args.config) if args.config else RunConfig()
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    if not presets:
        raise UsageError("--presets is empty")
    for p in presets:
        get_preset(p)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
        print(run_seed_sweep(cfg, presets, seeds, args.out, echo=print).render())
    else:
        print(run_ablation_ladder(cfg, presets, args.out, echo=print).render())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tvseg", description="Toy text-based video segmentation: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--preset", choices=("easy", "motion-necessity"), default="easy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.03)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one ablation preset")
    p.add_argument("--config", help="key = value config file (defaults if omitted)")
    p.add_argument("--ablation", default="B+M+T+L+A", help=f"one of {', '.join(PRESETS)}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", help="run a single check")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare several presets")
    p.add_argument("--config")
    p.add_argument("--presets", default=",".join(LADDER))
    p.add_argument("--seeds", help="comma-separated training seeds; one ladder per seed on the same data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, UsageError, FormatError, VocabularyError, SpecError, DimensionError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
