"""Command-line entry point: ``puail {gen-demos,train,sweep,oracle,export-plots}``."""
from __future__ import annotations

import argparse
import sys

from . import bench


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--out", metavar="DIR", help="override the output directory")
    p.add_argument("--method", choices=("uid_gail", "gail", "uid_wail", "wail", "pu_gail", "bc"))
    p.add_argument("--alpha", type=float, help="mixing proportion for UID and PU-GAIL")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="puail", description="Imitation from unlabeled imperfect demonstrations on tabular MDPs."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="sample a mixed demonstration set")
    _common(p)
    p.add_argument("--ratio", type=int, help="number of non-optimal sources per optimal one")

    p = sub.add_parser("train", help="train one method on the demonstration file")
    _common(p)

    p = sub.add_parser("sweep", help="run the configured sweep and write a summary table")
    _common(p)
    p.add_argument("--workers", type=int, help="parallel worker processes")

    p = sub.add_parser("oracle", help="run the exact-expectation check battery")
    _common(p)
    p.add_argument("--self-test", action="store_true", help="inject a wrong alpha; the battery must fail")

    p = sub.add_parser("export-plots", help="convert run records into tidy CSV files")
    p.add_argument("runs", nargs="+", metavar="RUN_FILE")
    p.add_argument("--out", metavar="DIR", default=".")
    return parser


def _config(args) -> bench.ExperimentConfig:
    cfg = bench.load_config(args.config) if args.config else bench.ExperimentConfig()
    cfg = cfg.with_overrides(seed=args.seed, out=args.out, method=args.method, alpha=args.alpha)
    if getattr(args, "workers", None):
        cfg = bench.ExperimentConfig(**{**cfg.__dict__, "workers": args.workers})
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export-plots":
            bench.cmd_export_plots(args.runs, args.out)
            return 0
        cfg = _config(args)
        if args.command == "gen-demos":
            bench.cmd_gen_demos(cfg, args.ratio)
        elif args.command == "train":
            rec, _ = bench.cmd_train(cfg)
            return 1 if rec.aborted else 0
        elif args.command == "sweep":
            bench.cmd_sweep(cfg)
        elif args.command == "oracle":
            ok, _ = bench.cmd_oracle(cfg, self_test=args.self_test)
            return 0 if ok else 1
    except (bench.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
