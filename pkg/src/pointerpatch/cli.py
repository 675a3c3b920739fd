"""Command line entry point.

    pointerpatch train   --config exp.yaml --out runs/train0
    pointerpatch attack  --config exp.yaml --out runs/cp0 --seed 1
    pointerpatch sweep   --config sweep.yaml --out runs/sizes --parallel 4
    pointerpatch eval    --config exp.yaml --out runs/eval0
    pointerpatch heatmap --config exp.yaml --out runs/maps
    pointerpatch report  runs/cp0 runs/sp0 --out runs/summary

Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime failure.
The default output root comes from ``POINTERPATCH_OUT`` (else ``./runs``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import COMMANDS, ConfigError, ExperimentConfig, load_config
from .attack.plan import PlanError

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
OUT_ENV = "POINTERPATCH_OUT"

log = logging.getLogger("pointerpatch")


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointerpatch", description="Pointer-redirection patch attacks on toy deformable detectors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
        p.add_argument("--out", type=Path, help=f"run directory (default ${OUT_ENV}/<command>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--parallel", type=int, default=1, help="worker processes for sweeps")
        p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        p.add_argument("--checkpoint", type=Path, help="model checkpoint (overrides the config)")
    rep = sub.add_parser("report")
    rep.add_argument("runs", nargs="+", type=Path)
    rep.add_argument("--out", type=Path)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.command = args.subcommand
    if args.seed is not None:
        cfg.seed = args.seed
    if args.checkpoint is not None:
        cfg.checkpoint = str(args.checkpoint)
    if args.parallel < 1:
        raise ConfigError("--parallel must be >= 1")
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    from . import runner

    try:
        if args.subcommand == "report":
            out = args.out or default_out_root() / "report"
            rows = runner.emit_report(args.runs, out)
            for r in rows:
                print(f"{r['run']}: {r['status']} {r['strategy'] or ''} final={r['final_metric']}")
            return EXIT_OK
        cfg = resolve_config(args)
        out = args.out or (Path(cfg.out_dir) if cfg.out_dir else default_out_root() / cfg.command)
        run_dir = runner.run_command(cfg, out, force=args.force, parallel=args.parallel)
        print(run_dir)
        return EXIT_OK
    except (ConfigError, PlanError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # runtime failure inside a run
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
