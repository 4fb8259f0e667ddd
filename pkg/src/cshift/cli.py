"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numeric failure. Progress goes to stderr; results go to files.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, FormatError, InvalidMap, NumericsError, ShapeError, WriteError
from .pipeline import (ablation, compare_runs, mmd_experiment, node_sweep, run_pipeline,
                       weak_expert, write_dataset)

log = logging.getLogger("cshift")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
METRIC_CHOICES = ("l1", "l2", "psnr", "ssim", "var", "perc")
EXPERIMENTS = {"node-sweep": node_sweep, "weak-expert": weak_expert, "ablation": ablation}


def _workers(value: int | None) -> int:
    if value is not None:
        if value < 1:
            raise ConfigError("--workers must be >= 1")
        return value
    env = os.environ.get("CSHIFT_WORKERS", "")
    if not env:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"CSHIFT_WORKERS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("CSHIFT_WORKERS must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cshift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel workers (default: $CSHIFT_WORKERS or 1)")

    p = sub.add_parser("gen-dataset", help="render the synthetic dataset to disk")
    common(p, out_required=True)
    p.add_argument("--png", action="store_true", help="also export rgb as PNG")

    p = sub.add_parser("run", help="expert initialization plus consensus-shift iterations")
    common(p)
    p.add_argument("--iters", type=int, default=None, help="number of iterations")
    p.add_argument("--metric", choices=METRIC_CHOICES, default=None)
    p.add_argument("--dataset", default=None, help="dataset directory from gen-dataset")

    p = sub.add_parser("experiment", help="graph-level experiments")
    p.add_argument("name", choices=(*EXPERIMENTS, "mmd"))
    common(p)
    p.add_argument("--dataset", default=None, help="dataset directory from gen-dataset")

    p = sub.add_parser("compare", help="metric-comparison table over finished runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


def _dispatch(args) -> None:
    if args.command == "compare":
        compare_runs(args.runs, args.out)
        return
    cfg = load_config(args.config)
    workers = _workers(args.workers)
    if args.command == "gen-dataset":
        write_dataset(cfg, args.out, png=args.png)
        return
    out = Path(args.out or cfg.output)
    if args.command == "run":
        if args.iters is not None and args.iters < 0:
            raise ConfigError("--iters must be >= 0")
        run_pipeline(cfg, out, workers, args.iters, args.metric, args.dataset)
    elif args.name == "mmd":
        mmd_experiment(cfg, out, workers)
    else:
        EXPERIMENTS[args.name](cfg, out, workers, args.dataset)
    log.info("results in %s", out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        _dispatch(args)
    except (ConfigError, ShapeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericsError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (WriteError, FormatError, InvalidMap, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
