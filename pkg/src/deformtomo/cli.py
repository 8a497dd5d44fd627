"""Command-line entry point: ``deformtomo {simulate,reconstruct,fbp,evaluate,pipeline}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config
from .io import MrcError
from .reconstruct import TrainingAborted

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERICS = 5

BUNDLE_FILES = ("tilts.mrc", "clean.mrc", "deformed_clean.mrc", "volume_true.mrc", "deformations.gt",
                "meta.json", "config.ini")
RECON_FILES = ("field.ckpt", "deform.ckpt", "volume.mrc", "loss.csv", "config.ini")
REPORT_FILES = ("table1.csv", "fsc.csv", "summary.json", "config.ini")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformtomo", description="Deformation-aware tomographic reconstruction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, bundle: bool):
        p.add_argument("--config", type=Path, help="INI run configuration (defaults if omitted)")
        p.add_argument("--seed", type=int, help="derive all stage seeds from this value")
        if bundle:
            p.add_argument("--bundle", type=Path, required=True, help="bundle directory written by simulate")
            p.add_argument("--out", type=Path, help="output directory (default: inside the bundle)")
        else:
            p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("simulate", help="phantom -> deformed, noisy tilt-series bundle")
    common(p, bundle=False)
    p.add_argument("--snr-db", type=float, help="override the noise level")

    p = sub.add_parser("reconstruct", help="fit the neural field to a bundle")
    common(p, bundle=True)
    p.add_argument("--mode", choices=("est", "est-wo"), default="est")
    p.add_argument("--iterations", type=int, help="override the iteration count")

    p = sub.add_parser("fbp", help="filtered back-projection baseline")
    common(p, bundle=True)

    p = sub.add_parser("evaluate", help="metrics and report for every reconstruction in a bundle")
    common(p, bundle=True)

    p = sub.add_parser("pipeline", help="simulate, reconstruct both modes, fbp and evaluate")
    common(p, bundle=False)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--iterations", type=int)
    return parser


def _resolve(args):
    cfg = load_config(args.config, seed=args.seed)
    if getattr(args, "snr_db", None) is not None:
        cfg = cfg.override("noise", snr_db=args.snr_db)
    if getattr(args, "iterations", None) is not None:
        cfg = cfg.override("train", iterations=args.iterations)
    return cfg


def _check(directory, names) -> None:
    missing = pipeline.validate_outputs(directory, names)
    if missing:
        raise OSError(f"{directory}: missing outputs {missing}")


def run(args) -> None:
    cfg = _resolve(args)
    if args.command == "simulate":
        _check(pipeline.simulate(cfg, args.out), BUNDLE_FILES)
    elif args.command == "reconstruct":
        _check(pipeline.reconstruct(cfg, args.bundle, args.mode, args.out), RECON_FILES)
    elif args.command == "fbp":
        _check(pipeline.run_fbp(cfg, args.bundle, args.out), ("volume.mrc", "config.ini"))
    elif args.command == "evaluate":
        pipeline.evaluate(cfg, args.bundle, args.out)
        _check(args.out or args.bundle / "report", REPORT_FILES)
    elif args.command == "pipeline":
        pipeline.run_pipeline(cfg, args.out)
        _check(args.out / "report", REPORT_FILES)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        run(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, MrcError) as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_IO
    except (TrainingAborted, FloatingPointError) as err:
        print(f"numerics error: {err}", file=sys.stderr)
        return EXIT_NUMERICS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
