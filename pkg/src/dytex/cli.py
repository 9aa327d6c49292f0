"""Command-line entry point.

Keeps module-level imports light so ``--threads`` can pin BLAS thread
counts before numpy loads. Exit codes: 0 success, 2 configuration
error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dytex",
        description="One-shot dynamic texture transfer (guided PatchMatch + "
                    "patch-token forecasting)")
    parser.add_argument("--config", required=True, help="run configuration file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the [run] seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads; 1 = single-threaded reference mode")
    parser.add_argument("--out", default=None, help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("distance-map", "compute contour distance fields for both masks"),
        ("transfer-initial", "search the guided NNF and vote the initial frame"),
        ("train-vqvae", "fit the patch codec on source patches"),
        ("encode", "tokenize all source patches"),
        ("train-forecaster", "train the token sequence model"),
        ("predict", "forecast tokens for the target's subsequent frames"),
        ("merge", "decode predicted tokens and assemble output frames"),
        ("run", "run every stage in order and write the manifest"),
        ("eval", "recompute run metrics from the output artifacts"),
    ):
        sub.add_parser(name, help=doc)
    return parser


def _apply_thread_limit(threads: int) -> None:
    if "numpy" in sys.modules:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    _apply_thread_limit(args.threads)

    from dataclasses import replace

    from .config import load_config
    from .errors import ConfigError, DytexError, StageError
    from .pipeline import evaluate, run_stage, run_transfer

    try:
        cfg = load_config(args.config, validate=False)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out is not None:
            from pathlib import Path
            cfg = replace(cfg, output=Path(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "run":
            frames, manifest = run_transfer(cfg, threads=args.threads)
            print(f"wrote {frames.shape[0]} frames "
                  f"({frames.shape[1]}x{frames.shape[2]}) to {cfg.output / 'frames'}")
            print(f"manifest: {manifest}")
        elif args.command == "eval":
            report = evaluate(cfg)
            for line in report.lines():
                print(line)
        else:
            cfg.validate_paths()
            metrics = run_stage(args.command, cfg)
            for key in sorted(metrics):
                print(f"{key} = {metrics[key]:.6g}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DytexError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
