"""Command-line entry point.

Subcommands:
  run     train one configuration, writing a per-epoch CSV learning curve
  sweep   run the methods x learning-rate grid and summarize best settings
  verify  run the property verification suites (exit 3 on any failure)
  export  materialize a checkpoint's effective weights for plain inference

Exit codes: 0 success, 1 usage/config/data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from typing import Optional

from . import harness
from .data import FormatError, LengthError
from .harness import ConfigError, RunConfig
from .linalg import LinalgError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (defaults apply otherwise)")
    p.add_argument("--dataset-dir", help="directory holding the IDX dataset files")
    p.add_argument("--out-dir", help="directory for CSV/summary/checkpoint output")
    p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orthonet",
        description="Orthogonal weight learning experiments: train MLPs whose "
        "linear layers keep row-orthonormal weights, compare against manifold "
        "and reparameterization baselines, and verify the math.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train one configuration")
    _add_common(run_p)

    sweep_p = sub.add_parser("sweep", help="run the method x lr grid")
    _add_common(sweep_p)
    sweep_p.add_argument(
        "--jobs", type=int, default=1, help="parallel grid points (default 1)"
    )

    verify_p = sub.add_parser("verify", help="run property verification suites")
    verify_p.add_argument(
        "--suite",
        default="all",
        choices=sorted(harness.SUITES) + ["all"],
        help="which suite to run (default: all)",
    )
    verify_p.add_argument("--seed", type=int, default=0)

    export_p = sub.add_parser(
        "export", help="convert a checkpoint to plain inference weights"
    )
    export_p.add_argument("--checkpoint", required=True, help="input checkpoint path")
    export_p.add_argument("--out", required=True, help="output checkpoint path")
    return parser


def _resolve_config(args) -> RunConfig:
    config = harness.load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.dataset_dir:
        config = dataclasses.replace(config, dataset_dir=args.dataset_dir)
    return config


def _cmd_run(args) -> int:
    config = _resolve_config(args)
    out_dir = args.out_dir or "runs"
    result = harness.run_experiment(config, out_dir=out_dir)
    if result.diverged:
        print(
            f"{result.method} lr={result.lr:g}: DIVERGED at epoch "
            f"{result.diverged_epoch} (loss {result.trigger_loss:g})"
        )
    else:
        print(
            f"{result.method} lr={result.lr:g}: {result.epochs_completed} epochs, "
            f"final train_loss={result.final_train_loss:.6g} "
            f"train_err={result.train_err[-1]:.4f} test_err={result.test_err[-1]:.4f}"
        )
    if result.csv_path:
        print(f"curve: {result.csv_path}")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_sweep(args) -> int:
    config = _resolve_config(args)
    out_dir = args.out_dir or "runs"
    _, summary = harness.sweep(config, out_dir=out_dir, jobs=args.jobs)
    print(summary, end="")
    return 0


def _cmd_verify(args) -> int:
    names = sorted(harness.SUITES) if args.suite == "all" else [args.suite]
    failed = False
    for name in names:
        report = harness.verify(name, seed=args.seed)
        print(report.text())
        failed = failed or not report.passed
    return 3 if failed else 0


def _cmd_export(args) -> int:
    harness.export_inference_checkpoint(args.checkpoint, args.out)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "verify": _cmd_verify,
    "export": _cmd_export,
}


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (
        ConfigError,
        FormatError,
        LengthError,
        LinalgError,
        FileNotFoundError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
