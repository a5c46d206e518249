"""``softdistill`` command-line entry point.

    softdistill <stage> --config PATH [--set section.key=value]... [--jobs N] [--out DIR]

Stages: gen-data, train-teacher, curate, distill, finetune, evaluate, sweep, plot.
On failure a single line ``error kind=<Kind> stage=<stage> message=<text>`` goes to
stderr and the exit status is nonzero (2 config, 3 missing dependency, 1 other).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .data import DatasetFileError
from .pipelines import CheckpointError, ConfigurationError, DivergenceError, TeacherQualityError
from .plot import PlotError, plot_csv
from .workflow import STAGES, DependencyError, run_stage, run_sweep

COMMANDS = (*STAGES, "sweep", "plot")

EXIT_CODES = {
    ConfigError: 2,
    ConfigurationError: 2,
    PlotError: 2,
    DependencyError: 3,
    TeacherQualityError: 4,
    DivergenceError: 5,
    DatasetFileError: 6,
    CheckpointError: 6,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softdistill", description="Label-free distillation lab")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="experiment config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. distill.weight_decay=3e-5")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    p.add_argument("--out", type=Path, help="output directory (SOFTDISTILL_OUT takes precedence)")
    plot = p.add_argument_group("plot")
    plot.add_argument("--input", type=Path, help="metrics or sweep CSV to plot")
    plot.add_argument("--series", default="stage", help="column that splits the lines")
    plot.add_argument("--x", default="epoch")
    plot.add_argument("--y", default="train_loss")
    plot.add_argument("--output", type=Path, help="SVG path to write")
    return p


def _out_dir(args, cfg) -> Path:
    env = os.environ.get("SOFTDISTILL_OUT")
    if env:
        return Path(env)
    if args.out is not None:
        return args.out
    return cfg.output_dir


def _run(args) -> list[Path]:
    if args.command == "plot":
        if args.input is None or args.output is None:
            raise ConfigError("plot needs --input and --output")
        return [plot_csv(args.input, args.series, args.output, args.x, args.y)]
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config")
    cfg = parse_config(args.config).with_overrides(args.overrides)
    out = _out_dir(args, cfg)
    if args.command == "sweep":
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return [run_sweep(cfg, out, jobs=args.jobs)]
    return run_stage(args.command, cfg, out)


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        paths = _run(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
        print(
            f"error kind={type(exc).__name__} stage={args.command} message={_one_line(exc)!r}",
            file=sys.stderr,
        )
        return code
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
