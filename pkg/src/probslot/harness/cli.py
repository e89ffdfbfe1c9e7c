"""Command-line entry point.

Every subcommand reads ``--config`` (optional) and applies flag overrides;
``--set key=value`` reaches any config key. A JSON summary goes to stdout.
Exit codes: 0 success, 2 contract violation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from ..errors import ContractError
from . import commands
from .config import RunConfig, apply_overrides, load_config

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_NUMERICAL = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probslot", description="Probabilistic slot attention experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        sp.add_argument("--out-dir", help="output directory")
        return sp

    sp = add("synth", "generate the synthetic point-set dataset")
    sp.add_argument("--scenes", type=int)
    sp.add_argument("--dataset", help="dataset path")
    sp.add_argument("--export-csv", action="store_true")

    sp = add("train", "train one checkpoint per seed")
    sp.add_argument("--seeds", help="comma-separated seed list")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--dataset")

    sp = add("aggregate", "build and export the aggregate posterior")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--output", help="mixture file to write")

    sp = add("identifiability", "pairwise SMCC / R2 / aggregate alignment across runs")
    sp.add_argument("--checkpoints", nargs="+")
    sp.add_argument("--dataset")

    sp = add("ard-report", "active-slot counts and decode savings")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--tau", type=float)

    sp = add("sample", "draw from an aggregate or concatenated slot mixture")
    sp.add_argument("--source", required=True, help="mixture file or checkpoint")
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--mode", choices=("aggregate", "concat"), default="aggregate")
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--dataset")
    sp.add_argument("--output")

    sp = add("plot", "render SVG figures")
    sp.add_argument("inputs", nargs="+")
    return p


def build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ContractError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key] = value
    for flag in ("scenes", "dataset", "seeds", "epochs", "tau"):
        value = getattr(args, flag, None)
        if value is not None:
            values[flag] = str(value)
    if getattr(args, "export_csv", False):
        values["export_csv"] = "true"
    if args.out_dir:
        values["out_dir"] = args.out_dir
    return apply_overrides(cfg, values) if values else cfg


def run(argv=None) -> dict:
    args = _parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(name)s: %(message)s")
    cfg = build_config(args)
    cmd = args.command
    if cmd == "synth":
        return commands.cmd_synth(cfg)
    if cmd == "train":
        return commands.cmd_train(cfg)
    if cmd == "aggregate":
        return commands.cmd_aggregate(cfg, args.checkpoint, args.output)
    if cmd == "identifiability":
        report = commands.cmd_identifiability(cfg, args.checkpoints)
        return {k: v for k, v in report.items() if k == "report" or k.startswith("mean_")}
    if cmd == "ard-report":
        stats = commands.cmd_ard_report(cfg, args.checkpoint)
        stats.pop("per_scene_active")
        return stats
    if cmd == "sample":
        return commands.cmd_sample(cfg, args.source, args.count, args.mode, args.scene, args.output)
    if cmd == "plot":
        return commands.cmd_plot(cfg, args.inputs, args.out_dir)
    raise ContractError(f"unknown command {cmd!r}")  # pragma: no cover


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))


def main(argv=None) -> int:
    try:
        result = run(argv)
    except ArithmeticError as exc:  # includes NumericalError
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    print(json.dumps(result, indent=1, default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
