"""Command line entry point: ``mtsadv train-teacher | attack | report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .data import TsParseError
from .pipeline import PipelineConfig, PipelineError, cmd_attack, cmd_report, cmd_train_teacher

log = logging.getLogger("mtsadv")

_LIST_FIELDS = {"betas": float, "split_fractions": float}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML file with pipeline settings; flags override it")
    defaults = PipelineConfig()
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if f.name in _LIST_FIELDS:
            p.add_argument(flag, nargs="+", type=_LIST_FIELDS[f.name], default=None)
        elif isinstance(default, bool):
            p.add_argument(flag, type=_bool, default=None, metavar="BOOL")
        elif f.name == "gamma":
            p.add_argument(flag, type=float, default=None)
        elif isinstance(default, int):
            p.add_argument(flag, type=int, default=None)
        elif isinstance(default, float):
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, default=None)


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    raw = PipelineConfig.from_file(args.config).to_dict() if args.config else {}
    for f in fields(PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            raw[f.name] = value
    return PipelineConfig.from_dict(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtsadv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train-teacher", help="fit the FCN or precompute the DTW distance tensor")
    _add_config_flags(p)
    p = sub.add_parser("attack", help="distil, train one generator per beta and evaluate")
    _add_config_flags(p)
    p = sub.add_parser("report", help="combine run directories and compare attacks")
    p.add_argument("runs", nargs="+", help="output directories of earlier attack runs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--evaluated-on", choices=("eval", "test"), default="eval")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            result = cmd_report(args.runs, args.out_dir, args.evaluated_on)
            if "notice" in result:
                print(result["notice"])
            return 0
        cfg = config_from_args(args)
        if args.command == "train-teacher":
            print(json.dumps(cmd_train_teacher(cfg), sort_keys=True))
        else:
            reports = cmd_attack(cfg)
            for r in reports:
                mse = "-" if r.mse is None else f"{r.mse:.6g}"
                print(f"{r.evaluated_on:5s} beta={r.beta:.0e} adversaries={r.adversary_count}/{r.n_evaluated} mse={mse}")
        return 0
    except PipelineError as exc:
        cause = exc.__cause__
        if isinstance(cause, TsParseError):
            print(f"error: {cause}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
