"""Command-line entry point: ``run``, ``sweep`` and ``oracle`` subcommands."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, coerce_value, parse_config
from .harness import run_experiment, sweep

FLAGS = {
    "--task": ("task", str),
    "--algorithm": ("algorithm", str),
    "--clients": ("clients", int),
    "--rounds": ("rounds", int),
    "--non-iid-p": ("non_iid_p", int),
    "--snr-db": ("snr_db", float),
    "--power": ("power", float),
    "--tau-max": ("tau_max", int),
    "--beta-rule": ("beta_rule", str),
    "--eta": ("eta", float),
    "--seed": ("seed", int),
    "--out": ("out", str),
}

SWEEP_AXES = ("snr_db", "non_iid_p", "algorithm", "seed")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; flags override its values")
    for flag, (dest, kind) in FLAGS.items():
        p.add_argument(flag, dest=dest, type=kind, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acpc-ota")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="run one experiment"))
    sw = sub.add_parser("sweep", help="run a grid of experiments")
    _add_common(sw)
    sw.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2,...",
                    help=f"sweep axis, one of {', '.join(SWEEP_AXES)} (repeatable)")
    orc = sub.add_parser("oracle", help="run a theory oracle")
    _add_common(orc)
    orc.add_argument("which", choices=("theorem1", "example1"))
    return parser


def _overrides(args) -> dict:
    values = {dest: getattr(args, dest) for dest, _ in FLAGS.values()}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    return values


def _axes(specs: list[str]) -> dict[str, list]:
    axes = {}
    for spec in specs:
        name, sep, values = spec.partition("=")
        name = name.strip().replace("-", "_")
        if name == "p":
            name = "non_iid_p"
        if not sep or name not in SWEEP_AXES:
            raise ConfigError(f"bad sweep axis {spec!r}; axes are {', '.join(SWEEP_AXES)}",
                              field=name)
        axes[name] = [coerce_value(name, v) for v in values.split(",") if v.strip()]
    return axes


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(args)
        if args.command == "oracle":
            overrides["task"] = f"oracle_{args.which}"
        cfg = parse_config(args.config, overrides)
        if args.command == "sweep":
            rows = sweep(cfg, _axes(args.axis))
            failed = [r for r in rows if str(r["status"]).startswith("failed")]
            print(f"{len(rows)} runs, {len(failed)} failed; table at {cfg.out}/table.csv")
            return 1 if failed else 0
        result = run_experiment(cfg)
    except ConfigError as exc:
        where = f" (line {exc.line})" if exc.line else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return 2
    for key, value in result.summary.items():
        print(f"{key}: {value}")
    return result.status
