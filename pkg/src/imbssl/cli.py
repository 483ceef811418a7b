"""Command line entry point (``imbssl``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .config import load_config, parse_override, set_path
from .dataset import synthetic_corpus, write_corpus
from .errors import ImbsslError, InvalidConfigError, MissingArtifactsError, RunLockedError, StageError

# flags that mirror top-level config keys; anything deeper goes through --set
_MIRRORED = {
    "name": str,
    "method": str,
    "seed": int,
    "budget": int,
    "output_dir": str,
    "device": str,
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", required=True, help="YAML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE",
                   help="override a config value (repeatable; wins over the file)")
    for key, typ in _MIRRORED.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)


def _config(args):
    overrides = dict(parse_override(o) for o in args.overrides)
    for key in _MIRRORED:
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _print_rows(rows) -> None:
    if rows:
        print(harness.render_table(rows), end="")


def cmd_stage(args) -> int:
    cfg = _config(args)
    until = args.verb
    if until == "pretrain" and "base" in harness.plan(cfg):
        until = "base"
    if until == "build":
        until = "dataset"
    rows = harness.run(cfg, until=until)
    _print_rows(rows)
    if until == "dataset":
        print((harness.resolve_run_dir(cfg) / "logs" / "distribution.csv").read_text(), end="")
    return 0


def cmd_run(args) -> int:
    _print_rows(harness.run(_config(args)))
    return 0


def cmd_synth(args) -> int:
    corpus = synthetic_corpus(args.classes, args.train_per_class, args.test_per_class, args.seed,
                              pattern=args.pattern, noise=args.noise)
    path = write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.train)} train / {len(corpus.test)} test records to {path}")
    return 0


def cmd_grid(args) -> int:
    grid_path = Path(args.grid)
    grid = yaml.safe_load(grid_path.read_text()) or {}
    for o in args.overrides:
        key, value = parse_override(o)
        set_path(grid.setdefault("overrides", {}), key, value)
    configs = harness.expand_grid(grid, grid_path.parent)
    out = Path(args.out) if args.out else harness.artifact_root() / grid.get("output_dir", "runs/grid")
    result = harness.run_grid(configs, out)
    _print_rows(result.rows)
    for name, err in result.failures.items():
        print(f"FAILED {name}: {err}", file=sys.stderr)
    return 1 if result.failures else 0


def cmd_report(args) -> int:
    print(harness.report(args.run_dir), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imbssl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)

    ds = sub.add_parser("dataset", help="build or synthesize datasets")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    build = ds_sub.add_parser("build", help="materialize the run's pre-training subset")
    _add_config_args(build)
    build.set_defaults(func=cmd_stage, verb="build")
    synth = ds_sub.add_parser("synth", help="write a synthetic corpus in the binary batch format")
    synth.add_argument("--out", required=True)
    synth.add_argument("--classes", type=int, default=10)
    synth.add_argument("--train-per-class", type=int, default=5000)
    synth.add_argument("--test-per-class", type=int, default=1000)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--pattern", choices=("grating", "noise"), default="grating")
    synth.add_argument("--noise", type=float, default=40.0)
    synth.set_defaults(func=cmd_synth)

    for verb in ("pretrain", "cluster", "experts", "distill", "lineval"):
        p = sub.add_parser(verb, help=f"run the pipeline up to and including '{verb}'")
        _add_config_args(p)
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("run", help="run the full pipeline for one config")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="run a subsets x methods x seeds grid")
    p.add_argument("grid")
    p.add_argument("--out", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="render tables and plot data from finished runs")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return harness.EXIT_CODES.get(exc.stage, 1)
    if isinstance(exc, InvalidConfigError):
        return harness.EXIT_CODES["config"]
    if isinstance(exc, MissingArtifactsError):
        return harness.EXIT_CODES["artifacts"]
    if isinstance(exc, RunLockedError):
        return harness.EXIT_CODES["locked"]
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ImbsslError, FileNotFoundError) as exc:
        print(f"imbssl: error: {exc}", file=sys.stderr)
        if isinstance(exc, FileNotFoundError):
            return harness.EXIT_CODES["artifacts"]
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
