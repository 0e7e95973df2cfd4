"""Command-line front end.

Subcommands share ``--config PATH`` (YAML or JSON, schema-validated),
``--seed N``, ``--jobs N`` and ``--set KEY=VALUE`` overrides of scalar
fields. Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import jsonschema
import yaml

from . import pipeline as pl

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4

log = logging.getLogger("coopstart")


class ConfigError(ValueError):
    """The experiment configuration is malformed or inconsistent."""


def config_schema() -> dict:
    path = Path(__file__).with_name("schemas") / "experiment.schema.json"
    return json.loads(path.read_text())


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        nxt = cur.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot override {dotted}: {k} is not a section")
        cur = nxt
    if isinstance(cur.get(keys[-1]), dict):
        raise ConfigError(f"{dotted} is a section, only scalar fields can be overridden")
    cur[keys[-1]] = value


def load_config(
    path: str | Path | None, overrides: Sequence[str] = (), seed: int | None = None
) -> tuple[pl.ExperimentConfig, Path]:
    """Parse, override, validate and build the experiment config; returns it with its base directory."""
    if path is None:
        doc: dict = {"version": pl.CONFIG_VERSION}
        base = Path.cwd()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            doc = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{p} does not contain a mapping")
        base = p.resolve().parent
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    try:
        cfg = pl.ExperimentConfig.from_dict(doc)
        if seed is not None:
            cfg = cfg.with_seed(seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, base


def _paths(args) -> pl.Paths:
    cfg, base = load_config(args.config, args.set or (), args.seed)
    return pl.Paths(base, cfg)


def cmd_simgen(args) -> int:
    paths = _paths(args)
    cam, ins = pl.make_datasets(paths, args.jobs)
    print(f"wrote {cam}")
    print(f"wrote {ins}")
    return EXIT_OK


def cmd_train(args) -> int:
    paths = _paths(args)
    stage = {"sd": pl.stage_train_sd, "cnn-micro": pl.stage_train_cnn, "coop": pl.stage_train_coop}[args.which]
    print(f"wrote {stage(paths, args.jobs)}")
    return EXIT_OK


def cmd_detect(args) -> int:
    paths = _paths(args)
    dataset = Path(args.dataset) if args.dataset else None
    for p in pl.stage_detect(paths, args.which, dataset):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_eval(args) -> int:
    paths = _paths(args)
    result = pl.stage_eval(paths, args.jobs)
    for d in pl.DETECTORS:
        best = result.summary["detectors"][d]["best"]
        print(f"{d:5s} best F1 {best['f1']:.4f} at threshold {best['threshold']:.2f}")
    print(f"wrote {paths.output / 'summary.json'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    paths = _paths(args)
    dataset = Path(args.dataset) if args.dataset else None
    n = args.thresholds or paths.config.thresholds
    for p in pl.stage_sweep(paths, args.which, n, dataset):
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (YAML or JSON); defaults apply without one")
    common.add_argument("--seed", type=int, help="shift every seed of the experiment to this base seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scalar config field")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="coopstart", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simgen", parents=[common], help="generate the camera and instructed datasets")
    p.set_defaults(func=cmd_simgen)

    p = sub.add_parser("train", parents=[common], help="train one detector on the generated data")
    p.add_argument("--which", required=True, choices=("sd", "cnn-micro", "coop"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="apply trained bundles and write detection traces")
    p.add_argument("--which", nargs="+", default=list(pl.DETECTORS), choices=pl.DETECTORS)
    p.add_argument("--dataset", help="dataset directory or manifest (default: instructed dataset)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="cross-validated evaluation of all detectors")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="threshold sweep over written detection traces")
    p.add_argument("--which", nargs="+", default=list(pl.DETECTORS), choices=pl.DETECTORS)
    p.add_argument("--thresholds", type=int, help="number of grid points (default from config)")
    p.add_argument("--dataset", help="dataset the traces belong to (default: instructed dataset)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pl.MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
