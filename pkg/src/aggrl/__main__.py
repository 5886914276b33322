"""Command line: ``python -m aggrl {train,evaluate,resilience,probe,replay}``.

Flags mirror :class:`ExperimentConfig`; values from ``--config FILE`` win
over flags. Results go under ``$AGGRL_OUT_DIR`` (default ``./runs``) in a
directory named after the verb and the config hash. A JSON summary is
printed on stdout; failures print a JSON error on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zipfile
from dataclasses import MISSING, fields
from pathlib import Path

import yaml

from .errors import (ConfigurationError, ContractViolation, GenerationError,
                     TrainingDivergenceError, TrajectoryParseError)
from .rl import read_checkpoint_meta
from .harness import ExperimentConfig, cmd_evaluate, cmd_probe, cmd_replay, cmd_resilience, cmd_train

OUT_ENV = "AGGRL_OUT_DIR"
EXIT_CODES = {ConfigurationError: 2, ContractViolation: 2, TrajectoryParseError: 3,
              TrainingDivergenceError: 4, GenerationError: 5, OSError: 6,
              zipfile.BadZipFile: 6, ValueError: 2}
NESTED = ("arena", "hyperparams", "gsp")


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _pairs(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"expected KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML/JSON experiment file; its values win over flags")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in NESTED:
            p.add_argument(flag, action="append", metavar="KEY=VALUE",
                           help=f"{f.name} override (repeatable)")
            continue
        kind = type(f.default) if f.default is not MISSING and f.default is not None else float
        if kind is bool:
            kind = int
        p.add_argument(flag, type=kind, default=None, help=f"default: {f.default}")


def _config_from(args, defaults=None) -> ExperimentConfig:
    values = dict(defaults or {})
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is None:
            continue
        values[f.name] = _pairs(v) if f.name in NESTED else v
    if args.config:
        return ExperimentConfig.load(args.config, values)
    return ExperimentConfig.from_dict(values)


def _run_dir(verb: str, config_hash: str) -> Path:
    d = _out_root() / f"{verb}-{config_hash}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="python -m aggrl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a policy, write checkpoint and metrics")
    _add_config_flags(p)

    for verb in ("evaluate", "resilience"):
        p = sub.add_parser(verb, help=f"{verb} a checkpoint over eval_episodes paired scenarios")
        p.add_argument("checkpoint", nargs="?", help="checkpoint zip (omit with --random)")
        p.add_argument("--random", action="store_true", help="evaluate the uniform random policy")
        p.add_argument("--trajectories", type=int, default=0,
                       help="write step logs for the first K episodes")
        _add_config_flags(p)

    p = sub.add_parser("probe", help="sine probe of a GSP checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--n-robots", type=int, default=None)
    p.add_argument("--samples-per-period", type=int, default=200)

    p = sub.add_parser("replay", help="summarize a trajectory CSV")
    p.add_argument("trajectory")
    return ap


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "train":
        config = _config_from(args)
        out = _run_dir("train", config.config_hash())
        config.dump(out / "config.yaml")
        res = cmd_train(config, out)
        return {"checkpoint": str(res.checkpoint), "metrics": str(res.metrics),
                "episodes": res.episodes, "success_rate_last_100": res.success_rate_last_100,
                "best_checkpoint": res.best_checkpoint and str(res.best_checkpoint),
                "best_validation": res.best_validation,
                "config_hash": config.config_hash()}
    if args.verb in ("evaluate", "resilience"):
        if (args.checkpoint is None) != bool(args.random):
            raise ConfigurationError("give a checkpoint or --random, not both")
        defaults = {"n_robots": 8} if args.verb == "resilience" else None
        config = _config_from(args, defaults)
        out = _run_dir(args.verb, config.config_hash())
        config.dump(out / "config.yaml")
        fn = cmd_evaluate if args.verb == "evaluate" else cmd_resilience
        res = fn(args.checkpoint, config, out, args.trajectories)
        return {"success_rate": res.success_rate, "successes": res.successes,
                "episodes": len(res.episodes), "mean_failures": res.mean_failures,
                "config_hash": res.config_hash, "output": str(out)}
    if args.verb == "probe":
        meta = read_checkpoint_meta(args.checkpoint)
        out = _run_dir("probe", meta.get("extra", {}).get("config_hash", "unknown"))
        res = cmd_probe(args.checkpoint, args.n_robots, out, args.samples_per_period)
        return {"impact": res["impact"], "ranking": res["ranking"], "output": str(out)}
    return cmd_replay(args.trajectory)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except tuple(EXIT_CODES) as exc:
        code = next(c for t, c in EXIT_CODES.items() if isinstance(exc, t))
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, TrajectoryParseError):
            err["line"] = exc.line
        print(json.dumps(err), file=sys.stderr)
        return code
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
