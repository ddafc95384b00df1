"""Command line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings

from . import pipeline
from .config import build_config, load_config_file
from .errors import ConfigError, SDRError

COMMANDS = ("gen", "relabel", "estimate", "select", "train", "eval", "experiment", "curve", "verify")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset by
    # the subcommand parser's defaults
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (u64); overrides the config")
    common.add_argument("--out", help="output directory (SDR_OUT overrides)")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; repeatable")

    p = argparse.ArgumentParser(prog="sdr", description="Stepwise dual ranking data selection", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="collect an offline dataset")
    for name, what in (("relabel", "relabel actions with the expert"), ("estimate", "add q/density columns"),
                       ("select", "run selectors over budgets and seeds")):
        sp = sub.add_parser(name, parents=[common], help=what)
        sp.add_argument("--input", required=True, help="input OBDS file")
    sp = sub.add_parser("train", parents=[common], help="behavioral cloning on a selection")
    sp.add_argument("--input", required=True, help="relabeled OBDS file")
    sp.add_argument("--selection", help="selection JSON (default: train on everything)")
    sp = sub.add_parser("eval", parents=[common], help="evaluate a policy checkpoint")
    sp.add_argument("--checkpoint", required=True)
    for name, what in (("experiment", "method x budget x seed grid"), ("curve", "saturation curve and P@k")):
        sp = sub.add_parser(name, parents=[common], help=what)
        sp.add_argument("--no-plot", action="store_true", help="skip PNG figures")
    sub.add_parser("verify", parents=[common], help="numerical checks of the selection bounds")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("seed", "workers"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    out_dir = os.environ.get("SDR_OUT") or getattr(args, "out", None)
    if out_dir:
        out["out"] = out_dir
    return out


def load_run_config(args):
    path = getattr(args, "config", None)
    raw = load_config_file(path) if path else {}
    return build_config(raw, _overrides(args), require_env=args.command != "verify")


def dispatch(run, args) -> int:
    c = args.command
    if c == "gen":
        return pipeline.cmd_gen(run)
    if c == "relabel":
        return pipeline.cmd_relabel(run, args.input)
    if c == "estimate":
        return pipeline.cmd_estimate(run, args.input)
    if c == "select":
        return pipeline.cmd_select(run, args.input)
    if c == "train":
        return pipeline.cmd_train(run, args.input, args.selection)
    if c == "eval":
        return pipeline.cmd_eval(run, args.checkpoint)
    if c == "experiment":
        return pipeline.cmd_experiment(run, plot=not getattr(args, "no_plot", False))
    if c == "curve":
        return pipeline.cmd_curve(run, plot=not getattr(args, "no_plot", False))
    return pipeline.cmd_verify(run)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    log = logging.getLogger("sdrselect")
    try:
        cfg = load_run_config(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    run = pipeline.Run(cfg, cfg["out"], args.command, workers=cfg["workers"])
    status = 1
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            logging.captureWarnings(True)
            status = dispatch(run, args)
    except (SDRError, OSError, ValueError, KeyError) as exc:
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        status = 1
    finally:
        logging.captureWarnings(False)
        run.write_manifest("ok" if status == 0 else "failed")
    return status


if __name__ == "__main__":
    sys.exit(main())
