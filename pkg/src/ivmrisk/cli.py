"""Command-line front end: ``ivmrisk {simulate,select,train,evaluate,reproduce}``.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 data
error, 5 solver non-convergence.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiment as ex
from .traffic.records import DataError

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CONVERGENCE = 5

log = logging.getLogger("ivmrisk")


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment manifest")
    common.add_argument("--seed", type=_u64, help="top-level seed (overrides the manifest)")
    common.add_argument("--out", help="output directory (overrides the manifest)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ivmrisk", description="Crash-risk classification experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate the synthetic case-control set")
    sub.add_parser("select", parents=[common], help="rank features with a random forest")
    for name, text in (("train", "fit IVM and/or SVM models"),
                       ("reproduce", "simulate, select, train and evaluate")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--model", choices=("ivm", "svm", "both"), default="both")
        sp.add_argument("--mode", choices=("exact", "onestep"), help="IVM candidate scoring")
    sp = sub.add_parser("evaluate", parents=[common], help="score models on the test split")
    sp.add_argument("--model", choices=("ivm", "svm", "both"), default="both")
    return p


def run(args) -> dict:
    cfg = ex.load_config(args.config, {"seed": args.seed, "out": args.out})
    if args.command == "simulate":
        return ex.cmd_simulate(cfg)
    if args.command == "select":
        return ex.cmd_select(cfg)
    if args.command == "train":
        return ex.cmd_train(cfg, args.model, args.mode)
    if args.command == "evaluate":
        return ex.cmd_evaluate(cfg, args.model)
    return ex.cmd_reproduce(cfg, args.model, args.mode)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        paths = run(args)
    except ex.ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ex.ConvergenceError as exc:
        log.error("did not converge: %s", exc)
        return EXIT_CONVERGENCE
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
