"""``fdna`` command line: gen-data, train, evaluate, calibrate, recommend, neighbors, map.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{text} is not positive")
        return value
    return parse


def _fraction(text):
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1)")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdna", description="Content-conditioned purchase factorization.")
    parser.add_argument("--threads", type=_positive(int), default=1, help="cap on BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic catalog, purchases and feature channel")
    p.add_argument("--out", required=True, help="existing output directory")
    p.add_argument("--items", type=_positive(int), default=500)
    p.add_argument("--customers", type=_positive(int), default=200)
    p.add_argument("--rank", type=_positive(int), default=8)
    p.add_argument("--density", type=float, default=0.02)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--tau-a", type=_positive(float), default=0.3)
    p.add_argument("--tau-b", type=_positive(float), default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one channel on the tt block and fit validation customers")
    p.add_argument("--data", required=True, help="directory with catalog.jsonl and purchases.csv")
    p.add_argument("--run", required=True, help="run directory (created if missing)")
    p.add_argument("--channel", choices=("attribute", "precomputed", "combined"), default="attribute")
    p.add_argument("--resume", action="store_true", help="start from the channel's saved model")
    p.add_argument("--d", type=_positive(int), default=16, help="embedding width")
    p.add_argument("--widths", default=None, help="comma-separated hidden widths; default is a taper")
    p.add_argument("--layers", type=_positive(int), default=4, help="layer count of the default taper")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--learning-rate", type=_positive(float), default=0.003)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=_positive(int), default=32)
    p.add_argument("--negatives", type=_positive(int), default=None, help="negatives sampled per item")
    p.add_argument("--init-sigma", type=_positive(float), default=0.1)
    p.add_argument("--customer-l2", type=float, default=0.3)
    p.add_argument("--fit-lambda", type=float, default=1e-3, help="L2 for validation-customer fits")
    p.add_argument("--price-clusters", type=_positive(int), default=8)
    p.add_argument("--fabric-clusters", type=_positive(int), default=8)
    p.add_argument("--min-support", type=_positive(int), default=5)
    p.add_argument("--item-validation", type=_fraction, default=0.1)
    p.add_argument("--customer-validation", type=_fraction, default=0.1)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)

    def report(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--run", required=True)
        p.add_argument("--out", default=None, help="output file (default inside the run directory)")
        return p

    p = report("evaluate", "AUC per trained channel and quadrant")
    p.add_argument("--quadrant", action="append", choices=("tt", "vt", "tv", "vv"))
    p.add_argument("--pairs", type=_positive(int), default=None, help="sample this many pairs")
    p.add_argument("--seed", type=int, default=0)

    p = report("calibrate", "binned predicted vs empirical purchase rate")
    p.add_argument("--channel", default="attribute")
    p.add_argument("--quadrant", choices=("tt", "vt", "tv", "vv"), default="tt")
    p.add_argument("--bins", type=_positive(int), default=200)
    p.add_argument("--pairs", type=_positive(int), default=None)
    p.add_argument("--seed", type=int, default=0)

    p = report("recommend", "top items for one customer")
    p.add_argument("--channel", default="attribute")
    p.add_argument("--customer", required=True)
    p.add_argument("--top", type=_positive(int), default=20)
    p.add_argument("--items", choices=("training", "validation", "all"), default="validation")

    p = report("neighbors", "nearest items by cosine distance")
    p.add_argument("--channel", default="attribute")
    p.add_argument("--item", action="append", required=True)
    p.add_argument("--k", type=_positive(int), default=10)

    p = report("map", "two-dimensional t-SNE map of sampled items")
    p.add_argument("--channel", default="attribute")
    p.add_argument("--n", type=_positive(int), default=400)
    p.add_argument("--min-sales", type=int, default=1)
    p.add_argument("--perplexity", type=_positive(float), default=30.0)
    p.add_argument("--iterations", type=_positive(int), default=1000)
    p.add_argument("--learning-rate", type=_positive(float), default=200.0)
    p.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    # must happen before numpy is first imported
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)

    from . import commands
    from .embedding_map import MapDivergence
    from .training import TrainingDivergence

    handlers = {
        "gen-data": commands.cmd_gen_data,
        "train": commands.cmd_train,
        "evaluate": commands.cmd_evaluate,
        "calibrate": commands.cmd_calibrate,
        "recommend": commands.cmd_recommend,
        "neighbors": commands.cmd_neighbors,
        "map": commands.cmd_map,
    }
    try:
        return handlers[args.command](args)
    except (TrainingDivergence, MapDivergence, FloatingPointError) as exc:
        print(f"fdna {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"fdna {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
