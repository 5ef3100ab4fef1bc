"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or parameter error, 2 data error,
3 numerical failure, 4 node budget exhausted.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import SurrosegError
from . import pipeline as pl

USAGE_EXIT = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="surroseg", description="Connected spatial segmentation of model predictions.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a point CSV (id,x1..xd[,y]) and optionally resample it")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--resample", type=_positive_int, help="draw this many perturbed query points")
    p.add_argument("--radius", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("predict", help="GP predictions at the points")
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="saved model JSON")
    src.add_argument("--train", help="point CSV with y to fit a model on")
    p.add_argument("--model-out", help="where to save a fitted model")

    p = sub.add_parser("graph", help="MST of a kNN graph plus kNN augmentation")
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--knn", type=_positive_int, default=30)
    p.add_argument("--augment-knn", type=int, default=10)

    p = sub.add_parser("aggregate", help="greedy prior aggregation into l groups")
    p.add_argument("--graph", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--l", type=_positive_int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("segment", help="connected partition into m segments")
    p.add_argument("--graph", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--aggregation")
    p.add_argument("--m", type=_positive_int, required=True)
    p.add_argument("--method", choices=["exact", "greedy"], default="exact")
    p.add_argument("--objective", choices=["wcss", "mahalanobis"], default="wcss")
    p.add_argument("--use-hat", action="store_true")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--node-budget", type=_positive_int, default=5_000_000)
    p.add_argument("--model", help="GP model, for the mahalanobis score")
    p.add_argument("--points", help="point CSV, for the mahalanobis score")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-miqp", help="write the MIQP as an LP file")
    p.add_argument("--graph", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--aggregation")
    p.add_argument("--m", type=_positive_int, required=True)
    p.add_argument("--no-flow", action="store_true", help="omit the contiguity constraints")
    p.add_argument("--partition", help="also encode this partition as a solution file")
    p.add_argument("--solution-out")
    p.add_argument("--out", required=True)

    p = sub.add_parser("check-solution", help="verify an external solver's solution file")
    p.add_argument("--lp", required=True)
    p.add_argument("--solution", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--aggregation")

    p = sub.add_parser("report", help="error and gap table for partition files")
    p.add_argument("partitions", nargs="+")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("plot", help="SVG map of a partition or of the predictions")
    p.add_argument("--points", required=True)
    p.add_argument("--partition")
    p.add_argument("--predictions")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="run every stage from a JSON config")
    p.add_argument("--config", help="JSON config; defaults to the synthetic demo")
    p.add_argument("--seed", type=int)
    p.add_argument("--m", type=_positive_int, nargs="+")
    p.add_argument("--l", type=_positive_int)
    p.add_argument("--knn", type=_positive_int)
    p.add_argument("--augment-knn", type=int)
    p.add_argument("--use-hat", action="store_true", default=None)
    p.add_argument("--node-budget", type=_positive_int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--out", required=True)
    return ap


def _run(args) -> int:
    cmd = args.command
    if cmd == "ingest":
        info = pl.stage_ingest(args.input, args.out, args.resample, args.radius, args.seed)
    elif cmd == "predict":
        if args.model_out and not args.train:
            raise SystemExit(_usage("--model-out requires --train"))
        info = pl.stage_predict(args.points, args.out, model=args.model, train=args.train, model_out=args.model_out)
    elif cmd == "graph":
        info = pl.stage_graph(args.points, args.out, args.knn, args.augment_knn)
    elif cmd == "aggregate":
        info = pl.stage_aggregate(args.graph, args.predictions, args.l, args.out)
    elif cmd == "segment":
        info = pl.stage_segment(
            args.graph, args.predictions, args.out, args.m, args.method, aggregation=args.aggregation,
            use_hat=args.use_hat, tolerance=args.tolerance, node_budget=args.node_budget,
            objective=args.objective, model=args.model, points=args.points)
        info.pop("seconds", None)
    elif cmd == "export-miqp":
        info = pl.stage_export(args.graph, args.predictions, args.m, args.out, aggregation=args.aggregation,
                               flow=not args.no_flow, partition=args.partition, solution_out=args.solution_out)
    elif cmd == "check-solution":
        rep = pl.stage_check(args.lp, args.solution, args.graph, args.predictions, args.aggregation)
        print(rep.summary())
        return 0 if rep.passed else 2
    elif cmd == "report":
        rows = pl.stage_report(args.partitions)
        print(json.dumps(rows, indent=1, sort_keys=True) if args.json else pl.format_report(rows))
        return 0
    elif cmd == "plot":
        info = pl.stage_plot(args.points, args.out, partition=args.partition, predictions=args.predictions)
    elif cmd == "pipeline":
        cfg = pl.PipelineConfig.load(args.config) if args.config else pl.PipelineConfig()
        for key in ("seed", "m", "l", "knn", "augment_knn", "use_hat", "node_budget", "tolerance"):
            val = getattr(args, key)
            if val is not None:
                setattr(cfg, key, val)
        info = pl.run_pipeline(cfg, args.out)
        print(open(f"{args.out}/report.txt", encoding="utf-8").read(), end="")
        return 0
    else:  # pragma: no cover
        raise AssertionError(cmd)
    print(json.dumps(info, sort_keys=True))
    return 0


def _usage(msg: str) -> int:
    print(f"surroseg: error: {msg}", file=sys.stderr)
    return USAGE_EXIT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except SurrosegError as exc:
        print(f"surroseg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"surroseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
