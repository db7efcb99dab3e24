"""Command line: ``cardiolab {synth,build,train,eval,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import RunConfig
from .errors import CardioLabError


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply to omitted keys)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, help="BLAS / worker thread count")
    common.add_argument("--deterministic", action="store_true", default=None, help="serial reductions, wall time omitted from logs")
    common.add_argument("--work-dir", help="working directory for all artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    task = argparse.ArgumentParser(add_help=False)
    task.add_argument("--mode", choices=("ESTIMATION", "MONITORING"))
    task.add_argument("--horizon", type=int, choices=(1800, 3600, 7200), help="monitoring horizon in seconds")

    p = argparse.ArgumentParser(prog="cardiolab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    sub.add_parser("build", parents=[common, task], help="assemble the supervised dataset")
    sub.add_parser("train", parents=[common, task], help="train and keep the best-validation checkpoint")
    ev = sub.add_parser("eval", parents=[common, task], help="score the test fold with bootstrap intervals")
    ev.add_argument("--checkpoint", help="checkpoint path (default: <task dir>/train/checkpoint.npz)")
    rep = sub.add_parser("report", parents=[common], help="format metrics files as result tables")
    rep.add_argument("metrics", nargs="+", help="one estimation metrics.json, or one per monitoring horizon")
    rep.add_argument("--out-dir", help="output directory (default: <work dir>/report)")
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.override(None, "seed", args.seed)
    cfg.override("paths", "work_dir", args.work_dir)
    cfg.override("runtime", "threads", args.threads)
    cfg.override("runtime", "deterministic", args.deterministic)
    if getattr(args, "mode", None):
        cfg.data["task"]["mode"] = args.mode
    if getattr(args, "horizon", None):
        cfg.data["task"]["horizon_s"] = args.horizon
    cfg.override("task", "mode", cfg.data["task"]["mode"])
    if cfg.data["runtime"]["deterministic"]:
        cfg.data["runtime"]["threads"] = 1
    return cfg


def run(argv=None) -> str:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = _config(args)
    with threadpool_limits(limits=cfg.data["runtime"]["threads"]):
        if args.command == "synth":
            out = pipeline.synth(cfg)
        elif args.command == "build":
            out = pipeline.build(cfg)
        elif args.command == "train":
            out = pipeline.train(cfg)
        elif args.command == "eval":
            out = pipeline.evaluate(cfg, checkpoint=args.checkpoint)
        else:
            out = pipeline.report(cfg, args.metrics, args.out_dir)
    return str(out)


def main(argv=None) -> int:
    try:
        print(run(argv))
    except (CardioLabError, ValueError, FileNotFoundError) as exc:
        code = exc.code if isinstance(exc, CardioLabError) else type(exc).__name__
        print(json.dumps({"error": code, "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
