"""Command-line driver: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .errors import DivergenceError, FedFlowError, InsufficientCandidatesError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_PATH = 2
EXIT_OUTPUT_EXISTS = 3
EXIT_INSUFFICIENT = 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON config merged over the defaults")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    common.add_argument("--out", type=Path, default=None, help="output directory (default $FEDFLOW_OUT or ./out)")
    common.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="load or synthesise flows; build the sensor graph")
    s = sub.add_parser("select", parents=[common], help="rank and cluster corridors; pick domain and clients")
    s.add_argument("--features-csv", type=Path, default=None, help="rank a precomputed corridor feature table")
    sub.add_parser("gen-prompts", parents=[common], help="write prompt/response records")
    sub.add_parser("train-central", parents=[common], help="pre-train the base and train domain adapters")
    f = sub.add_parser("train-fed", parents=[common], help="federated adapter fine-tuning")
    f.add_argument("--rounds", type=int, default=None)
    f.add_argument("--local-steps", type=int, default=None)
    f.add_argument("--clients", type=int, default=None, help="use only the first N selected clients")
    f.add_argument("--concurrent", action="store_true", help="train clients on a thread pool")
    e = sub.add_parser("evaluate", parents=[common], help="score models on held-out records")
    e.add_argument("--zero-shot", action="store_true", help="evaluate on the held-out region instead")
    sub.add_parser("run-all", parents=[common], help="every stage in order, then the zero-shot evaluation")
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if getattr(args, "features_csv", None) is not None:
        o.setdefault("select", {})["features_csv"] = str(args.features_csv)
    fed = {}
    for flag, key in (("rounds", "rounds"), ("local_steps", "local_steps"), ("clients", "clients")):
        v = getattr(args, flag, None)
        if v is not None:
            fed[key] = v
    if getattr(args, "concurrent", False):
        fed["concurrent"] = True
    if fed:
        o["fed"] = fed
    return o


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get("FEDFLOW_OUT", "out"))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.load_config(args.config, _overrides(args))
        out = _out_dir(args)
        cmd = args.command
        if cmd == "ingest":
            res = pipeline.stage_ingest(cfg, out, args.force)
        elif cmd == "select":
            res = pipeline.stage_select(cfg, out, args.force)
        elif cmd == "gen-prompts":
            res = pipeline.stage_gen_prompts(cfg, out, args.force)
        elif cmd == "train-central":
            res = pipeline.stage_train_central(cfg, out, args.force)
        elif cmd == "train-fed":
            res = pipeline.stage_train_fed(cfg, out, args.force)
        elif cmd == "evaluate":
            res = pipeline.stage_evaluate(cfg, out, args.force, zero_shot=args.zero_shot)
        else:
            res = pipeline.run_all(cfg, out, args.force)
    except pipeline.MissingPathError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_PATH
    except pipeline.OutputExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT_EXISTS
    except InsufficientCandidatesError as exc:
        print(f"error: insufficient candidates: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (FedFlowError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(res, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
