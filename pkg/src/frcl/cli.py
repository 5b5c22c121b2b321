"""Command-line entry points.

    frcl run --config PATH [--seed N] [--final] [--out DIR]
    frcl inspect-summary PATH
    frcl score-boundaries --metrics PATH
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import experiment, summaries


def _cmd_run(args) -> int:
    cfg = experiment.load_config(args.config)
    if args.out is not None:
        cfg = replace(cfg, output=args.out)
    if args.seed is not None:
        cfg = replace(cfg, engine=replace(cfg.engine, seed=args.seed))
    summary = experiment.run_experiment(cfg, final=args.final)
    json.dump(summary, sys.stdout, indent=2)
    print()
    return 0


def _cmd_inspect_summary(args) -> int:
    summary = summaries.load_summary(args.path)
    info = {
        "task_id": summary.task_id,
        "num_inducing": summary.num_inducing,
        "input_dim": summary.Z.shape[1],
        "num_functions": summary.num_functions,
        "likelihood": summary.likelihood.kind,
        "class_count": summary.likelihood.class_count,
        "logdet_cov_u": summary.logdet_cov_u.tolist(),
        "mean_norms": [float((summary.mu_u[c] ** 2).sum() ** 0.5)
                       for c in range(summary.num_functions)],
    }
    json.dump(info, sys.stdout, indent=2)
    print()
    return 0


def _cmd_score_boundaries(args) -> int:
    records = experiment.read_metrics(args.metrics)
    detections = [r["step"] for r in records if r["kind"] == "detection"]
    finals = [r for r in records if r["kind"] == "final"]
    if not finals:
        print("metrics stream has no final record (no ground-truth boundaries)", file=sys.stderr)
        return 1
    truths = finals[-1].get("true_boundaries", [])
    json.dump(experiment.score_boundaries(detections, truths), sys.stdout, indent=2)
    print()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a configured experiment")
    run.add_argument("--config", required=True, help="JSON experiment configuration")
    run.add_argument("--seed", type=int, default=None, help="override the base seed")
    run.add_argument("--final", action="store_true",
                     help="train on train+validation and evaluate on the test files")
    run.add_argument("--out", default=None, help="override the output directory")
    run.set_defaults(func=_cmd_run)

    inspect = sub.add_parser("inspect-summary", help="print a task-summary checkpoint")
    inspect.add_argument("path", help="summary checkpoint file")
    inspect.set_defaults(func=_cmd_inspect_summary)

    scoreb = sub.add_parser("score-boundaries", help="score detections in a metrics stream")
    scoreb.add_argument("--metrics", required=True, help="JSONL metrics file")
    scoreb.set_defaults(func=_cmd_score_boundaries)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
