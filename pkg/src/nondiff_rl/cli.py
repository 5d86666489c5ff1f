"""Command-line entry point: ``nondiff-rl {train,eval,plan,classify}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import RLError
from .harness import (
    format_table,
    load_config,
    parse_config,
    run_classify_experiment,
    run_eval,
    run_plan,
    run_train,
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nondiff-rl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent from a key=value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="override the config's master seed")
    t.add_argument("--out", default="runs/latest", help="output directory (default: runs/latest)")

    e = sub.add_parser("eval", help="greedy evaluation of a saved checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed", type=int)

    pl = sub.add_parser("plan", help="MCTS vs exhaustive search vs random, as CSV")
    pl.add_argument("--env", required=True, help="chain or gridworld")
    pl.add_argument("--budget", type=int, default=5000)
    pl.add_argument("--trials", type=int, default=100)
    pl.add_argument("--horizon", type=int, default=12)
    pl.add_argument("--gamma", type=float, default=0.9)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--env-param", action="append", default=[], metavar="KEY=VALUE",
                    help="extra env.* setting, e.g. --env-param width=3")
    pl.add_argument("--out", help="write per-trial rows to this CSV file")

    c = sub.add_parser("classify", help="MSE-Q vs cross-entropy on a synthetic dataset")
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = dataclasses.replace(cfg, seed=args.seed)
            status = run_train(cfg, args.out)
            summary = Path(args.out) / "eval.json"
            if status == 0 and summary.exists():
                report = json.loads(summary.read_text(encoding="utf-8"))
                print(f"eval return {report['eval_return_mean']:.4f} +/- {report['eval_return_std']:.4f} "
                      f"over {report['episodes']} episodes; artifacts in {args.out}")
            elif status == 0:
                print(f"artifacts in {args.out}")
            else:
                print(f"training diverged; diagnostic checkpoint in {args.out}", file=sys.stderr)
            return status
        if args.command == "eval":
            report = run_eval(args.checkpoint, args.episodes, args.seed)
            print(json.dumps(report, sort_keys=True))
            return 0
        if args.command == "plan":
            lines = ["algorithm=plan", f"seed={args.seed}", f"env.name={args.env}",
                     f"plan.budget={args.budget}", f"plan.trials={args.trials}",
                     f"plan.horizon={args.horizon}", f"plan.gamma={args.gamma}"]
            lines += [f"env.{kv}" for kv in args.env_param]
            summary = run_plan(parse_config("\n".join(lines)), args.out)
            print("planner,agreement")
            print(f"mcts,{summary['mcts_agreement']:.4f}")
            print(f"random,{summary['random_agreement']:.4f}")
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        print(format_table(run_classify_experiment(cfg)), end="")
        return 0
    except (RLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
