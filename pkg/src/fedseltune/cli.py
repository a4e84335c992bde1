"""Command-line entry points.

    fedseltune run <config.yaml>        execute an experiment config
    fedseltune summarize <run-dir>      rebuild summary.csv from rounds.jsonl
    fedseltune oracle-p1 <instance>     exactly solve a serialized selection problem

A selection-problem instance file is JSON with keys "scores" (clients x
layers), "budgets", "lambda", and optionally "layer_costs" and
"penalty_exponent".
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .experiment import parse_config, run_experiment, summarize_run
from .model import ConfigError
from .selection import CapacityError, SelectionProblem, solve_p1_exact


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    result = run_experiment(cfg)
    print(f"wrote {result['out_dir']}")
    for row in result["summary_rows"]:
        print(
            f"  #{row['rank']} {row['strategy']}: "
            f"final={row['final_accuracy_mean']:.4f} +/- {row['final_accuracy_std']:.4f} "
            f"best={row['best_accuracy_mean']:.4f}"
        )
    return 0


def _cmd_summarize(args) -> int:
    rows = summarize_run(args.run_dir)
    for row in rows:
        print(
            f"#{row['rank']} {row['strategy']}: "
            f"final={row['final_accuracy_mean']:.4f} +/- {row['final_accuracy_std']:.4f} "
            f"best={row['best_accuracy_mean']:.4f}"
        )
    return 0


def load_problem(path) -> SelectionProblem:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    known = {"scores", "budgets", "lambda", "layer_costs", "penalty_exponent"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown instance keys: {sorted(unknown)}")
    return SelectionProblem(
        scores=np.asarray(raw["scores"], dtype=np.float64),
        budgets=np.asarray(raw["budgets"]),
        lam=float(raw["lambda"]),
        layer_costs=None if raw.get("layer_costs") is None else np.asarray(raw["layer_costs"]),
        penalty_exponent=int(raw.get("penalty_exponent", 2)),
    )


def _cmd_oracle_p1(args) -> int:
    problem = load_problem(args.instance)
    result = solve_p1_exact(problem)
    payload = {
        "masks": [[int(v) for v in row] for row in result.masks],
        "objective": result.objective_value,
        "solver": result.solver,
        "feasible": result.feasible,
    }
    text = json.dumps(payload, sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedseltune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to a YAML experiment config")
    p_run.set_defaults(func=_cmd_run)

    p_sum = sub.add_parser("summarize", help="rebuild summary.csv from a run's round logs")
    p_sum.add_argument("run_dir", help="run directory containing rounds.jsonl")
    p_sum.set_defaults(func=_cmd_summarize)

    p_oracle = sub.add_parser("oracle-p1", help="exactly solve a serialized selection problem")
    p_oracle.add_argument("instance", help="path to a JSON instance file")
    p_oracle.add_argument("--out", default="", help="optional path for the JSON solution")
    p_oracle.set_defaults(func=_cmd_oracle_p1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CapacityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
