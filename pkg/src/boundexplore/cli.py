"""Command-line entry point: ``run``, ``solve`` and ``bounds``.

Exit codes: 0 success, 1 a run (or computation) failed, 2 bad configuration or input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from .harness import ConfigError, ExperimentConfig, aggregate, emit_outputs, run_experiment
from .interval import Certificate, IntervalModelSet, bound_iteration, certify_actions
from .mdp import ConvergenceError, TabularMdp, solve_exact
from .regularized import LambdaSchedule, load_data, regularized_bound_iteration

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("boundexplore")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boundexplore", description="Q-bound guided exploration experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config and write CSV/plot outputs")
    run.add_argument("--config", required=True, help="experiment JSON file")
    run.add_argument("--out", default="results", help="output directory (default: ./results)")
    run.add_argument("--runs", type=int, help="override n_runs")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--threads", type=int, help="worker processes (default from config, 1)")
    run.add_argument("--episodes", type=int, help="override n_episodes")
    run.add_argument("--no-png", action="store_true", help="skip the matplotlib figures")

    solve = sub.add_parser("solve", help="solve a tabular MDP exactly and print Q, V and the greedy policy")
    solve.add_argument("--mdp", required=True, help="MDP JSON file")
    solve.add_argument("--tol", type=float, default=1e-8)

    bounds = sub.add_parser("bounds", help="compute Q-bounds of an interval model set")
    bounds.add_argument("--model", required=True, help="interval model JSON file")
    bounds.add_argument("--counts", help="observed data JSON (counts and rewards) for regularised bounds")
    bounds.add_argument("--c", type=float, default=5.0, help="lambda schedule constant")
    bounds.add_argument("--delta", type=float, default=0.05, help="lambda schedule confidence")
    bounds.add_argument("--tol", type=float, default=1e-8)
    bounds.add_argument("--json", action="store_true", help="print bounds and certificates as JSON")
    return parser


def _cmd_run(args) -> int:
    try:
        config = ExperimentConfig.load(args.config)
        overrides = {k: v for k, v in (("n_runs", args.runs), ("seed", args.seed), ("threads", args.threads),
                                       ("n_episodes", args.episodes)) if v is not None}
        if overrides:
            config = dataclasses.replace(config, **overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def progress(rec):
        status = "ok" if rec.ok else "FAILED"
        log.info("%s run %d %s in %.1fs", rec.variant, rec.run, status, rec.seconds)

    records = run_experiment(config, progress)
    failed = [r for r in records if not r.ok]
    if len(failed) == len(records):
        print("all runs failed", file=sys.stderr)
        print(failed[0].error, file=sys.stderr)
        return EXIT_FAILURE
    try:
        paths = emit_outputs(aggregate(records), config, args.out, records, png=not args.no_png)
    except OSError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    for path in paths:
        print(path)
    if failed:
        print(f"{len(failed)} of {len(records)} runs failed", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _cmd_solve(args) -> int:
    try:
        mdp = TabularMdp.load(args.mdp)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"cannot load MDP {args.mdp}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        q, policy = solve_exact(mdp, tol=args.tol)
    except ConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    json.dump({"q": q.tolist(), "v": q.max(axis=1).tolist(), "policy": policy.tolist()}, sys.stdout)
    print()
    return EXIT_OK


def _cmd_bounds(args) -> int:
    try:
        model = IntervalModelSet.load(args.model)
        data = load_data(args.counts) if args.counts else None
        schedule = LambdaSchedule(args.c, args.delta, model.n_states * model.n_actions)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if data is None:
            qb = bound_iteration(model, tol=args.tol)
        else:
            counts, rewards, _ = data
            qb = regularized_bound_iteration(model, counts, rewards, schedule, tol=args.tol)
    except (ConvergenceError, ValueError) as exc:
        print(f"bound computation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    certs = certify_actions(qb)
    if args.json:
        json.dump({"lower": qb.lower.tolist(), "upper": qb.upper.tolist(), "max_gap": qb.gap,
                   "certificates": [[Certificate(c).name for c in row] for row in certs]}, sys.stdout)
        print()
        return EXIT_OK
    print(f"max gap {qb.gap:.6g}")
    n_opt = int(np.sum(certs == Certificate.OPTIMAL))
    n_sub = int(np.sum(certs == Certificate.SUBOPTIMAL))
    print(f"certified optimal {n_opt}, certified suboptimal {n_sub}, uncertain {certs.size - n_opt - n_sub}")
    for x in range(model.n_states):
        labels = " ".join(f"{Certificate(c).name[0]}[{lo:.4g},{hi:.4g}]"
                          for c, lo, hi in zip(certs[x], qb.lower[x], qb.upper[x]))
        print(f"{x:5d}  {labels}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    handler = {"run": _cmd_run, "solve": _cmd_solve, "bounds": _cmd_bounds}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
