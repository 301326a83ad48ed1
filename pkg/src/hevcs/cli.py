"""Command-line driver: ``hevcs run | compare | validate``.

Exit codes: 0 success, 1 bad input, 2 a method did not converge (its results
are still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .admm import run as run_admm
from .baselines import run_without_bes, uncontrolled_schedule
from .config import load_config
from .conic import SolverError
from .devices import SessionError, check_session
from .grid import NetworkError
from .metrics import emit, summary_text
from .scenario import ScenarioError
from .subproblems import solve_centralized

WORKERS_ENV = "HEVCS_WORKERS"
METHODS = ("cc1", "cc2", "ucc", "central")

_INPUT_ERRORS = (ScenarioError, NetworkError, SessionError, OSError)


def _default_workers() -> int | None:
    val = os.environ.get(WORKERS_ENV)
    if not val:
        return None
    try:
        n = int(val)
    except ValueError:
        raise SystemExit(f"error: {WORKERS_ENV} must be an integer, got {val!r}")
    return n


def run_method(method: str, scenario, admm_config):
    if method == "cc1":
        result = run_admm(scenario, admm_config)
        result.method = "cc1"
        return result
    if method == "cc2":
        return run_without_bes(scenario, admm_config)
    if method == "ucc":
        return uncontrolled_schedule(scenario, admm_config.loss_weight)
    if method == "central":
        return solve_centralized(scenario, admm_config.loss_weight)
    raise ValueError(f"unknown method {method!r}")


def _setup(args):
    cfg = load_config(args.config)
    workers = args.workers if args.workers is not None else _default_workers()
    return cfg.scenario(args.seed), cfg.admm(workers)


def cmd_run(args) -> int:
    scenario, admm_config = _setup(args)
    result = run_method(args.method, scenario, admm_config)
    emit(result, args.out, timing=args.timing)
    print(summary_text([result], timing=args.timing), end="")
    return 0 if result.converged else 2


def cmd_compare(args) -> int:
    scenario, admm_config = _setup(args)
    results = [run_method(m, scenario, admm_config) for m in ("ucc", "cc1", "cc2")]
    emit(results, args.out, timing=args.timing)
    print(summary_text(results, timing=args.timing), end="")
    return 0 if all(r.converged for r in results) else 2


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    problems = []
    net = cfg.network()
    print(f"network: {net.n_bus} buses, {net.n_line} lines, radial, root {net.buses[net.root].id}")
    scenario = cfg.scenario(args.seed)
    print(f"horizon: {scenario.horizon} steps of {scenario.t_h} h")
    n_ev = 0
    for node in scenario.nodes:
        for s in node.sessions:
            n_ev += 1
            try:
                check_session(s, scenario.horizon, scenario.t_h)
            except SessionError as exc:
                problems.append(str(exc))
        for prof in node.profiles:
            if prof.p_uc.size != scenario.horizon:
                problems.append(f"aggregator {node.agg_id}: netload profile length {prof.p_uc.size}")
    print(f"aggregators: {len(scenario.nodes)}, sessions: {n_ev}")
    for msg in problems:
        print(f"problem: {msg}")
    print("ok" if not problems else f"{len(problems)} problem(s)")
    return 0 if not problems else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hevcs", description="Hierarchical ADMM EV charging scheduler")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("config", help="experiment config file (TOML)")
        if out:
            p.add_argument("out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        if out:
            p.add_argument("--workers", type=int, default=None,
                           help=f"parallel aggregator workers (default: ${WORKERS_ENV} or config)")
            p.add_argument("--timing", action="store_true", help="include wall-clock times in the report")

    p = sub.add_parser("run", help="run one scheduling method and write its report")
    common(p)
    p.add_argument("--method", choices=METHODS, default="cc1")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run uCC, CC1 and CC2 on one scenario")
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="check the grid, sessions and data horizons")
    common(p, out=False)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
