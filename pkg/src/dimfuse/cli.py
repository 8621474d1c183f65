"""Command-line entry points.

Exit codes: 0 success, 2 scenario/model validation failure, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .channel import ChannelError
from .covariance import DegenerateCovarianceError
from .fusion import compute_steady_weights, export_weights
from .harness import run_oracle, run_scenario, write_table1
from .local_filter import DivergenceError
from .models import ModelError
from .oracle import EnumerationTooLarge
from .scenario import Scenario, ScenarioError, bundled_scenario_path, load_scenario
from .stability import check_convergence_conditions, select_probabilities

VALIDATION_ERRORS = (ScenarioError, ModelError, ChannelError, EnumerationTooLarge,
                     ValueError)
NUMERIC_ERRORS = (DivergenceError, DegenerateCovarianceError, np.linalg.LinAlgError,
                  FloatingPointError)


def _resolve(scenario_arg: str) -> Scenario:
    p = Path(scenario_arg)
    if not p.exists() and not scenario_arg.endswith(".toml"):
        p = bundled_scenario_path(scenario_arg)
    return load_scenario(p)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dimfuse",
                                description="Distributed delayed reduced-rate fusion simulator")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario and write its artifact bundle")
    sim.add_argument("scenario")
    sim.add_argument("--out", default="out")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--horizon", type=int, default=None)
    sim.add_argument("--replicas", type=int, default=None)
    sim.add_argument("--plots", action="store_true")

    st = sub.add_parser("steady", help="compute steady fusion weights offline")
    st.add_argument("scenario")
    st.add_argument("--out", default="out")
    st.add_argument("--tol", type=float, default=1e-9)
    st.add_argument("--max-iter", type=int, default=100_000)

    sb = sub.add_parser("stability", help="stability report for a scenario")
    sb.add_argument("scenario")
    sb.add_argument("--out", default=None)

    orc = sub.add_parser("oracle", help="compare the ledger against a brute-force oracle")
    orc.add_argument("scenario")
    orc.add_argument("--mode", choices=["enumeration", "monte-carlo"],
                     default="enumeration")
    orc.add_argument("--horizon", type=int, default=None)
    orc.add_argument("--replicas", type=int, default=10_000)
    orc.add_argument("--seed", type=int, default=None)
    orc.add_argument("--out", default=None)

    tb = sub.add_parser("table1", help="no-delay feasibility table on the two-state benchmark")
    tb.add_argument("--out", default="table1.csv")

    sp = sub.add_parser("select-probs", help="search feasible selection probabilities")
    sp.add_argument("scenario")
    sp.add_argument("--criterion", choices=["c1", "c2"], default="c1")
    sp.add_argument("--grid-step", type=float, default=0.1)
    sp.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def _dispatch(args) -> int:
    if args.command == "simulate":
        scenario = _resolve(args.scenario)
        if args.replicas is not None:
            scenario.replicas = args.replicas
        bundle = run_scenario(scenario, args.out, plots=args.plots,
                              seed=args.seed, horizon=args.horizon)
        for name, path in bundle.files.items():
            print(f"{name}: {path}")
        return 0

    if args.command == "steady":
        scenario = _resolve(args.scenario)
        if scenario.horizon < scenario.max_period() + 2:
            raise ScenarioError(
                f"{scenario.path}: horizon {scenario.horizon} too short for "
                f"steady outputs (need >= {scenario.max_period() + 2})"
            )
        report = check_convergence_conditions(scenario.model, scenario.schemes, scenario.delays)
        if not report.overall:
            print(report.to_text(), file=sys.stderr)
            raise DivergenceError("stability conditions not certified; steady weights refused")
        steady = compute_steady_weights(scenario.model, scenario.schemes,
                                        scenario.delays, tol=args.tol,
                                        max_iter=args.max_iter, P0=scenario.P0)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "steady_weights.txt"
        export_weights(path, steady)
        print(f"converged in {steady.ticks} ticks -> {path}")
        return 0

    if args.command == "stability":
        scenario = _resolve(args.scenario)
        report = check_convergence_conditions(scenario.model, scenario.schemes, scenario.delays)
        print(report.to_text())
        if args.out:
            report.write_csv(args.out)
        return 0

    if args.command == "oracle":
        scenario = _resolve(args.scenario)
        report = run_oracle(scenario, mode=args.mode, horizon=args.horizon,
                            replicas=args.replicas, seed=args.seed)
        print(report.to_text())
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(report.to_text() + "\n")
        return 0

    if args.command == "table1":
        write_table1(args.out)
        print(f"wrote {args.out}")
        return 0

    if args.command == "select-probs":
        scenario = _resolve(args.scenario)
        rs = [s.r for s in scenario.schemes]
        results = select_probabilities(scenario.model, scenario.delays, rs,
                                       criterion=args.criterion,
                                       grid_step=args.grid_step)
        lines = []
        for i, found in enumerate(results):
            if not found:
                lines.append(f"node {i + 1}: no feasible selection probabilities found")
            for pr in found:
                probs = " ".join(f"{v:.3f}" for v in pr.probs)
                lines.append(f"node {i + 1}: margin={pr.margin:.4f} "
                             f"radius={pr.exact_radius:.4f} "
                             f"cross={pr.cross_radius:.4f} probs=[{probs}]")
        text = "\n".join(lines)
        print(text)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return 0

    raise ScenarioError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
