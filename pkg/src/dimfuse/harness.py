"""Scenario runners: simulation bundles, oracle comparisons, and the
no-delay feasibility table, all writing deterministic CSV artifacts."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import build_scheme
from .covariance import CovarianceLedger
from .fusion import (SteadyFusion, Trace, compute_steady_weights, export_weights,
                     fusion_weights, run_dkfe)
from .models import SystemModel
from .oracle import ExactMoments, simulate_replicas
from .scenario import Scenario
from .stability import (StabilityReport, check_convergence_conditions,
                        check_no_delay_tests)


@dataclass
class ArtifactBundle:
    files: dict[str, Path]
    report: StabilityReport
    steady: SteadyFusion | None
    trace: Trace


def run_scenario(scenario: Scenario, out_dir, plots: bool = False,
                 seed: int | None = None, horizon: int | None = None) -> ArtifactBundle:
    """Simulate one scenario end to end and write its artifact bundle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = scenario.seed if seed is None else seed
    horizon = scenario.horizon if horizon is None else horizon
    files: dict[str, Path] = {}

    report = check_convergence_conditions(scenario.model, scenario.schemes, scenario.delays)
    files["stability"] = out / "stability.csv"
    report.write_csv(files["stability"])

    steady = None
    if report.overall and horizon >= scenario.max_period() + 2:
        steady = compute_steady_weights(scenario.model, scenario.schemes,
                                        scenario.delays, P0=scenario.P0)
        files["weights"] = out / "steady_weights.txt"
        export_weights(files["weights"], steady)

    trace = run_dkfe(scenario.model, scenario.schemes, scenario.delays,
                     horizon, seed=seed, x0_mean=scenario.x0_mean,
                     P0=scenario.P0, steady=steady,
                     link_modes=scenario.link_modes)
    files["trace"] = out / "trace.csv"
    trace.write_csv(files["trace"])
    for k in range(1, scenario.replicas):
        rep = run_dkfe(scenario.model, scenario.schemes, scenario.delays,
                       horizon, seed=seed + k, x0_mean=scenario.x0_mean,
                       P0=scenario.P0, steady=steady,
                       link_modes=scenario.link_modes)
        files[f"trace_r{k}"] = out / f"trace_r{k}.csv"
        rep.write_csv(files[f"trace_r{k}"])

    files["weight_norms"] = out / "weight_norms.csv"
    with open(files["weight_norms"], "w", encoding="utf-8") as fh:
        fh.write("t," + ",".join(f"omega_{i+1}_norm" for i in range(scenario.L))
                 + ",tracP\n")
        for t in range(horizon + 1):
            cells = [str(t)] + [f"{trace.weight_norms[t, i]:.17g}"
                                for i in range(scenario.L)]
            cells.append(f"{trace.trace_P[t]:.17g}")
            fh.write(",".join(cells) + "\n")

    if "ledger" in scenario.traces:
        ledger = CovarianceLedger(scenario.model, scenario.schemes,
                                  scenario.delays, P0=scenario.P0)
        ledger.advance_to(min(horizon, 2 * scenario.max_period() + 16))
        for quantity in ("xi", "gamma", "psi"):
            files[quantity] = out / f"ledger_{quantity}.csv"
            ledger.dump_csv(files[quantity], quantity)

    if scenario.sweep:
        files["sweep"] = out / "sweep_cse_trace.csv"
        _write_sweep(scenario, horizon, files["sweep"])

    if plots:
        _emit_plots(scenario, trace, out, files)

    return ArtifactBundle(files=files, report=report, steady=steady, trace=trace)


def _write_sweep(scenario: Scenario, horizon: int, path: Path) -> None:
    """Per-tick compensated-covariance traces across first-component selection
    probabilities (two-state, single-node scenarios)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("prob,t,trace_xi_11\n")
        for g in scenario.sweep:
            scheme = build_scheme(2, 1, [g, 1.0 - g], node=0)
            ledger = CovarianceLedger(scenario.model, [scheme] + scenario.schemes[1:],
                                      scenario.delays, P0=scenario.P0)
            for t in range(1, horizon + 1):
                ledger.advance()
                fh.write(f"{g},{t},{float(np.trace(ledger.xi(0, 0, t))):.17g}\n")


def _emit_plots(scenario: Scenario, trace: Trace, out: Path, files: dict) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots()
    ax.plot(trace.times, trace.trace_P, label="fused covariance trace")
    for i in range(trace.trace_xi.shape[1]):
        ax.plot(trace.times, trace.trace_xi[:, i], label=f"node {i+1} covariance trace")
    ax.set_xlabel("t")
    ax.legend()
    files["plot_mse"] = out / "mse_vs_time.svg"
    fig.savefig(files["plot_mse"], metadata={"Date": None})
    plt.close(fig)
    if trace.xhat_steady is not None:
        fig, ax = plt.subplots()
        err = trace.xhat - trace.xhat_steady
        for c in range(err.shape[1]):
            ax.plot(trace.times, err[:, c], label=f"component {c+1}")
        ax.set_xlabel("t")
        ax.set_ylabel("recursive minus fixed-weight estimate")
        ax.legend()
        files["plot_err"] = out / "steady_error.svg"
        fig.savefig(files["plot_err"], metadata={"Date": None})
        plt.close(fig)


@dataclass
class OracleConfig:
    """How to validate a scenario against a brute-force oracle."""

    mode: str = "enumeration"           # or "monte-carlo"
    replicas: int = 10_000
    max_enumeration: int = 1_000_000    # cap on per-node mask histories
    horizon: int | None = None


@dataclass
class OracleReport:
    mode: str
    horizon: int
    max_dev: dict[str, float]
    outside_3se: dict[str, tuple[int, int]] | None
    replicas: int | None

    def to_text(self) -> str:
        lines = [f"oracle mode: {self.mode} (horizon {self.horizon})"]
        for name, dev in self.max_dev.items():
            lines.append(f"  max |engine - oracle| {name}: {dev:.3e}")
        if self.outside_3se is not None:
            for name, (bad, total) in self.outside_3se.items():
                lines.append(f"  {name}: {bad}/{total} entries outside 3 standard errors")
            lines.append(f"  replicas: {self.replicas}")
        return "\n".join(lines)


def run_oracle(scenario: Scenario, mode: str = "enumeration",
               horizon: int | None = None, replicas: int = 10_000,
               seed: int | None = None, cap: int = 1_000_000,
               config: OracleConfig | None = None) -> OracleReport:
    """Compare the analytic ledger with a brute-force oracle on this scenario."""
    if config is not None:
        mode = config.mode
        replicas = config.replicas
        cap = config.max_enumeration
        horizon = config.horizon if config.horizon is not None else horizon
    horizon = min(scenario.horizon, 8) if horizon is None else horizon
    seed = scenario.seed if seed is None else seed
    ledger = CovarianceLedger(scenario.model, scenario.schemes, scenario.delays,
                              P0=scenario.P0, window=horizon + 8)
    ledger.advance_to(horizon)

    if mode == "enumeration":
        orc = ExactMoments(scenario.model, scenario.schemes, scenario.delays,
                           horizon=horizon, P0=scenario.P0, cap=cap)
        max_dev = {"P": 0.0, "Gamma": 0.0, "Psi": 0.0, "Upsilon": 0.0, "Xi": 0.0,
                   "fused_P": 0.0}
        for (i, j, t), val in orc.P.items():
            if 0 < t <= horizon:
                max_dev["P"] = max(max_dev["P"], _dev(ledger.P(i, j, t), val))
                max_dev["Gamma"] = max(max_dev["Gamma"],
                                       _dev(ledger.gamma(i, j, t), orc.gamma[(i, j, t)]))
                max_dev["Psi"] = max(max_dev["Psi"],
                                     _dev(ledger.psi_stored(i, j, t), orc.psi[(i, j, t)]))
                max_dev["Xi"] = max(max_dev["Xi"],
                                    _dev(ledger.xi(i, j, t), orc.xi[(i, j, t)]))
                if i != j:
                    d_i = ledger.nodes[i].delay
                    d_j = ledger.nodes[j].delay
                    if t >= ledger.pair_tau(i, j):
                        eng = ledger.upsilon_step(i, j, t)[0]
                    else:
                        eng = ledger.thetac(i, j, t - d_i - 1, t - d_j - 1)
                    max_dev["Upsilon"] = max(max_dev["Upsilon"],
                                             _dev(eng, orc.upsilon[(i, j, t)]))
        for t in range(1, horizon + 1):
            _, P_eng, _ = fusion_weights(ledger.assemble_xi(t), scenario.model.n,
                                         scenario.L)
            max_dev["fused_P"] = max(max_dev["fused_P"], _dev(P_eng, orc.fused_cov(t)))
        return OracleReport(mode=mode, horizon=horizon, max_dev=max_dev,
                            outside_3se=None, replicas=None)

    if mode != "monte-carlo":
        raise ValueError(f"unknown oracle mode {mode!r}")
    mc = simulate_replicas(scenario.model, scenario.schemes, scenario.delays,
                           horizon=horizon, replicas=replicas, seed=seed,
                           P0=scenario.P0)
    outside = {}
    for name, est_d, se_d, ref in [
        ("compensated", mc.cse_cov, mc.cse_cov_se, ledger.xi),
        ("local", mc.loe_cov, mc.loe_cov_se, ledger.P),
    ]:
        bad = total = 0
        dev_max = 0.0
        for (i, j, t), est in est_d.items():
            if not 0 < t <= horizon:
                continue
            se = np.maximum(se_d[(i, j, t)], 1e-14)
            dev = np.abs(est - ref(i, j, t))
            dev_max = max(dev_max, float(np.max(dev)))
            bad += int(np.sum(dev > 3.0 * se))
            total += dev.size
        outside[name] = (bad, total)
    return OracleReport(mode=mode, horizon=horizon,
                        max_dev={}, outside_3se=outside, replicas=replicas)


def _dev(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def reproduce_table1(model: SystemModel | None = None,
                     grid=None) -> list[tuple[float, bool, bool, float]]:
    """No-delay feasibility of the two-state benchmark across the selection grid.

    Returns (first-component probability, certificate verdict, eigenvalue-test
    verdict, eigenvalue) rows.
    """
    from .scenario import bundled_scenario_path, load_scenario
    if model is None:
        model = load_scenario(bundled_scenario_path("example1")).model
    grid = [round(0.1 * k, 1) for k in range(11)] if grid is None else grid
    rows = []
    for g in grid:
        scheme = build_scheme(2, 1, [g, 1.0 - g], node=0)
        a_ok, b_ok, lam = check_no_delay_tests(model, scheme)
        rows.append((g, a_ok, b_ok, lam))
    return rows


def write_table1(path, rows=None) -> None:
    rows = reproduce_table1() if rows is None else rows
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("selection_prob,certificate_feasible,eigenvalue_test,lambda_max\n")
        for g, a_ok, b_ok, lam in rows:
            fh.write(f"{g},{a_ok},{b_ok},{lam:.6f}\n")
