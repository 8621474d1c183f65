"""Scenario files: the single configuration surface for models, channels,
runs, and outputs.  Regression tests read the same files users do."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .channel import SelectionScheme, build_scheme
from .covariance import lcm
from .models import SensorModel, SystemModel, validate_model


class ScenarioError(ValueError):
    """Scenario file failed to parse or validate; message carries key paths."""


@dataclass
class Scenario:
    name: str
    model: SystemModel
    schemes: list[SelectionScheme]
    delays: list[int]
    link_modes: list[str]
    horizon: int
    seed: int
    replicas: int
    x0_mean: np.ndarray
    P0: np.ndarray
    traces: list[str] = field(default_factory=lambda: ["fused"])
    sweep: list[float] | None = None
    path: str = "<memory>"

    @property
    def L(self) -> int:
        return self.model.L

    def max_period(self) -> int:
        period = 1
        for di in self.delays:
            for dj in self.delays:
                period = max(period, lcm(di + 1, dj + 1))
        return period


def _matrix(raw, ctx: str, errors: list[str]):
    try:
        arr = np.asarray(raw, dtype=float)
    except Exception:
        errors.append(f"{ctx}: not a numeric matrix")
        return None
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        errors.append(f"{ctx}: expected a matrix, got ndim={arr.ndim}")
        return None
    return arr


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file, raising ScenarioError with every
    problem found (file and key context included)."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"{path}: no such file")
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}")
    return scenario_from_dict(doc, str(path))


def scenario_from_dict(doc: dict, path: str = "<memory>") -> Scenario:
    errors: list[str] = []
    name = doc.get("name", Path(path).stem)

    model_tbl = doc.get("model")
    if not isinstance(model_tbl, dict):
        raise ScenarioError(f"{path}: missing [model] table")
    A = _matrix(model_tbl.get("A"), "model.A", errors)
    Qw = _matrix(model_tbl.get("Qw"), "model.Qw", errors)

    sensors_raw = doc.get("sensor", [])
    if not sensors_raw:
        errors.append("at least one [[sensor]] table is required")
    sensors = []
    for k, s in enumerate(sensors_raw):
        C = _matrix(s.get("C"), f"sensor[{k}].C", errors)
        Qv = _matrix(s.get("Qv"), f"sensor[{k}].Qv", errors)
        if C is not None and Qv is not None:
            sensors.append(SensorModel(C=C, Qv=Qv, id=k))
    if errors:
        raise ScenarioError(f"{path}: " + "; ".join(errors))

    model = SystemModel(A=A, Qw=Qw, sensors=tuple(sensors))
    report = validate_model(model)
    if not report.ok:
        for c in report.failures():
            errors.append(f"model invariant: {c.name} ({c.detail})")

    nodes_raw = doc.get("node", [])
    if len(nodes_raw) != len(sensors):
        errors.append(
            f"[[node]] count {len(nodes_raw)} must match sensor count {len(sensors)}"
        )
    schemes: list[SelectionScheme] = []
    delays: list[int] = []
    modes: list[str] = []
    for k, nd in enumerate(nodes_raw):
        r = nd.get("r")
        probs = nd.get("probs")
        mode = nd.get("mode", "constant")
        if mode not in ("constant", "bounded"):
            errors.append(f"node[{k}].mode: unknown mode {mode!r}")
            mode = "constant"
        if mode == "bounded":
            delay = nd.get("bound")
            if delay is None:
                errors.append(f"node[{k}]: bounded mode requires 'bound'")
                delay = 0
        else:
            delay = nd.get("delay", 0)
        try:
            delay = int(delay)
            if delay < 0:
                raise ValueError
        except (TypeError, ValueError):
            errors.append(f"node[{k}].delay: must be a nonnegative integer")
            delay = 0
        try:
            schemes.append(build_scheme(model.n, int(r), probs, node=k))
        except Exception as exc:
            errors.append(f"node[{k}]: {exc}")
        delays.append(delay)
        modes.append(mode)

    run = doc.get("run", {})
    horizon = run.get("horizon", 0)
    if not isinstance(horizon, int) or horizon < 1:
        errors.append("run.horizon: must be a positive integer")
    seed = int(run.get("seed", 0))
    replicas = int(run.get("replicas", 1))
    if replicas < 1:
        errors.append("run.replicas: must be >= 1")

    init = doc.get("initial", {})
    x0_mean = np.asarray(init.get("x0_mean", np.zeros(model.n)), dtype=float)
    if x0_mean.shape != (model.n,):
        errors.append(f"initial.x0_mean: expected length {model.n}")
        x0_mean = np.zeros(model.n)
    P0_raw = init.get("P0", 1.0)
    if isinstance(P0_raw, (int, float)):
        P0 = float(P0_raw) * np.eye(model.n)
    else:
        P0 = _matrix(P0_raw, "initial.P0", errors)
        if P0 is None or P0.shape != (model.n, model.n):
            errors.append("initial.P0: expected scalar or n x n matrix")
            P0 = np.eye(model.n)
    if float(np.min(np.linalg.eigvalsh(0.5 * (P0 + P0.T)))) < -1e-10:
        errors.append("initial.P0: must be positive semidefinite")

    outputs = doc.get("outputs", {})
    traces = list(outputs.get("traces", ["fused"]))

    sweep = None
    if "sweep" in doc:
        sweep = [float(v) for v in doc["sweep"].get("selection_prob_grid", [])]
        if sweep and model.n != 2:
            errors.append("sweep.selection_prob_grid: only defined for two-state models")

    if errors:
        raise ScenarioError(f"{path}: " + "; ".join(errors))

    return Scenario(name=name, model=model, schemes=schemes, delays=delays,
                    link_modes=modes, horizon=int(horizon), seed=seed,
                    replicas=replicas, x0_mean=x0_mean, P0=P0, traces=traces,
                    sweep=sweep, path=path)


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package (example1, example2)."""
    here = Path(__file__).resolve().parent
    p = here / "scenarios" / f"{name}.toml"
    if not p.exists():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return p
