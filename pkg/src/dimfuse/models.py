"""Plant and sensor models plus the structural checks the estimators rely on.

The plant is a discrete-time linear system x(t+1) = A x(t) + w(t) observed by
L sink nodes through y_i(t) = C_i x(t) + v_i(t), with w and v_i mutually
uncorrelated zero-mean white noises.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import as_matrix, frozen, min_eig_sym, psd_sqrt, rank_with_tol

PSD_EIG_TOL = 1e-10


class ModelError(ValueError):
    """Raised when a model violates a structural precondition."""


@dataclass(frozen=True)
class SensorModel:
    """One sink node's measurement map y = C x + v with noise covariance Qv."""

    C: np.ndarray
    Qv: np.ndarray
    id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "C", frozen(as_matrix(self.C, "C")))
        object.__setattr__(self, "Qv", frozen(as_matrix(self.Qv, "Qv")))
        if self.Qv.shape != (self.q, self.q):
            raise ModelError(
                f"sensor {self.id}: Qv shape {self.Qv.shape} does not match q={self.q}"
            )

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[1]


@dataclass(frozen=True)
class SystemModel:
    """Plant matrix A, process-noise covariance Qw, and the sink-node sensors."""

    A: np.ndarray
    Qw: np.ndarray
    sensors: tuple[SensorModel, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "A", frozen(as_matrix(self.A, "A")))
        object.__setattr__(self, "Qw", frozen(as_matrix(self.Qw, "Qw")))
        object.__setattr__(self, "sensors", tuple(self.sensors))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def L(self) -> int:
        return len(self.sensors)

    def sensor(self, node: int) -> SensorModel:
        return self.sensors[node]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        lines = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            suffix = f" ({c.detail})" if c.detail else ""
            lines.append(f"{status}: {c.name}{suffix}")
        return "\n".join(lines)


def validate_model(model: SystemModel) -> ValidationReport:
    """Check the structural invariants of a system model.

    Pure report: failures are returned, not raised, so callers can surface
    every problem at once.
    """
    checks: list[CheckResult] = []

    n = model.n
    square = model.A.shape[0] == model.A.shape[1]
    checks.append(CheckResult("A square", square, f"shape {model.A.shape}"))

    checks.append(
        CheckResult("state dimension > 1", n > 1, f"n={n}")
    )

    qw_shape_ok = model.Qw.shape == (n, n)
    checks.append(CheckResult("Qw shape", qw_shape_ok, f"shape {model.Qw.shape}"))
    if qw_shape_ok:
        asym = float(np.max(np.abs(model.Qw - model.Qw.T)))
        checks.append(CheckResult("Qw symmetric", asym < 1e-9, f"max asymmetry {asym:.2e}"))
        lam = min_eig_sym(model.Qw)
        checks.append(
            CheckResult("Qw positive semidefinite", lam >= -PSD_EIG_TOL, f"min eig {lam:.3e}")
        )

    for s in model.sensors:
        prefix = f"sensor {s.id}"
        checks.append(
            CheckResult(f"{prefix}: C column count", s.n == n, f"{s.n} vs n={n}")
        )
        asym = float(np.max(np.abs(s.Qv - s.Qv.T)))
        checks.append(CheckResult(f"{prefix}: Qv symmetric", asym < 1e-9, f"max asymmetry {asym:.2e}"))
        lam = min_eig_sym(s.Qv)
        checks.append(
            CheckResult(f"{prefix}: Qv positive definite", lam > 0.0, f"min eig {lam:.3e}")
        )

    return ValidationReport(tuple(checks))


def check_rank_conditions(model: SystemModel, node: int) -> bool:
    """Noise-stabilizability and detectability rank test for one sink node.

    Full-rank tests on [sqrt(Qw), A sqrt(Qw), ..., A^(n-1) sqrt(Qw)] and
    col{C_i, C_i A, ..., C_i A^(n-1)}; these guarantee the local filter
    covariance converges to its unique fixed point from any initialization.
    """
    A = model.A
    n = model.n
    B = psd_sqrt(model.Qw)
    C = model.sensor(node).C

    ctrb_blocks = []
    obsv_blocks = []
    Ak_B = B.copy()
    Ck = C.copy()
    for _ in range(n):
        ctrb_blocks.append(Ak_B)
        obsv_blocks.append(Ck)
        Ak_B = A @ Ak_B
        Ck = Ck @ A
    ctrb = np.hstack(ctrb_blocks)
    obsv = np.vstack(obsv_blocks)
    return rank_with_tol(ctrb) == n and rank_with_tol(obsv) == n
