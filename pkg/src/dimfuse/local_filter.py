"""Per-sink-node Kalman filtering: gains, covariances, cross-covariances, limits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import frozen, spectral_radius, sym
from .models import SystemModel


class DivergenceError(RuntimeError):
    """Raised when a covariance iteration fails to reach its fixed point."""


@dataclass(frozen=True)
class GainUpdate:
    """Covariance-side quantities of one filter step (measurement independent)."""

    K: np.ndarray
    GK: np.ndarray      # I - K C
    PhiK: np.ndarray    # GK A
    Pii: np.ndarray
    Pstar: np.ndarray


@dataclass(frozen=True)
class LocalFilterState:
    """Full state of one node's filter at time t."""

    node: int
    xhat: np.ndarray
    K: np.ndarray
    GK: np.ndarray
    PhiK: np.ndarray
    Pii: np.ndarray
    Pstar: np.ndarray
    t: int


@dataclass(frozen=True)
class CrossCovariance:
    """Local estimation error cross-covariance between two distinct nodes."""

    pair: tuple[int, int]
    Pij: np.ndarray
    t: int


def gain_update(P_prev: np.ndarray, model: SystemModel, node: int) -> GainUpdate:
    """One covariance/gain recursion step.

    Pstar = A P A^T + Qw, K = Pstar C^T (C Pstar C^T + Qv)^-1,
    P = (I - K C) Pstar, symmetrized for numerical hygiene.
    """
    A = model.A
    C = model.sensor(node).C
    Qv = model.sensor(node).Qv
    Pstar = sym(A @ P_prev @ A.T + model.Qw)
    S = C @ Pstar @ C.T + Qv
    K = np.linalg.solve(S.T, (Pstar @ C.T).T).T
    GK = np.eye(model.n) - K @ C
    Pii = sym(GK @ Pstar)
    return GainUpdate(K=frozen(K), GK=frozen(GK), PhiK=frozen(GK @ A),
                      Pii=frozen(Pii), Pstar=frozen(Pstar))


def init_filter(model: SystemModel, node: int,
                x0: np.ndarray | None = None,
                P0: np.ndarray | None = None) -> LocalFilterState:
    """Filter state at t=0: the prior mean with covariance P0 (default identity)."""
    n = model.n
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    P0 = np.eye(n) if P0 is None else np.asarray(P0, dtype=float)
    q = model.sensor(node).q
    return LocalFilterState(
        node=node, xhat=frozen(x0.reshape(n)),
        K=frozen(np.zeros((n, q))), GK=frozen(np.eye(n)),
        PhiK=frozen(np.eye(n)), Pii=frozen(P0), Pstar=frozen(P0), t=0,
    )


def kalman_step(state: LocalFilterState, y: np.ndarray, model: SystemModel) -> LocalFilterState:
    """Advance one node's filter by one measurement.

    xhat(t) = GK(t) A xhat(t-1) + K(t) y(t) with the gain recursion of
    gain_update; returns the state at state.t + 1.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    q = model.sensor(state.node).q
    if y.shape != (q,):
        raise ValueError(f"measurement must have dimension {q}, got {y.shape}")
    g = gain_update(state.Pii, model, state.node)
    xhat = g.PhiK @ state.xhat + g.K @ y
    return LocalFilterState(
        node=state.node, xhat=frozen(xhat), K=g.K, GK=g.GK, PhiK=g.PhiK,
        Pii=g.Pii, Pstar=g.Pstar, t=state.t + 1,
    )


def cross_covariance_step(prev: CrossCovariance,
                          filters: tuple[LocalFilterState, LocalFilterState],
                          model: SystemModel) -> CrossCovariance:
    """Cross-covariance recursion P_ij(t) = GK_i(t) [Qw + A P_ij(t-1) A^T] GK_j(t)^T."""
    i, j = prev.pair
    if i == j:
        raise ValueError("cross-covariance pair must involve two distinct nodes")
    fi, fj = filters
    if fi.node != i or fj.node != j:
        raise ValueError("filter states do not match the pair")
    if fi.t != prev.t + 1 or fj.t != prev.t + 1:
        raise ValueError("filters must be advanced to the output time")
    A = model.A
    Pij = fi.GK @ (model.Qw + A @ prev.Pij @ A.T) @ fj.GK.T
    return CrossCovariance(pair=(i, j), Pij=frozen(Pij), t=prev.t + 1)


@dataclass(frozen=True)
class SteadyFilter:
    node: int
    Pii: np.ndarray
    K: np.ndarray
    GK: np.ndarray
    PhiK: np.ndarray
    iterations: int


def steady_state(model: SystemModel, node: int,
                 tol: float = 1e-10, max_iter: int = 100_000,
                 P0: np.ndarray | None = None) -> SteadyFilter:
    """Iterate the covariance recursion to its fixed point.

    Raises DivergenceError when ||P(t) - P(t-1)||_2 fails to drop below tol
    within max_iter steps.  The closed-loop matrix PhiK at the fixed point is
    checked to be Schur stable.
    """
    P = np.eye(model.n) if P0 is None else np.asarray(P0, dtype=float)
    g = None
    for it in range(1, max_iter + 1):
        with np.errstate(all="ignore"):
            g = gain_update(P, model, node)
        if not np.all(np.isfinite(g.Pii)):
            raise DivergenceError(
                f"node {node}: covariance iteration diverged after {it} steps"
            )
        delta = float(np.linalg.norm(g.Pii - P, 2))
        P = g.Pii
        if delta < tol:
            rho = spectral_radius(g.PhiK)
            if rho >= 1.0:
                raise DivergenceError(
                    f"node {node}: fixed point reached but closed loop unstable (rho={rho:.4f})"
                )
            return SteadyFilter(node=node, Pii=g.Pii, K=g.K, GK=g.GK,
                                PhiK=g.PhiK, iterations=it)
    raise DivergenceError(
        f"node {node}: covariance iteration did not converge within {max_iter} steps"
    )
