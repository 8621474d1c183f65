"""Correlation kernels and covariance recursions driving the fusion weights.

The ledger tracks, per tick, every second-moment quantity the fusion center
needs: local error covariances P_ij, local/compensated cross-moments Gamma,
Psi, Upsilon, and the compensated-estimate covariance blocks Xi that feed the
optimal weights.  All recursions are measurement independent, so the ledger
can be advanced offline.

Start-up is handled exactly: before a recursion has the full history it
needs (the compensated estimates spend their first delay-many ticks in a
pure-prediction phase), the engine evaluates the same expectations through
general time-pair kernels instead of the steady-regime closed forms.  Both
paths agree wherever both apply, and both are validated against brute-force
oracles in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np

from .channel import SelectionScheme
from .linalg import sym
from .local_filter import GainUpdate, gain_update
from .models import SystemModel


class DependencyError(RuntimeError):
    """A recursion was asked for a time its history no longer (or not yet) covers."""


class DegenerateCovarianceError(RuntimeError):
    """Assembled covariance failed its positive-semidefiniteness tolerance."""


def odot(U: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Outer product of two diagonals: (U odot B)[k, l] = u_k * b_l.

    Accepts diagonal matrices or the diagonal vectors themselves.
    """
    u = _diag_vector(U, "U")
    b = _diag_vector(B, "B")
    return np.outer(u, b)


def hadamard(G1: np.ndarray, G2: np.ndarray) -> np.ndarray:
    """Entrywise matrix product."""
    G1 = np.asarray(G1, dtype=float)
    G2 = np.asarray(G2, dtype=float)
    if G1.shape != G2.shape:
        raise ValueError(f"shape mismatch {G1.shape} vs {G2.shape}")
    return G1 * G2


def _diag_vector(M, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return M
    if M.ndim == 2 and M.shape[0] == M.shape[1]:
        if np.any(M != np.diag(np.diag(M))):
            raise ValueError(f"{name} must be diagonal")
        return np.diag(M)
    raise ValueError(f"{name} must be a diagonal matrix or a vector")


def lcm(a: int, b: int) -> int:
    return a * b // gcd(a, b)


def min_cycles(d_i: int, d_j: int, cap: int = 1_000_000) -> int:
    """Smallest eta >= 1 with eta * (d_j + 1) >= d_i, by explicit iteration."""
    eta = 1
    while eta * (d_j + 1) - d_i < 0:
        eta += 1
        if eta > cap:
            raise RuntimeError("min_cycles exceeded iteration cap")
    return eta


def unroll_depth(d: int, t1: int, t2: int, cap: int = 1_000_000) -> int:
    """Smallest chi >= 0 with t1 - chi*(d+1) <= t2, by explicit iteration."""
    chi = 0
    while t1 - chi * (d + 1) > t2:
        chi += 1
        if chi > cap:
            raise RuntimeError("unroll_depth exceeded iteration cap")
    return chi


@dataclass(frozen=True)
class NodeChannel:
    """Per-node constants combining the selection scheme and the delay."""

    node: int
    delay: int
    scheme: SelectionScheme
    Hd: np.ndarray       # A^d Hbar
    HAd: np.ndarray      # A^d (I - Hbar) A
    HbarAd: np.ndarray   # A^d (I - Hbar)


class CovarianceLedger:
    """Time-indexed store of every covariance quantity of the fusion recursion.

    Parameters
    ----------
    model : SystemModel
    schemes : per-node SelectionScheme list
    delays : per-node integer delays (the effective, possibly prolonged, delay)
    P0 : shared initial covariance of all estimation errors (default identity);
         the plant state at t=0 is drawn around a known mean, every estimator
         is initialized at that mean, so all initial errors coincide.
    """

    PSD_TOL = 1e-8

    def __init__(self, model: SystemModel, schemes, delays, P0=None,
                 window: int | None = None):
        self.model = model
        self.n = model.n
        self.L = model.L
        if len(schemes) != self.L or len(delays) != self.L:
            raise ValueError("need one scheme and one delay per sensor node")
        self.P0 = np.eye(self.n) if P0 is None else sym(np.asarray(P0, dtype=float))

        A = model.A
        self.nodes: list[NodeChannel] = []
        for i, (scheme, d) in enumerate(zip(schemes, delays)):
            d = int(d)
            if d < 0:
                raise ValueError("delays must be nonnegative")
            Ad = np.linalg.matrix_power(A, d)
            H = np.diag(scheme.Hbar)
            self.nodes.append(NodeChannel(
                node=i, delay=d, scheme=scheme,
                Hd=Ad @ H, HAd=Ad @ (np.eye(self.n) - H) @ A,
                HbarAd=Ad @ (np.eye(self.n) - H),
            ))

        self.pair_period = {}
        for i in range(self.L):
            for j in range(self.L):
                tau = lcm(self.nodes[i].delay + 1, self.nodes[j].delay + 1)
                self.pair_period[(i, j)] = tau
        self.max_period = max(self.pair_period.values(), default=1)
        max_delay = max((nc.delay for nc in self.nodes), default=0)
        self.window = window or (2 * self.max_period + max_delay + 8)

        self.t = 0
        self._fil: dict[tuple[int, int], GainUpdate] = {}
        self._P: dict[tuple[int, int, int], np.ndarray] = {}
        self._gamma: dict[tuple[int, int, int], np.ndarray] = {}
        self._psi: dict[tuple[int, int, int], np.ndarray] = {}
        self._xi: dict[tuple[int, int, int], np.ndarray] = {}
        self._apow: dict[int, np.ndarray] = {0: np.eye(self.n)}
        self._hadpow: dict[tuple[int, int], np.ndarray] = {}
        self._sigma_cache: dict[tuple[int, int], np.ndarray] = {}
        self._noise_tail_cache: dict[int, np.ndarray] = {}
        self._ff_cache: dict[tuple[int, int, int], np.ndarray] = {}
        self._memo_phi_w: dict = {}
        self._memo_theta_w: dict = {}
        self._memo_xi0: dict = {}
        self._memo_theta_x0: dict = {}
        self._memo_gamma2: dict = {}
        self._memo_thetac: dict = {}

        for i in range(self.L):
            for j in range(self.L):
                self._P[(i, j, 0)] = self.P0.copy()
                self._gamma[(i, j, 0)] = self.P0.copy()
                self._xi[(i, j, 0)] = self.P0.copy()

    # -- stored-history accessors ------------------------------------------

    def _flt(self, i: int, t: int) -> GainUpdate:
        try:
            return self._fil[(i, t)]
        except KeyError:
            raise DependencyError(f"filter matrices for node {i} missing at t={t}")

    def P(self, i: int, j: int, t: int) -> np.ndarray:
        try:
            return self._P[(i, j, t)]
        except KeyError:
            raise DependencyError(f"P[{i},{j}] missing at t={t}")

    def gamma(self, i: int, j: int, t: int) -> np.ndarray:
        try:
            return self._gamma[(i, j, t)]
        except KeyError:
            raise DependencyError(f"Gamma[{i},{j}] missing at t={t}")

    def xi(self, i: int, j: int, t: int) -> np.ndarray:
        try:
            return self._xi[(i, j, t)]
        except KeyError:
            raise DependencyError(f"Xi[{i},{j}] missing at t={t}")

    def psi_stored(self, i: int, j: int, t: int) -> np.ndarray:
        try:
            return self._psi[(i, j, t)]
        except KeyError:
            raise DependencyError(f"Psi[{i},{j}] missing at t={t}")

    def apow(self, k: int) -> np.ndarray:
        if k not in self._apow:
            self._apow[k] = self.model.A @ self.apow(k - 1)
        return self._apow[k]

    def had_pow(self, i: int, k: int) -> np.ndarray:
        if (i, k) not in self._hadpow:
            self._hadpow[(i, k)] = np.linalg.matrix_power(self.nodes[i].HAd, k)
        return self._hadpow[(i, k)]

    def _prod_phi(self, i: int, hi: int, lo: int) -> np.ndarray:
        """PhiK_i(hi) PhiK_i(hi-1) ... PhiK_i(lo); identity when lo > hi."""
        acc = np.eye(self.n)
        for t in range(hi, lo - 1, -1):
            acc = acc @ self._flt(i, t).PhiK
        return acc

    # -- correlation kernels ------------------------------------------------
    # Conventions: the shared initial error lives at every time <= 0; process
    # noise exists for times >= 0; measurements and masks from t = 1.

    def phi_w(self, i: int, t1: int, t2: int) -> np.ndarray:
        """E{local error_i(t1) w(t2)^T}."""
        if t2 < 0 or t1 <= 0 or t1 <= t2:
            return np.zeros((self.n, self.n))
        key = (i, t1, t2)
        out = self._memo_phi_w.get(key)
        if out is None:
            out = self._prod_phi(i, t1, t2 + 2) @ self._flt(i, t2 + 1).GK @ self.model.Qw
            self._memo_phi_w[key] = out
        return out

    def phi_x(self, i: int, j: int, t1: int, t2: int) -> np.ndarray:
        """E{local error_i(t1) local error_j(t2)^T}."""
        if t1 < t2:
            return self.phi_x(j, i, t2, t1).T
        if t2 < 0:
            return self.xi0(i, t1)
        return self._prod_phi(i, t1, t2 + 1) @ self.P(i, j, t2)

    def phi_F(self, i: int, t1: int, g: int, t2: int) -> np.ndarray:
        """E{local error_i(t1) F(g, t2)^T} with F the g-step accumulated noise."""
        acc = np.zeros((self.n, self.n))
        for theta in range(1, g + 1):
            acc += self.phi_w(i, t1, t2 - theta) @ self.apow(theta - 1).T
        return acc

    def phi_wF(self, g: int, t1: int, t2: int) -> np.ndarray:
        """E{F(g, t1) w(t2)^T} = A^(t1-t2-1) Qw when 1 <= t1-t2 <= g, else 0."""
        if t2 >= 0 and 1 <= t1 - t2 <= g:
            return self.apow(t1 - t2 - 1) @ self.model.Qw
        return np.zeros((self.n, self.n))

    def xi0(self, i: int, t: int) -> np.ndarray:
        """E{local error_i(t) initial_error^T}."""
        if t <= 0:
            return self.P0
        key = (i, t)
        out = self._memo_xi0.get(key)
        if out is None:
            out = self._flt(i, t).PhiK @ self.xi0(i, t - 1)
            self._memo_xi0[key] = out
        return out

    def theta_x0(self, i: int, t: int) -> np.ndarray:
        """E{compensated error_i(t) initial_error^T}."""
        if t <= 0:
            return self.P0
        key = (i, t)
        out = self._memo_theta_x0.get(key)
        if out is None:
            nc = self.nodes[i]
            if t <= nc.delay:
                out = self.model.A @ self.theta_x0(i, t - 1)
            else:
                out = nc.Hd @ self.xi0(i, t - nc.delay) \
                    + nc.HAd @ self.theta_x0(i, t - nc.delay - 1)
            self._memo_theta_x0[key] = out
        return out

    def theta_w(self, i: int, t1: int, t2: int) -> np.ndarray:
        """E{compensated error_i(t1) w(t2)^T}.

        Nonzero only for 0 <= t2 < t1: through the accumulated-noise tail the
        compensated error carries every process noise back from t1 - 1.
        """
        Z = np.zeros((self.n, self.n))
        if t2 < 0 or t1 <= 0 or t2 >= t1:
            return Z
        nc = self.nodes[i]
        d = nc.delay
        if t1 <= d:
            # pure-prediction phase: error is A^t1 initial + accumulated noise
            return self.apow(t1 - 1 - t2) @ self.model.Qw
        key = (i, t1, t2)
        out = self._memo_theta_w.get(key)
        if out is None:
            out = nc.Hd @ self.phi_w(i, t1 - d, t2) \
                + nc.HAd @ self.theta_w(i, t1 - d - 1, t2) \
                + self.phi_wF(d, t1, t2)
            if t2 == t1 - d - 1:
                out = out + nc.HbarAd @ self.model.Qw
            self._memo_theta_w[key] = out
        return out

    def theta_w_closed(self, i: int, t1: int, t2: int) -> np.ndarray:
        """Closed-form unrolled variant of theta_w, valid once the unroll stays
        clear of the prediction phase; used to cross-check the recursion."""
        Z = np.zeros((self.n, self.n))
        nc = self.nodes[i]
        d = nc.delay
        if t2 < 0 or t2 >= t1:
            return Z
        chi = unroll_depth(d, t1, t2)
        if t1 - (chi - 1) * (d + 1) < d + 1:
            raise DependencyError("closed form reaches into the prediction phase")
        acc = Z.copy()
        for h in range(chi):
            lead = self.had_pow(i, h)
            th = t1 - h * (d + 1)
            acc = acc + lead @ (nc.Hd @ self.phi_w(i, th - d, t2)
                                + self.phi_wF(d, th, t2))
            if th - (d + 1) == t2:
                acc = acc + lead @ nc.HbarAd @ self.model.Qw
        return acc

    def theta_F(self, i: int, t1: int, g: int, t2: int) -> np.ndarray:
        """E{compensated error_i(t1) F(g, t2)^T}."""
        acc = np.zeros((self.n, self.n))
        for theta in range(1, g + 1):
            acc += self.theta_w(i, t1, t2 - theta) @ self.apow(theta - 1).T
        return acc

    def gamma2(self, i: int, j: int, t1: int, t2: int) -> np.ndarray:
        """E{local error_i(t1) compensated error_j(t2)^T} for any time pair."""
        if t1 <= 0 and t2 <= 0:
            return self.P0
        if t1 <= 0:
            return self.theta_x0(j, t2).T
        if t2 <= 0:
            return self.xi0(i, t1)
        if t1 >= t2:
            return self._prod_phi(i, t1, t2 + 1) @ self.gamma(i, j, t2)
        key = (i, j, t1, t2)
        out = self._memo_gamma2.get(key)
        if out is None:
            nc = self.nodes[j]
            d = nc.delay
            if t2 <= d:
                out = self.gamma2(i, j, t1, t2 - 1) @ self.model.A.T \
                    + self.phi_w(i, t1, t2 - 1)
            else:
                out = self.phi_x(i, j, t1, t2 - d) @ nc.Hd.T \
                    + self.gamma2(i, j, t1, t2 - d - 1) @ nc.HAd.T \
                    + self.phi_w(i, t1, t2 - d - 1) @ nc.HbarAd.T \
                    + self.phi_F(i, t1, d, t2)
            self._memo_gamma2[key] = out
        return out

    def thetac(self, i: int, j: int, t1: int, t2: int) -> np.ndarray:
        """E{compensated error_i(t1) compensated error_j(t2)^T}, i != j."""
        if i == j:
            raise ValueError("thetac is the cross-node kernel; use the Xi store for i == j")
        if t1 <= 0 and t2 <= 0:
            return self.P0
        if t1 <= 0:
            return self.theta_x0(j, t2).T
        if t2 <= 0:
            return self.theta_x0(i, t1)
        stored = self._xi.get((i, j, t1)) if t1 == t2 else None
        if stored is not None:
            return stored
        if t2 > t1:
            return self.thetac(j, i, t2, t1).T
        key = (i, j, t1, t2)
        out = self._memo_thetac.get(key)
        if out is None:
            nc = self.nodes[i]
            d = nc.delay
            if t1 <= d:
                out = self.model.A @ self.thetac(i, j, t1 - 1, t2) \
                    + self.theta_w(j, t2, t1 - 1).T
            else:
                out = nc.Hd @ self.gamma2(i, j, t1 - d, t2) \
                    + nc.HAd @ self.thetac(i, j, t1 - d - 1, t2) \
                    + nc.HbarAd @ self.theta_w(j, t2, t1 - d - 1).T
                for theta in range(1, d + 1):
                    out = out + self.apow(theta - 1) @ self.theta_w(j, t2, t1 - theta).T
            self._memo_thetac[key] = out
        return out

    def phi_kernels(self, i: int, j: int, t1: int, t2: int, g: int):
        """The four local-error correlation kernels at one time pair."""
        return (self.phi_w(i, t1, t2), self.phi_x(i, j, t1, t2),
                self.phi_F(i, t1, g, t2), self.phi_wF(g, t1, t2))

    def theta_kernels(self, i: int, t1: int, t2: int, g: int):
        """The two compensated-error correlation kernels at one time pair."""
        return (self.theta_w(i, t1, t2), self.theta_F(i, t1, g, t2))

    # -- per-tick recursion steps --------------------------------------------

    def gamma_step(self, i: int, j: int, t: int) -> np.ndarray:
        """Gamma_ij(t) = E{local error_i(t) compensated error_j(t)^T}."""
        nc = self.nodes[j]
        d = nc.delay
        if t <= d:
            return self._flt(i, t).PhiK @ self.gamma(i, j, t - 1) @ self.model.A.T \
                + self._flt(i, t).GK @ self.model.Qw
        return self._prod_phi(i, t, t - d) @ self.gamma(i, j, t - d - 1) @ nc.HAd.T \
            + self.phi_x(i, j, t, t - d) @ nc.Hd.T \
            + self.phi_F(i, t, d, t) \
            + self.phi_w(i, t, t - d - 1) @ nc.HbarAd.T

    def psi_step(self, i: int, j: int, t: int) -> np.ndarray:
        """Psi_ij(t) = E{local error_i(t - d_i) compensated error_j(t - d_j - 1)^T}."""
        d_i = self.nodes[i].delay
        d_j = self.nodes[j].delay
        if i == j:
            if t - d_i >= 1:
                return self._flt(i, t - d_i).PhiK @ self.gamma(i, i, t - d_i - 1)
            return self.gamma2(i, i, t - d_i, t - d_i - 1)
        eta = min_cycles(d_i, d_j)
        if t < eta * (d_j + 1):
            return self.gamma2(i, j, t - d_i, t - d_j - 1)
        nc_j = self.nodes[j]
        acc = np.zeros((self.n, self.n))
        for kappa in range(1, eta):
            tk = t - kappa * (d_j + 1)
            term = self.phi_x(i, j, t - d_i, tk - d_j) @ nc_j.Hd.T \
                + self.phi_w(i, t - d_i, tk - d_j - 1) @ nc_j.HbarAd.T \
                + self.phi_F(i, t - d_i, d_j, tk)
            acc += term @ self.had_pow(j, kappa - 1).T
        t_eta = t - eta * (d_j + 1)
        acc += self._prod_phi(i, t - d_i, t_eta + 1) @ self.gamma(i, j, t_eta) \
            @ self.had_pow(j, eta - 1).T
        return acc

    def pair_tau(self, i: int, j: int) -> int:
        return self.pair_period[(i, j)]

    def pair_tau_d(self, i: int, j: int) -> int:
        """Number of delay cycles of node i inside the pair's lcm period."""
        return self.pair_period[(i, j)] // (self.nodes[i].delay + 1)

    def noise_tail(self, g: int) -> np.ndarray:
        """Accumulated covariance of g prediction steps: sum A^k Qw A^k^T, k < g."""
        if g not in self._noise_tail_cache:
            acc = np.zeros((self.n, self.n))
            for theta in range(1, g + 1):
                acc += self.apow(theta - 1) @ self.model.Qw @ self.apow(theta - 1).T
            self._noise_tail_cache[g] = acc
        return self._noise_tail_cache[g]

    def _upsilon_x(self, i: int, j: int, t: int) -> np.ndarray:
        """Second moment of the stacked noise-and-error vectors of both nodes."""
        n = self.n
        Qw = self.model.Qw
        d_i, d_j = self.nodes[i].delay, self.nodes[j].delay
        mi = self.pair_tau_d(i, j) - 1
        mj = self.pair_tau_d(j, i) - 1
        x_i = [t - k * (d_i + 1) - d_i for k in range(1, mi + 1)]
        w_i = [t - k * (d_i + 1) for k in range(2, mi + 2)]
        F_i = [t - k * (d_i + 1) for k in range(1, mi + 1)]
        x_j = [t - k * (d_j + 1) - d_j for k in range(1, mj + 1)]
        w_j = [t - k * (d_j + 1) for k in range(2, mj + 2)]
        F_j = [t - k * (d_j + 1) for k in range(1, mj + 1)]

        out = np.zeros((3 * mi * n, 3 * mj * n))

        def put(r, c, block):
            out[r * n:(r + 1) * n, c * n:(c + 1) * n] = block

        for r, a in enumerate(x_i):
            for c, b in enumerate(x_j):
                put(r, c, self.phi_x(i, j, a, b))
            for c, b in enumerate(w_j):
                put(r, mj + c, self.phi_w(i, a, b))
            for c, b in enumerate(F_j):
                put(r, 2 * mj + c, self.phi_F(i, a, d_j, b))
        for r, a in enumerate(w_i):
            for c, b in enumerate(x_j):
                put(mi + r, c, self.phi_w(j, b, a).T)
            for c, b in enumerate(w_j):
                if a == b:
                    put(mi + r, mj + c, Qw)
            for c, b in enumerate(F_j):
                put(mi + r, 2 * mj + c, self.phi_wF(d_j, b, a).T)
        for r, a in enumerate(F_i):
            for c, b in enumerate(x_j):
                put(2 * mi + r, c, self.phi_F(j, b, d_i, a).T)
            for c, b in enumerate(w_j):
                put(2 * mi + r, mj + c, self.phi_wF(d_i, a, b))
            for c, b in enumerate(F_j):
                key = (i, j, a - b)
                if key not in self._ff_cache:
                    acc = np.zeros((n, n))
                    for theta in range(1, d_i + 1):
                        acc += self.apow(theta - 1) @ self.phi_wF(d_j, b, a - theta).T
                    self._ff_cache[key] = acc
                put(2 * mi + r, 2 * mj + c, self._ff_cache[key])
        return out

    def _upsilon_c(self, i: int, j: int, t: int) -> np.ndarray:
        """Correlation of node i's stacked vector with node j's old compensated error."""
        n = self.n
        d_i = self.nodes[i].delay
        tau = self.pair_tau(i, j)
        mi = self.pair_tau_d(i, j) - 1
        out = np.zeros((3 * mi * n, n))
        for k in range(1, mi + 1):
            a = t - k * (d_i + 1)
            out[(k - 1) * n:k * n] = self.gamma2(i, j, a - d_i, t - tau)
            out[(mi + k - 1) * n:(mi + k) * n] = self.theta_w(j, t - tau, a - (d_i + 1)).T
            out[(2 * mi + k - 1) * n:(2 * mi + k) * n] = self.theta_F(j, t - tau, d_i, a).T
        return out

    def upsilon_step(self, i: int, j: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Upsilon_ij(t) = E{comp error_i(t-d_i-1) comp error_j(t-d_j-1)^T} and its
        increment part, via the lcm lifting.  Regular regime only."""
        tau = self.pair_tau(i, j)
        if t < tau:
            raise DependencyError(
                f"Upsilon[{i},{j}] lifting needs t >= {tau}, got t={t}"
            )
        mi = self.pair_tau_d(i, j)
        mj = self.pair_tau_d(j, i)
        lead_i = self.had_pow(i, mi - 1)
        lead_j = self.had_pow(j, mj - 1)
        up_hat = np.zeros((self.n, self.n))
        if mi > 1 and mj > 1:
            Si = self._stack_sigma_for(i, j)
            Sj = self._stack_sigma_for(j, i)
            up_hat = up_hat + Si @ self._upsilon_x(i, j, t) @ Sj.T
        if mi > 1:
            Si = self._stack_sigma_for(i, j)
            up_hat = up_hat + Si @ self._upsilon_c(i, j, t) @ lead_j.T
        if mj > 1:
            Sj = self._stack_sigma_for(j, i)
            up_hat = up_hat + lead_i @ self._upsilon_c(j, i, t).T @ Sj.T
        up = lead_i @ self.xi(i, j, t - tau) @ lead_j.T + up_hat
        return up, up_hat

    def _psi_cached(self, i: int, j: int, t: int) -> np.ndarray:
        got = self._psi.get((i, j, t))
        return got if got is not None else self.psi_step(i, j, t)

    def _stack_sigma_for(self, i: int, j: int) -> np.ndarray:
        key = (i, j)
        if key not in self._sigma_cache:
            nc = self.nodes[i]
            m = self.pair_tau_d(i, j)
            s1 = [self.had_pow(i, k) @ nc.Hd for k in range(m - 1)]
            s2 = [self.had_pow(i, k) @ nc.HbarAd for k in range(m - 1)]
            s3 = [self.had_pow(i, k) for k in range(m - 1)]
            self._sigma_cache[key] = np.hstack(s1 + s2 + s3)
        return self._sigma_cache[key]

    def xi_diag_step(self, i: int, t: int) -> np.ndarray:
        """Xi_ii(t): covariance of node i's compensated estimate error."""
        nc = self.nodes[i]
        d = nc.delay
        A = self.model.A
        Qw = self.model.Qw
        if t <= d:
            return sym(A @ self.xi(i, i, t - 1) @ A.T + Qw)
        Ad = self.apow(d)
        fl = self._flt(i, t - d)
        Gam = self.gamma(i, i, t - d - 1)
        cross = fl.PhiK @ Gam @ A.T + fl.GK @ Qw
        core = hadamard(nc.scheme.W, A @ self.xi(i, i, t - d - 1) @ A.T) \
            + hadamard(nc.scheme.Lambda, self.P(i, i, t - d)) \
            + hadamard(nc.scheme.W, Qw) \
            + hadamard(nc.scheme.V, cross) \
            + hadamard(nc.scheme.V.T, cross.T)
        out = Ad @ core @ Ad.T + self.noise_tail(d)
        return sym(out)

    def xi_offdiag_step(self, i: int, j: int, t: int) -> np.ndarray:
        """Xi_ij(t), i != j: cross-covariance of two compensated estimate errors."""
        if i == j:
            raise ValueError("use xi_diag_step for i == j")
        tau = self.pair_tau(i, j)
        if t < tau:
            return self.thetac(i, j, t, t)
        nc_i, nc_j = self.nodes[i], self.nodes[j]
        d_i, d_j = nc_i.delay, nc_j.delay
        Qw = self.model.Qw
        mi = self.pair_tau_d(i, j)
        mj = self.pair_tau_d(j, i)

        _, up_hat = self.upsilon_step(i, j, t)
        out = self.had_pow(i, mi) @ self.xi(i, j, t - tau) @ self.had_pow(j, mj).T
        out = out + nc_i.HAd @ up_hat @ nc_j.HAd.T
        out = out + self.noise_tail(min(d_i, d_j))
        out = out + nc_i.Hd @ (
            self.phi_x(i, j, t - d_i, t - d_j) @ nc_j.Hd.T
            + self._psi_cached(i, j, t) @ nc_j.HAd.T
            + self.phi_F(i, t - d_i, d_j, t)
            + self.phi_w(i, t - d_i, t - d_j - 1) @ nc_j.HbarAd.T
        )
        out = out + nc_i.HAd @ (
            self.theta_w(i, t - d_i - 1, t - d_j - 1) @ nc_j.HbarAd.T
            + self._psi_cached(j, i, t).T @ nc_j.Hd.T
            + self.theta_F(i, t - d_i - 1, d_j, t)
        )
        cw = np.zeros((self.n, self.n))
        if d_i == d_j:
            cw = cw + Qw @ nc_j.HbarAd.T
        if d_j > d_i:
            cw = cw + Qw @ self.apow(d_i).T
        cw = cw + self.phi_w(j, t - d_j, t - d_i - 1).T @ nc_j.Hd.T
        cw = cw + self.theta_w(j, t - d_j - 1, t - d_i - 1).T @ nc_j.HAd.T
        out = out + nc_i.HbarAd @ cw
        out = out + self.phi_F(j, t - d_j, d_i, t).T @ nc_j.Hd.T
        out = out + self.theta_F(j, t - d_j - 1, d_i, t).T @ nc_j.HAd.T
        if d_i > d_j:
            out = out + self.apow(d_j) @ Qw @ nc_j.HbarAd.T
        return out

    # -- advancing the ledger --------------------------------------------------

    def advance(self) -> int:
        """Advance every stored quantity by one tick; returns the new time."""
        t = self.t + 1
        A = self.model.A
        Qw = self.model.Qw
        for i in range(self.L):
            prev = self.P(i, i, t - 1)
            self._fil[(i, t)] = gain_update(prev, self.model, i)
            self._P[(i, i, t)] = self._fil[(i, t)].Pii
        for i in range(self.L):
            for j in range(i + 1, self.L):
                Pij = self._flt(i, t).GK @ (Qw + A @ self.P(i, j, t - 1) @ A.T) \
                    @ self._flt(j, t).GK.T
                self._P[(i, j, t)] = Pij
                self._P[(j, i, t)] = Pij.T
        for i in range(self.L):
            for j in range(self.L):
                self._gamma[(i, j, t)] = self.gamma_step(i, j, t)
        for i in range(self.L):
            for j in range(self.L):
                self._psi[(i, j, t)] = self.psi_step(i, j, t)
        for i in range(self.L):
            self._xi[(i, i, t)] = self.xi_diag_step(i, t)
        for i in range(self.L):
            for j in range(i + 1, self.L):
                Xij = self.xi_offdiag_step(i, j, t)
                self._xi[(i, j, t)] = Xij
                self._xi[(j, i, t)] = Xij.T
        self.t = t
        if t % 32 == 0:
            self._prune(t - self.window)
        return t

    def advance_to(self, t: int) -> None:
        while self.t < t:
            self.advance()

    def _prune(self, cutoff: int) -> None:
        if cutoff <= 0:
            return
        for store in (self._P, self._gamma, self._psi, self._xi):
            for key in [k for k in store if k[2] < cutoff]:
                del store[key]
        for key in [k for k in self._fil if k[1] < cutoff]:
            del self._fil[key]
        for memo in (self._memo_phi_w, self._memo_theta_w, self._memo_xi0,
                     self._memo_theta_x0, self._memo_gamma2, self._memo_thetac):
            # node indices are tiny, so max(key) is the latest time in the key
            for key in [k for k in memo if max(key) < cutoff]:
                del memo[key]

    def assemble_xi(self, t: int) -> np.ndarray:
        """The full nL x nL covariance matrix of the stacked compensated errors."""
        n, L = self.n, self.L
        out = np.zeros((n * L, n * L))
        for i in range(L):
            for j in range(L):
                out[i * n:(i + 1) * n, j * n:(j + 1) * n] = self.xi(i, j, t)
        out = sym(out)
        lam = float(np.linalg.eigvalsh(out)[0])
        tol = self.PSD_TOL * max(1.0, float(np.linalg.norm(out, 2)))
        if lam < -tol:
            raise DegenerateCovarianceError(
                f"assembled covariance at t={t} has eigenvalue {lam:.3e}"
            )
        return out

    def dump_csv(self, path, quantity: str = "xi") -> None:
        """Write one quantity's history as (t, i, j, block_row, block_col, value) rows."""
        stores = {"xi": self._xi, "gamma": self._gamma, "psi": self._psi}
        store = stores[quantity]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,i,j,block_row,block_col,value\n")
            for (i, j, t) in sorted(store, key=lambda k: (k[2], k[0], k[1])):
                M = store[(i, j, t)]
                for r in range(self.n):
                    for c in range(self.n):
                        fh.write(f"{t},{i},{j},{r},{c},{M[r, c]:.17g}\n")
