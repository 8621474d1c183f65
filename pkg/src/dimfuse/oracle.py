"""Brute-force validators for the analytic covariance engine.

Two independent routes to the same second moments:

* ExactMoments writes every estimator as an explicit linear combination of
  the elementary noise atoms (initial error, process noises, measurement
  noises) and evaluates covariances directly.  Quantities involving a single
  node's random selection history are averaged by enumerating that history;
  cross-node quantities factor over the independent per-node histories, so
  they only need the probability-averaged coefficients.
* simulate_replicas samples full trajectories (plant, filters, masks,
  compensated estimates) vectorized over replicas and returns empirical
  moment estimates with standard errors.

Neither route shares any recursion with the covariance engine.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import SelectionScheme
from .linalg import psd_sqrt, sym
from .local_filter import gain_update
from .models import SystemModel

ENUMERATION_CAP = 1_000_000


class EnumerationTooLarge(RuntimeError):
    """The per-node mask-history space exceeds the enumeration cap."""


@dataclass
class ExactMoments:
    """Exact error moments of the full estimation chain on a short horizon.

    All recorded quantities are dictionaries keyed by (i, j, t) or (i, t).
    """

    model: SystemModel
    schemes: list[SelectionScheme]
    delays: list[int]
    horizon: int
    P0: np.ndarray | None = None
    cap: int = ENUMERATION_CAP

    P: dict = field(default_factory=dict)
    gamma: dict = field(default_factory=dict)
    psi: dict = field(default_factory=dict)
    upsilon: dict = field(default_factory=dict)
    xi: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P0 = np.eye(self.model.n) if self.P0 is None else np.asarray(self.P0, float)
        self._compute()

    # Atom layout: [initial error (n)] [w_0 .. w_{T-1} (n each)] [v_{i,1..T} per node].
    def _atom_layout(self):
        n, T = self.model.n, self.horizon
        blocks = [("e0", self.P0)]
        for s in range(T):
            blocks.append((f"w{s}", self.model.Qw))
        for i, sensor in enumerate(self.model.sensors):
            for s in range(1, T + 1):
                blocks.append((f"v{i},{s}", sensor.Qv))
        offsets = {}
        pos = 0
        roots = []
        for name, cov in blocks:
            k = cov.shape[0]
            offsets[name] = slice(pos, pos + k)
            roots.append(psd_sqrt(cov))
            pos += k
        root = np.zeros((pos, pos))
        cur = 0
        for r in roots:
            k = r.shape[0]
            root[cur:cur + k, cur:cur + k] = r
            cur += k
        return offsets, root, pos

    def _compute(self):
        model = self.model
        n, L, T = model.n, model.L, self.horizon
        A = model.A
        offsets, root, adim = self._atom_layout()

        # deterministic filter gains, shared parameters of every estimator
        gains = []
        for i in range(L):
            Pii = self.P0.copy()
            seq = [None]
            for _ in range(T):
                g = gain_update(Pii, model, i)
                Pii = g.Pii
                seq.append(g)
            gains.append(seq)

        # plant and local-estimate coefficients (no masks involved)
        Cx = np.zeros((T + 1, n, adim))
        Cx[0][:, offsets["e0"]] = np.eye(n)
        for t in range(1, T + 1):
            Cx[t] = A @ Cx[t - 1]
            Cx[t][:, offsets[f"w{t - 1}"]] += np.eye(n)

        Cloe = np.zeros((L, T + 1, n, adim))
        for i in range(L):
            C = model.sensor(i).C
            for t in range(1, T + 1):
                g = gains[i][t]
                Cloe[i, t] = g.PhiK @ Cloe[i, t - 1] + g.K @ (C @ Cx[t])
                Cloe[i, t][:, offsets[f"v{i},{t}"]] += g.K

        err_loe = np.array([Cx - Cloe[i] for i in range(L)])

        # probability-averaged compensated-estimate coefficients
        cse_mean = np.zeros((L, T + 1, n, adim))
        for i in range(L):
            d = self.delays[i]
            Ad = np.linalg.matrix_power(A, d)
            Hbar = self.schemes[i].Hbar
            for t in range(1, T + 1):
                if t <= d:
                    cse_mean[i, t] = A @ cse_mean[i, t - 1]
                else:
                    sent = Hbar[:, None] * Cloe[i, t - d]
                    kept = (1.0 - Hbar)[:, None] * (A @ cse_mean[i, t - d - 1])
                    cse_mean[i, t] = Ad @ (sent + kept)
        err_cse_mean = np.array([Cx - cse_mean[i] for i in range(L)])

        # per-node mask-history enumeration for own-history quantities
        xi_diag = np.zeros((L, T + 1, n, n))
        for i in range(L):
            xi_diag[i] = self._enumerate_node(i, Cx, Cloe[i], root, offsets)

        def cov(c1, c2):
            s1 = c1 @ root
            s2 = c2 @ root
            return s1 @ s2.T

        for t in range(T + 1):
            for i in range(L):
                for j in range(L):
                    self.P[(i, j, t)] = cov(err_loe[i, t], err_loe[j, t])
                    self.gamma[(i, j, t)] = cov(err_loe[i, t], err_cse_mean[j, t])
                    if i == j:
                        self.xi[(i, j, t)] = xi_diag[i, t]
                    else:
                        self.xi[(i, j, t)] = cov(err_cse_mean[i, t], err_cse_mean[j, t])

        # lagged quantities; times <= 0 all carry the shared initial error
        for t in range(T + 1):
            for i in range(L):
                for j in range(L):
                    ti = max(t - self.delays[i], 0)
                    tj = max(t - self.delays[j] - 1, 0)
                    self.psi[(i, j, t)] = cov(err_loe[i, ti], err_cse_mean[j, tj])
                    ui = max(t - self.delays[i] - 1, 0)
                    uj = max(t - self.delays[j] - 1, 0)
                    if i == j:
                        self.upsilon[(i, j, t)] = xi_diag[i, ui]
                    else:
                        self.upsilon[(i, j, t)] = cov(err_cse_mean[i, ui],
                                                      err_cse_mean[j, uj])

    def _enumerate_node(self, i: int, Cx, Cloe_i, root, offsets) -> np.ndarray:
        """E{comp_err comp_err^T} for node i by enumerating its mask history."""
        model = self.model
        n, T = model.n, self.horizon
        A = model.A
        d = self.delays[i]
        scheme = self.schemes[i]
        Ad = np.linalg.matrix_power(A, d)
        n_steps = max(T - d, 0)
        count = scheme.delta ** n_steps
        if count > self.cap:
            raise EnumerationTooLarge(
                f"node {i}: {count} mask histories exceeds cap {self.cap}; "
                "use the Monte-Carlo mode"
            )

        # hist[h, m] = mask index used at mask time m+1
        hist = np.zeros((count, n_steps), dtype=int)
        weights = np.ones(count)
        for m in range(n_steps):
            reps = scheme.delta ** (n_steps - m - 1)
            tile = count // (reps * scheme.delta)
            col = np.tile(np.repeat(np.arange(scheme.delta), reps), tile)
            hist[:, m] = col
            weights *= scheme.probs[col]

        adim = Cx.shape[-1]
        out = np.zeros((T + 1, n, n))
        # ring of per-history coefficients at lags 0..d of the previous tick
        ring = [np.zeros((count, n, adim)) for _ in range(d + 1)]
        for t in range(T + 1):
            if t == 0:
                cur = np.zeros((count, n, adim))
            elif t <= d:
                cur = np.einsum("ab,hbd->had", A, ring[(t - 1) % (d + 1)])
            else:
                m = t - d  # mask time
                Dm = scheme.masks[hist[:, m - 1]]  # (count, n)
                old = ring[(t - d - 1) % (d + 1)]
                pred = np.einsum("ab,hbd->had", A, old)
                mixed = Dm[:, :, None] * Cloe_i[t - d][None] + (1.0 - Dm)[:, :, None] * pred
                cur = np.einsum("ab,hbd->had", Ad, mixed)
            err = Cx[t][None] - cur
            s = err @ root
            out[t] = np.einsum("h,hax,hbx->ab", weights, s, s)
            ring[t % (d + 1)] = cur
        return out

    def fused_cov(self, t: int) -> np.ndarray:
        """Fusion-error covariance from the oracle blocks via the optimal weights.

        Applies the same tiny ridge the engine uses when the stacked matrix is
        singular (identical start-up errors make it structurally so).
        """
        n, L = self.model.n, self.model.L
        Xi = np.zeros((n * L, n * L))
        for i in range(L):
            for j in range(L):
                Xi[i * n:(i + 1) * n, j * n:(j + 1) * n] = self.xi[(i, j, t)]
        Xi = sym(Xi)
        Ia = np.tile(np.eye(n), (L, 1))
        try:
            c = np.linalg.cholesky(Xi)
        except np.linalg.LinAlgError:
            c = np.linalg.cholesky(Xi + 1e-10 * np.eye(n * L))
        Y = np.linalg.solve(c.T, np.linalg.solve(c, Ia))
        return np.linalg.inv(Ia.T @ Y)


@dataclass
class ReplicaMoments:
    """Empirical moment estimates over replicas, with entrywise standard errors."""

    cse_cov: dict          # (i, j, t) -> (n, n) empirical E{err_i err_j^T}
    cse_cov_se: dict       # matching standard errors
    loe_cov: dict
    loe_cov_se: dict
    cross_cov: dict        # (i, j, t) -> E{local err_i compensated err_j^T}
    cross_cov_se: dict
    fused_cov: dict | None
    fused_cov_se: dict | None
    fused_mean: dict | None
    replicas: int


def simulate_replicas(model: SystemModel, schemes, delays, horizon: int,
                      replicas: int, seed: int = 0,
                      P0=None, weights=None, record=None) -> ReplicaMoments:
    """Monte-Carlo moments of the full chain, vectorized over replicas.

    weights, when given, maps t -> list of per-node fusion weight matrices and
    enables fused-error statistics.  record restricts the recorded ticks
    (default: every tick).
    """
    n, L, T = model.n, model.L, horizon
    A = model.A
    P0 = np.eye(n) if P0 is None else np.asarray(P0, float)
    record = set(range(T + 1)) if record is None else set(record)

    root = np.random.SeedSequence(seed)
    streams = root.spawn(2 * L + 2)
    rng_x0 = np.random.default_rng(streams[0])
    rng_w = np.random.default_rng(streams[1])
    rng_v = [np.random.default_rng(streams[2 + i]) for i in range(L)]
    rng_mask = [np.random.default_rng(streams[2 + L + i]) for i in range(L)]

    sqP0 = psd_sqrt(P0)
    sqQw = psd_sqrt(model.Qw)
    sqQv = [psd_sqrt(s.Qv) for s in model.sensors]

    gains = []
    for i in range(L):
        Pii = P0.copy()
        seq = [None]
        for _ in range(T):
            g = gain_update(Pii, model, i)
            Pii = g.Pii
            seq.append(g)
        gains.append(seq)

    Ads = [np.linalg.matrix_power(A, d) for d in delays]
    cum = [np.cumsum(s.probs) for s in schemes]

    x = rng_x0.standard_normal((replicas, n)) @ sqP0.T
    loe = [np.zeros((replicas, n)) for _ in range(L)]
    cse_hist = [[np.zeros((replicas, n)) for _ in range(delays[i] + 1)] for i in range(L)]
    cse = [np.zeros((replicas, n)) for _ in range(L)]
    loe_lag = [[np.zeros((replicas, n)) for _ in range(delays[i] + 1)] for i in range(L)]

    def outer_stats(ea, eb):
        prod = np.einsum("ra,rb->rab", ea, eb)
        mean = prod.mean(axis=0)
        se = prod.std(axis=0, ddof=1) / np.sqrt(replicas)
        return mean, se

    cse_cov, cse_cov_se = {}, {}
    loe_cov, loe_cov_se = {}, {}
    cross_cov, cross_cov_se = {}, {}
    fused_cov = {} if weights is not None else None
    fused_cov_se = {} if weights is not None else None
    fused_mean = {} if weights is not None else None

    def record_tick(t):
        errs_l = [x - loe[i] for i in range(L)]
        errs_c = [x - cse[i] for i in range(L)]
        for i in range(L):
            for j in range(L):
                m, se = outer_stats(errs_c[i], errs_c[j])
                cse_cov[(i, j, t)] = m
                cse_cov_se[(i, j, t)] = se
                m, se = outer_stats(errs_l[i], errs_l[j])
                loe_cov[(i, j, t)] = m
                loe_cov_se[(i, j, t)] = se
                m, se = outer_stats(errs_l[i], errs_c[j])
                cross_cov[(i, j, t)] = m
                cross_cov_se[(i, j, t)] = se
        if weights is not None:
            W = weights(t)
            ef = sum(e @ W[i].T for i, e in enumerate(errs_c))
            m, se = outer_stats(ef, ef)
            fused_cov[t] = m
            fused_cov_se[t] = se
            fused_mean[t] = (ef.mean(axis=0), ef.std(axis=0, ddof=1) / np.sqrt(replicas))

    if 0 in record:
        record_tick(0)

    for t in range(1, T + 1):
        w = rng_w.standard_normal((replicas, n)) @ sqQw.T
        x = x @ A.T + w
        for i in range(L):
            g = gains[i][t]
            sensor = model.sensor(i)
            v = rng_v[i].standard_normal((replicas, sensor.q)) @ sqQv[i].T
            y = x @ sensor.C.T + v
            loe[i] = loe[i] @ g.PhiK.T + y @ g.K.T
            loe_lag[i][t % (delays[i] + 1)] = loe[i]
        for i in range(L):
            d = delays[i]
            if t <= d:
                cse_new = cse[i] @ A.T
            else:
                u = rng_mask[i].random(replicas)
                idx = np.searchsorted(cum[i], u, side="right")
                idx = np.clip(idx, 0, schemes[i].delta - 1)
                D = schemes[i].masks[idx]
                sent = D * loe_lag[i][(t - d) % (d + 1)]
                kept = (1.0 - D) * (cse_hist[i][(t - d - 1) % (d + 1)] @ A.T)
                cse_new = (sent + kept) @ Ads[i].T
            cse_hist[i][t % (d + 1)] = cse_new
            cse[i] = cse_new
        if t in record:
            record_tick(t)

    return ReplicaMoments(cse_cov=cse_cov, cse_cov_se=cse_cov_se,
                          loe_cov=loe_cov, loe_cov_se=loe_cov_se,
                          cross_cov=cross_cov, cross_cov_se=cross_cov_se,
                          fused_cov=fused_cov, fused_cov_se=fused_cov_se,
                          fused_mean=fused_mean, replicas=replicas)
