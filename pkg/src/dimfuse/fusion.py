"""Runtime estimators: compensated estimates at the fusion center, the
recursive optimally-weighted fused estimate, and its steady-state form."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .channel import CompressedPacket, DelayedLink, SelectionScheme, make_packet, sample_mask
from .covariance import CovarianceLedger, DegenerateCovarianceError, lcm
from .linalg import psd_sqrt, sym
from .local_filter import DivergenceError, gain_update
from .models import SystemModel

log = logging.getLogger(__name__)

RIDGE = 1e-10


class ProtocolError(RuntimeError):
    """A packet arrived outside the timing contract."""


class FusionStateError(RuntimeError):
    """An operation ran before its prerequisites were computed."""


@dataclass
class CseState:
    """One node's compensated estimate and its short history ring."""

    node: int
    delay: int
    xc: np.ndarray
    t: int = 0
    _ring: list = field(default_factory=list)
    _Ad: np.ndarray | None = None

    def __post_init__(self):
        self.xc = np.asarray(self.xc, dtype=float).copy()
        if not self._ring:
            self._ring = [self.xc.copy() for _ in range(self.delay + 1)]

    def lagged(self, t: int) -> np.ndarray:
        """The compensated estimate at an earlier tick still inside the ring."""
        if t < 0:
            return self._ring[0]
        if not self.t - self.delay <= t <= self.t:
            raise FusionStateError(f"node {self.node}: time {t} left the history ring")
        return self._ring[t % (self.delay + 1)]

    def push(self, xc: np.ndarray, t: int) -> None:
        self.xc = xc
        self.t = t
        self._ring[t % (self.delay + 1)] = xc


def cse_step(state: CseState, delivered: CompressedPacket | None,
             model: SystemModel, scheme: SelectionScheme) -> CseState:
    """Advance one compensated estimate by a tick.

    Received components come from the packet; the rest are the one-step
    prediction of the estimate from delay+1 ticks ago; the combination is
    advanced by delay steps of the plant map.  Before the first packet can
    arrive the estimate is a pure prediction.
    """
    t = state.t + 1
    d = state.delay
    A = model.A
    if t <= d:
        if delivered is not None:
            raise ProtocolError(f"node {state.node}: unexpected packet at start-up tick {t}")
        xc = A @ state.xc
    else:
        if delivered is None:
            raise ProtocolError(f"node {state.node}: missing packet at tick {t}")
        if delivered.t_sent != t - d:
            raise ProtocolError(
                f"node {state.node}: packet sent at {delivered.t_sent}, expected {t - d}"
            )
        if state._Ad is None:
            state._Ad = np.linalg.matrix_power(A, d)
        maskvec = scheme.mask_diag(delivered.mask_index)
        sent = np.zeros(model.n)
        sent[scheme.selected_components(delivered.mask_index)] = delivered.values
        kept = (1.0 - maskvec) * (A @ state.lagged(t - d - 1))
        xc = state._Ad @ (sent + kept)
    state.push(xc, t)
    return state


@dataclass(frozen=True)
class FusionResult:
    weights: tuple[np.ndarray, ...]
    xhat: np.ndarray
    P: np.ndarray
    ridged: bool = False


def fusion_weights(Xi: np.ndarray, n: int, L: int,
                   allow_ridge: bool = True) -> tuple[list[np.ndarray], np.ndarray, bool]:
    """Optimal fusion weights and fused covariance from the stacked covariance.

    Weights solve the trace-minimal combination under the sum-to-identity
    constraint: [W_1 ... W_L] = (Ia' Xi^-1 Ia)^-1 Ia' Xi^-1.
    """
    Ia = np.tile(np.eye(n), (L, 1))
    Xi = sym(Xi)
    ridged = False
    try:
        c = np.linalg.cholesky(Xi)
        Y = np.linalg.solve(c.T, np.linalg.solve(c, Ia))
    except np.linalg.LinAlgError:
        if not allow_ridge:
            raise DegenerateCovarianceError("stacked covariance is not positive definite")
        ridged = True
        log.warning("stacked covariance not positive definite; adding %.0e ridge", RIDGE)
        Xi = Xi + RIDGE * np.eye(n * L)
        c = np.linalg.cholesky(Xi)
        Y = np.linalg.solve(c.T, np.linalg.solve(c, Ia))
    P = np.linalg.inv(Ia.T @ Y)
    Wrow = P @ Y.T
    weights = [Wrow[:, i * n:(i + 1) * n] for i in range(L)]
    return weights, sym(P), ridged


def fuse(cses: list[CseState], Xi: np.ndarray, allow_ridge: bool = True) -> FusionResult:
    """Combine the compensated estimates with the optimal weights for Xi."""
    L = len(cses)
    n = cses[0].xc.shape[0]
    weights, P, ridged = fusion_weights(Xi, n, L, allow_ridge=allow_ridge)
    xhat = sum(W @ c.xc for W, c in zip(weights, cses))
    return FusionResult(weights=tuple(weights), xhat=xhat, P=P, ridged=ridged)


@dataclass(frozen=True)
class SteadyFusion:
    """Converged fusion weights and covariances for the fixed-weight estimator."""

    weights: tuple[np.ndarray, ...]
    P: np.ndarray
    Xi: np.ndarray
    ticks: int


def compute_steady_weights(model: SystemModel, schemes, delays,
                           tol: float = 1e-9, max_iter: int = 100_000,
                           P0=None) -> SteadyFusion:
    """Iterate the covariance ledger (no measurements needed) to its limit.

    Convergence is detected by comparing the stacked covariance across one
    full lcm period of all the delay cycles.  Raises DivergenceError with the
    last residual when the limit is not reached within max_iter ticks.
    """
    n, L = model.n, model.L
    period = 1
    for d in delays:
        period = lcm(period, int(d) + 1)
    ledger = CovarianceLedger(model, schemes, delays, P0=P0)
    history: dict[int, np.ndarray] = {}
    residual = np.inf
    while ledger.t < max_iter:
        t = ledger.advance()
        history[t] = ledger.assemble_xi(t)
        if t - period in history:
            residual = float(np.linalg.norm(history[t] - history[t - period], 2))
            del history[t - period]
            if residual < tol:
                weights, P, _ = fusion_weights(history[t], n, L, allow_ridge=False)
                return SteadyFusion(weights=tuple(weights), P=P, Xi=history[t],
                                    ticks=t)
        history.pop(t - period - 1, None)
    raise DivergenceError(
        f"steady fusion not reached in {max_iter} ticks (last residual {residual:.3e}); "
        "check the mean-square stability conditions for each node"
    )


@dataclass
class Trace:
    """Per-tick record of one simulated run."""

    times: np.ndarray
    x: np.ndarray              # (T+1, n) plant state
    xhat: np.ndarray           # (T+1, n) fused estimate
    xhat_steady: np.ndarray | None
    trace_P: np.ndarray        # (T+1,) analytic fused covariance trace
    sq_err: np.ndarray         # (T+1,) empirical squared fusion error
    trace_xi: np.ndarray       # (T+1, L) per-node compensated covariance traces
    weight_norms: np.ndarray   # (T+1, L)
    cse: np.ndarray            # (T+1, L, n)

    def write_csv(self, path) -> None:
        T1, n = self.x.shape
        L = self.trace_xi.shape[1]
        cols = ["t", "comp", "x", "xhat_dkfe"]
        if self.xhat_steady is not None:
            cols.append("xhat_sdkfe")
        cols += ["tracP"] + [f"tracXi_{i + 1}" for i in range(L)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for t in range(T1):
                for c in range(n):
                    row = [str(t), str(c + 1), f"{self.x[t, c]:.17g}",
                           f"{self.xhat[t, c]:.17g}"]
                    if self.xhat_steady is not None:
                        row.append(f"{self.xhat_steady[t, c]:.17g}")
                    row.append(f"{self.trace_P[t]:.17g}")
                    row += [f"{self.trace_xi[t, i]:.17g}" for i in range(L)]
                    fh.write(",".join(row) + "\n")


class _FilterRunner:
    """Minimal in-loop Kalman recursion; same update as kalman_step."""

    __slots__ = ("node", "xhat", "P", "model")

    def __init__(self, model: SystemModel, node: int, x0, P0):
        self.model = model
        self.node = node
        self.xhat = np.asarray(x0, dtype=float).copy()
        self.P = np.asarray(P0, dtype=float).copy()

    def step(self, y: np.ndarray) -> np.ndarray:
        g = gain_update(self.P, self.model, self.node)
        self.xhat = g.PhiK @ self.xhat + g.K @ y
        self.P = g.Pii
        return self.xhat


def _streams(seed: int, L: int):
    children = np.random.SeedSequence(seed).spawn(2 * L + 2)
    rng_x0 = np.random.default_rng(children[0])
    rng_w = np.random.default_rng(children[1])
    rng_v = [np.random.default_rng(children[2 + i]) for i in range(L)]
    rng_mask = [np.random.default_rng(children[2 + L + i]) for i in range(L)]
    return rng_x0, rng_w, rng_v, rng_mask


def run_dkfe(model: SystemModel, schemes, delays, horizon: int, seed: int = 0,
             x0_mean=None, P0=None, steady: SteadyFusion | None = None,
             link_modes=None, raw_delay_fn=None) -> Trace:
    """Simulate the full chain with per-tick optimal weights.

    The ledger advances alongside the simulation; when `steady` is given the
    fixed-weight estimate is computed in the same pass from the same
    compensated estimates, so the two estimators see identical inputs.
    """
    n, L = model.n, model.L
    x0_mean = np.zeros(n) if x0_mean is None else np.asarray(x0_mean, dtype=float)
    P0 = np.eye(n) if P0 is None else np.asarray(P0, dtype=float)
    rng_x0, rng_w, rng_v, rng_mask = _streams(seed, L)
    sqP0 = psd_sqrt(P0)
    sqQw = psd_sqrt(model.Qw)
    sqQv = [psd_sqrt(s.Qv) for s in model.sensors]

    links = []
    for i in range(L):
        mode = "constant" if link_modes is None else link_modes[i]
        if mode == "bounded":
            links.append(DelayedLink(node=i, mode="bounded", bound=int(delays[i])))
        else:
            links.append(DelayedLink(node=i, delay=int(delays[i])))

    filters = [_FilterRunner(model, i, x0_mean, P0) for i in range(L)]
    cses = [CseState(node=i, delay=int(delays[i]), xc=x0_mean) for i in range(L)]
    ledger = CovarianceLedger(model, schemes, delays, P0=P0)

    T = horizon
    times = np.arange(T + 1)
    xs = np.zeros((T + 1, n))
    xh = np.zeros((T + 1, n))
    xh_s = np.zeros((T + 1, n)) if steady is not None else None
    trP = np.zeros(T + 1)
    sqe = np.zeros(T + 1)
    trXi = np.zeros((T + 1, L))
    wn = np.zeros((T + 1, L))
    cse_rec = np.zeros((T + 1, L, n))

    x = x0_mean + sqP0 @ rng_x0.standard_normal(n)
    xs[0] = x
    xh[0] = x0_mean
    if xh_s is not None:
        xh_s[0] = x0_mean
    trP[0] = float(np.trace(ledger.assemble_xi(0)[:n, :n]))  # all blocks equal P0 at t=0
    trXi[0] = [float(np.trace(ledger.xi(i, i, 0))) for i in range(L)]
    cse_rec[0] = x0_mean

    for t in range(1, T + 1):
        w = sqQw @ rng_w.standard_normal(n)
        x = model.A @ x + w
        xs[t] = x
        delivered: list[CompressedPacket | None] = [None] * L
        for i in range(L):
            sensor = model.sensor(i)
            y = sensor.C @ x + sqQv[i] @ rng_v[i].standard_normal(sensor.q)
            filters[i].step(y)
            h = sample_mask(schemes[i], rng_mask[i])
            pkt = make_packet(schemes[i], h, filters[i].xhat, t)
            raw = None if raw_delay_fn is None else raw_delay_fn(i, t)
            delivered[i] = links[i].send_and_deliver(pkt, t, raw_delay=raw)
        for i in range(L):
            cse_step(cses[i], delivered[i], model, schemes[i])
            cse_rec[t, i] = cses[i].xc
        ledger.advance()
        res = fuse(cses, ledger.assemble_xi(t))
        xh[t] = res.xhat
        trP[t] = float(np.trace(res.P))
        sqe[t] = float(np.sum((x - res.xhat) ** 2))
        trXi[t] = [float(np.trace(ledger.xi(i, i, t))) for i in range(L)]
        wn[t] = [float(np.linalg.norm(W, 2)) for W in res.weights]
        if xh_s is not None:
            xh_s[t] = sum(W @ c.xc for W, c in zip(steady.weights, cses))

    return Trace(times=times, x=xs, xhat=xh, xhat_steady=xh_s, trace_P=trP,
                 sq_err=sqe, trace_xi=trXi, weight_norms=wn, cse=cse_rec)


def run_sdkfe(model: SystemModel, schemes, delays, horizon: int,
              steady: SteadyFusion | None, seed: int = 0,
              x0_mean=None, P0=None) -> Trace:
    """Simulate with fixed steady weights and no ledger updates.

    This is the low-cost runtime mode: per tick, only the local filters, the
    compensated estimates, and one weighted sum are evaluated.
    """
    if steady is None:
        raise FusionStateError("steady weights must be computed before the fixed-weight run")
    n, L = model.n, model.L
    x0_mean = np.zeros(n) if x0_mean is None else np.asarray(x0_mean, dtype=float)
    P0 = np.eye(n) if P0 is None else np.asarray(P0, dtype=float)
    rng_x0, rng_w, rng_v, rng_mask = _streams(seed, L)
    sqP0 = psd_sqrt(P0)
    sqQw = psd_sqrt(model.Qw)
    sqQv = [psd_sqrt(s.Qv) for s in model.sensors]
    links = [DelayedLink(node=i, delay=int(delays[i])) for i in range(L)]
    filters = [_FilterRunner(model, i, x0_mean, P0) for i in range(L)]
    cses = [CseState(node=i, delay=int(delays[i]), xc=x0_mean) for i in range(L)]

    T = horizon
    xs = np.zeros((T + 1, n))
    xh = np.zeros((T + 1, n))
    sqe = np.zeros(T + 1)
    cse_rec = np.zeros((T + 1, L, n))
    x = x0_mean + sqP0 @ rng_x0.standard_normal(n)
    xs[0] = x
    xh[0] = x0_mean
    cse_rec[0] = x0_mean
    trP = np.full(T + 1, float(np.trace(steady.P)))

    for t in range(1, T + 1):
        w = sqQw @ rng_w.standard_normal(n)
        x = model.A @ x + w
        xs[t] = x
        for i in range(L):
            sensor = model.sensor(i)
            y = sensor.C @ x + sqQv[i] @ rng_v[i].standard_normal(sensor.q)
            filters[i].step(y)
            h = sample_mask(schemes[i], rng_mask[i])
            pkt = make_packet(schemes[i], h, filters[i].xhat, t)
            delivered = links[i].send_and_deliver(pkt, t)
            cse_step(cses[i], delivered, model, schemes[i])
            cse_rec[t, i] = cses[i].xc
        xh[t] = sum(W @ c.xc for W, c in zip(steady.weights, cses))
        sqe[t] = float(np.sum((x - xh[t]) ** 2))

    L_arr = np.zeros((T + 1, L))
    return Trace(times=np.arange(T + 1), x=xs, xhat=xh, xhat_steady=None,
                 trace_P=trP, sq_err=sqe, trace_xi=L_arr, weight_norms=L_arr.copy(),
                 cse=cse_rec)


def export_weights(path, steady: SteadyFusion) -> None:
    """Plain-text bundle of the steady weights and fused covariance."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"matrices {len(steady.weights) + 1}\n")
        for i, W in enumerate(steady.weights):
            _write_matrix(fh, f"W{i + 1}", W)
        _write_matrix(fh, "P", steady.P)


def load_weights(path) -> tuple[list[np.ndarray], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        count = int(header[1])
        mats = {}
        for _ in range(count):
            name, rows, cols = fh.readline().split()
            rows, cols = int(rows), int(cols)
            data = [list(map(float, fh.readline().split())) for _ in range(rows)]
            mats[name] = np.array(data)
    weights = [mats[f"W{i + 1}"] for i in range(count - 1)]
    return weights, mats["P"]


def _write_matrix(fh, name: str, M: np.ndarray) -> None:
    fh.write(f"{name} {M.shape[0]} {M.shape[1]}\n")
    for row in M:
        fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
