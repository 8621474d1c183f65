import numpy as np
import pytest

from conftest import random_toy_model
from dimfuse.channel import build_scheme
from dimfuse.covariance import (CovarianceLedger, hadamard, lcm, min_cycles,
                                odot, unroll_depth)
from dimfuse.fusion import fusion_weights
from dimfuse.models import SensorModel, SystemModel
from dimfuse.oracle import ExactMoments


def toy_two_node(delays, seed=7, n=2):
    rng = np.random.default_rng(seed)
    model = random_toy_model(rng, n=n, L=2, stable=False)
    schemes = [build_scheme(n, 1, rng.dirichlet(np.ones(n)), node=i)
               for i in range(2)]
    return model, schemes, list(delays)


# -- entrywise and diagonal-outer products ----------------------------------

def test_odot_identity_pair():
    assert np.array_equal(odot(np.eye(2), np.eye(2)), np.ones((2, 2)))


def test_odot_unit_pattern():
    out = odot(np.diag([1.0, 0.0]), np.diag([0.0, 1.0]))
    assert np.array_equal(out, [[0.0, 1.0], [0.0, 0.0]])


def test_odot_rejects_nondiagonal():
    with pytest.raises(ValueError):
        odot(np.ones((2, 2)), np.eye(2))


def test_hadamard_shape_check():
    with pytest.raises(ValueError):
        hadamard(np.eye(2), np.eye(3))


def test_diagonal_factorization_identity_monte_carlo():
    """E{U G B} = E{U odot B} (entrywise) E{G} for independent diagonals."""
    rng = np.random.default_rng(3)
    n, N = 3, 200_000
    u = rng.random(n) < 0.4
    pb = 0.7
    U = (rng.random((N, n)) < 0.4).astype(float)
    B = (rng.random((N, n)) < pb).astype(float)
    G = rng.normal(loc=1.0, size=(N, n, n))
    prod = np.einsum("hk,hkl,hl->kl", U, G, B) / N
    expect = hadamard(odot(np.full(n, 0.4), np.full(n, pb)), np.ones((n, n)))
    dev = np.abs(prod - expect)
    assert np.max(dev) < 3.5 * 1.5 / np.sqrt(N) * 3  # crude 3-sigma envelope


# -- iteration helpers --------------------------------------------------------

def test_lcm_periods():
    assert lcm(2, 3) == 6
    assert lcm(1, 5) == 5


def test_min_cycles_small_cases():
    assert min_cycles(0, 2) == 1
    assert min_cycles(1, 2) == 1   # d_i <= d_j + 1
    assert min_cycles(3, 0) == 3
    assert min_cycles(5, 1) == 3


def test_unroll_depth():
    assert unroll_depth(1, 5, 5) == 0
    assert unroll_depth(1, 5, 2) == 2
    assert unroll_depth(0, 4, 0) == 4


# -- kernel identities ---------------------------------------------------------

@pytest.fixture()
def warm_ledger():
    model, schemes, delays = toy_two_node([1, 2], seed=11)
    ledger = CovarianceLedger(model, schemes, delays, P0=np.eye(2))
    ledger.advance_to(10)
    return ledger


def test_phi_w_same_time_is_zero(warm_ledger):
    for t in range(1, 9):
        assert np.array_equal(warm_ledger.phi_w(0, t, t), np.zeros((2, 2)))


def test_phi_x_same_time_is_P(warm_ledger):
    for t in range(1, 9):
        assert np.allclose(warm_ledger.phi_x(0, 0, t, t), warm_ledger.P(0, 0, t))


def test_phi_x_transpose_symmetry(warm_ledger):
    a = warm_ledger.phi_x(0, 1, 3, 6)
    b = warm_ledger.phi_x(1, 0, 6, 3)
    assert np.allclose(a, b.T)


def test_empty_range_conventions(warm_ledger):
    # reversed index ranges: empty product is identity, empty sum is zero
    assert np.allclose(warm_ledger._prod_phi(0, 3, 5), np.eye(2))
    assert np.array_equal(warm_ledger.phi_F(0, 5, 0, 5), np.zeros((2, 2)))
    assert np.array_equal(warm_ledger.theta_F(0, 5, 0, 5), np.zeros((2, 2)))


def test_theta_gate_future_noise(warm_ledger):
    # compensated error carries no noise at or after its own time
    for t2 in range(5, 9):
        assert np.array_equal(warm_ledger.theta_w(0, 5, t2), np.zeros((2, 2)))


def test_theta_nonzero_inside_accumulation_window():
    model, schemes, _ = toy_two_node([2, 2], seed=13)
    ledger = CovarianceLedger(model, schemes, [2, 2], P0=np.eye(2))
    ledger.advance_to(10)
    # the accumulated-noise tail reaches back to w(t1 - 1)
    assert np.max(np.abs(ledger.theta_w(0, 8, 7))) > 1e-12


def test_theta_closed_form_matches_recursion():
    model, schemes, delays = toy_two_node([1, 2], seed=17)
    ledger = CovarianceLedger(model, schemes, delays, P0=np.eye(2))
    ledger.advance_to(14)
    for i, d in [(0, 1), (1, 2)]:
        for t1 in range(3 * (d + 1) + 1, 15):
            for t2 in range(0, t1):
                try:
                    closed = ledger.theta_w_closed(i, t1, t2)
                except Exception:
                    continue
                rec = ledger.theta_w(i, t1, t2)
                assert np.max(np.abs(closed - rec)) < 1e-12, (i, t1, t2)


def test_noise_expansion_oracle_single_node():
    """All four local kernels against direct coefficient expansion, horizon 6."""
    rng = np.random.default_rng(23)
    model = random_toy_model(rng, n=2, L=1, stable=False)
    scheme = build_scheme(2, 1, [0.4, 0.6])
    P0 = np.array([[1.0, 0.3], [0.3, 2.0]])
    T = 6
    ledger = CovarianceLedger(model, [scheme], [1], P0=P0)
    ledger.advance_to(T)

    # independent expansion of the local error over the noise atoms
    n = 2
    from dimfuse.local_filter import gain_update
    atoms = {"e0": P0}
    for s in range(T):
        atoms[f"w{s}"] = model.Qw
    atoms["v"] = None  # placeholder; v-atoms tracked per time below
    dims = [("e0", n, P0)] + [(f"w{s}", n, model.Qw) for s in range(T)] \
        + [(f"v{s}", 1, model.sensor(0).Qv) for s in range(1, T + 1)]
    offs, pos = {}, 0
    for name, k, _ in dims:
        offs[name] = slice(pos, pos + k)
        pos += k
    Q = np.zeros((pos, pos))
    for name, k, cov in dims:
        Q[offs[name], offs[name]] = cov
    Cx = {0: np.zeros((n, pos))}
    Cx[0][:, offs["e0"]] = np.eye(n)
    Cl = {0: np.zeros((n, pos))}
    P = P0.copy()
    gains = {}
    for t in range(1, T + 1):
        g = gain_update(P, model, 0)
        P = g.Pii
        gains[t] = g
        Cx[t] = model.A @ Cx[t - 1]
        Cx[t][:, offs[f"w{t-1}"]] += np.eye(n)
        Cl[t] = g.PhiK @ Cl[t - 1] + g.K @ (model.sensor(0).C @ Cx[t])
        Cl[t][:, offs[f"v{t}"]] += g.K
    err = {t: Cx[t] - Cl[t] for t in range(T + 1)}
    wcoef = {}
    for s in range(T):
        wc = np.zeros((n, pos))
        wc[:, offs[f"w{s}"]] = np.eye(n)
        wcoef[s] = wc

    def cov(a, b):
        return a @ Q @ b.T

    def F_coef(g, t):
        out = np.zeros((n, pos))
        for th in range(1, g + 1):
            if t - th >= 0:
                out += np.linalg.matrix_power(model.A, th - 1) @ wcoef[t - th]
        return out

    for t1 in range(1, T + 1):
        for t2 in range(0, T):
            assert np.max(np.abs(ledger.phi_w(0, t1, t2)
                                 - cov(err[t1], wcoef[t2]))) < 1e-10
        for t2 in range(0, t1 + 1):
            assert np.max(np.abs(ledger.phi_x(0, 0, t1, t2)
                                 - cov(err[t1], err[t2]))) < 1e-10
        for g in (1, 2):
            for t2 in range(2, T + 1):
                assert np.max(np.abs(ledger.phi_F(0, t1, g, t2)
                                     - cov(err[t1], F_coef(g, t2)))) < 1e-10
            for t2 in range(0, T):
                assert np.max(np.abs(ledger.phi_wF(g, t1, t2)
                                     - cov(F_coef(g, t1), wcoef[t2]))) < 1e-12


# -- recursion steps against their closed forms and limits ---------------------

def test_gamma_no_compression_no_delay_equals_P():
    rng = np.random.default_rng(29)
    model = random_toy_model(rng, n=2, L=2, stable=False)
    full = build_scheme(2, 2, [1.0], node=0, allow_full=True)
    schemes = [full, build_scheme(2, 2, [1.0], node=1, allow_full=True)]
    ledger = CovarianceLedger(model, schemes, [0, 0], P0=np.eye(2))
    ledger.advance_to(8)
    for t in range(1, 9):
        for i in range(2):
            for j in range(2):
                assert np.max(np.abs(ledger.gamma(i, j, t)
                                     - ledger.P(i, j, t))) < 1e-12
                assert np.max(np.abs(ledger.xi(i, j, t)
                                     - ledger.P(i, j, t))) < 1e-12


def test_psi_diag_closed_form(warm_ledger):
    led = warm_ledger
    for t in range(3, 10):
        expected = led._flt(0, t - 1).PhiK @ led.gamma(0, 0, t - 2)
        assert np.allclose(led.psi_stored(0, 0, t), expected)


def test_psi_short_own_delay_reduction():
    # d_i <= d_j + 1 collapses the cycle sum to a pure product prefix
    model, schemes, _ = toy_two_node([1, 2], seed=31)
    ledger = CovarianceLedger(model, schemes, [1, 2], P0=np.eye(2))
    ledger.advance_to(12)
    i, j, t = 0, 1, 10
    d_i, d_j = 1, 2
    expected = ledger._prod_phi(i, t - d_i, t - d_j) @ ledger.gamma(i, j, t - d_j - 1)
    assert np.allclose(ledger.psi_stored(i, j, t), expected)


def test_psi_deep_delay_matches_general_kernel():
    model, schemes, _ = toy_two_node([3, 0], seed=37)
    ledger = CovarianceLedger(model, schemes, [3, 0], P0=np.eye(2))
    ledger.advance_to(12)
    assert min_cycles(3, 0) == 3
    for t in range(4, 13):
        direct = ledger.gamma2(0, 1, t - 3, t - 1)
        assert np.allclose(ledger.psi_stored(0, 1, t), direct, atol=1e-12)


def test_upsilon_equal_delays_collapse():
    model, schemes, _ = toy_two_node([2, 2], seed=41)
    ledger = CovarianceLedger(model, schemes, [2, 2], P0=np.eye(2))
    ledger.advance_to(10)
    for t in range(3, 11):
        up, up_hat = ledger.upsilon_step(0, 1, t)
        assert np.allclose(up, ledger.xi(0, 1, t - 3))
        assert np.allclose(up_hat, 0.0)


def test_upsilon_lifting_shapes():
    model, schemes, _ = toy_two_node([1, 2], seed=43)
    ledger = CovarianceLedger(model, schemes, [1, 2], P0=np.eye(2))
    ledger.advance_to(8)
    assert ledger.pair_tau(0, 1) == 6
    assert ledger.pair_tau_d(0, 1) == 3
    assert ledger.pair_tau_d(1, 0) == 2
    sigma = ledger._stack_sigma_for(0, 1)
    assert sigma.shape == (2, 3 * 2 * 2)   # three groups of tau_d - 1 = 2 blocks
    ux = ledger._upsilon_x(0, 1, 8)
    assert ux.shape == (3 * 2 * 2, 3 * 1 * 2)


def test_upsilon_startup_dependency_error():
    model, schemes, _ = toy_two_node([1, 2], seed=47)
    ledger = CovarianceLedger(model, schemes, [1, 2], P0=np.eye(2))
    ledger.advance_to(5)
    from dimfuse.covariance import DependencyError
    with pytest.raises(DependencyError):
        ledger.upsilon_step(0, 1, 5)


def test_xi_degenerate_no_compression_no_delay():
    rng = np.random.default_rng(53)
    model = random_toy_model(rng, n=3, L=2, stable=False)
    schemes = [build_scheme(3, 3, [1.0], node=i, allow_full=True) for i in range(2)]
    ledger = CovarianceLedger(model, schemes, [0, 0], P0=np.eye(3))
    ledger.advance_to(6)
    for t in range(1, 7):
        assert np.max(np.abs(ledger.xi(0, 0, t) - ledger.P(0, 0, t))) < 1e-12
        assert np.max(np.abs(ledger.xi(0, 1, t) - ledger.P(0, 1, t))) < 1e-12


def test_xi_exchangeable_configuration_symmetric():
    model = SystemModel(A=[[0.95, 0.2], [-0.1, 0.8]], Qw=[[0.4, 0.1], [0.1, 0.3]],
                        sensors=(SensorModel(C=[[1.0, 0.5]], Qv=[[0.6]], id=0),
                                 SensorModel(C=[[1.0, 0.5]], Qv=[[0.6]], id=1)))
    scheme = build_scheme(2, 1, [0.5, 0.5])
    ledger = CovarianceLedger(model, [scheme, scheme], [1, 1], P0=np.eye(2))
    ledger.advance_to(10)
    for t in range(1, 11):
        X = ledger.xi(0, 1, t)
        assert np.max(np.abs(X - X.T)) < 1e-12


def test_assemble_xi_psd_random_toys():
    for seed in range(5):
        model, schemes, delays = toy_two_node([seed % 3, (seed + 1) % 3],
                                              seed=100 + seed)
        ledger = CovarianceLedger(model, schemes, delays, P0=np.eye(2))
        ledger.advance_to(9)
        for t in range(1, 10):
            X = ledger.assemble_xi(t)
            assert np.min(np.linalg.eigvalsh(X)) >= -1e-8


def test_single_node_assemble_is_diag_block():
    rng = np.random.default_rng(61)
    model = random_toy_model(rng, n=2, L=1)
    scheme = build_scheme(2, 1, [0.3, 0.7])
    ledger = CovarianceLedger(model, [scheme], [1], P0=np.eye(2))
    ledger.advance_to(5)
    assert np.array_equal(ledger.assemble_xi(5), ledger.xi(0, 0, 5))


def test_trace_inequality_fused_vs_each_node():
    model, schemes, delays = toy_two_node([1, 2], seed=67)
    ledger = CovarianceLedger(model, schemes, delays, P0=np.eye(2))
    for t in range(1, 25):
        ledger.advance()
        _, P, _ = fusion_weights(ledger.assemble_xi(t), 2, 2)
        for i in range(2):
            assert np.trace(P) <= np.trace(ledger.xi(i, i, t)) + 1e-9


# -- full equivalence against the brute-force oracles ---------------------------

@pytest.mark.parametrize("delays", [(0, 0), (1, 0), (1, 2), (2, 2), (0, 2)])
def test_ledger_matches_enumeration_oracle(delays):
    model, schemes, _ = toy_two_node(delays, seed=200 + sum(delays))
    P0 = np.array([[1.0, 0.2], [0.2, 1.5]])
    T = 8
    ledger = CovarianceLedger(model, schemes, list(delays), P0=P0)
    ledger.advance_to(T)
    orc = ExactMoments(model, schemes, list(delays), horizon=T, P0=P0)
    for (i, j, t), val in orc.xi.items():
        assert np.max(np.abs(ledger.xi(i, j, t) - val)) < 1e-9, ("Xi", i, j, t)
    for (i, j, t), val in orc.gamma.items():
        assert np.max(np.abs(ledger.gamma(i, j, t) - val)) < 1e-9
    for (i, j, t), val in orc.psi.items():
        if t >= 1:
            assert np.max(np.abs(ledger.psi_stored(i, j, t) - val)) < 1e-9


def test_gamma_matches_monte_carlo():
    """Local-versus-compensated cross moments against sampled trajectories."""
    from dimfuse.oracle import simulate_replicas
    model, schemes, delays = toy_two_node([1, 2], seed=83)
    T = 6
    ledger = CovarianceLedger(model, schemes, delays, P0=np.eye(2))
    ledger.advance_to(T)
    mc = simulate_replicas(model, schemes, delays, horizon=T, replicas=100_000,
                           seed=29, P0=np.eye(2))
    for (i, j, t), est in mc.cross_cov.items():
        if t == 0:
            continue
        se = np.maximum(mc.cross_cov_se[(i, j, t)], 1e-12)
        assert np.all(np.abs(est - ledger.gamma(i, j, t)) <= 3.5 * se), (i, j, t)


def test_orthogonality_and_unbiasedness_monte_carlo():
    """Sampled errors stay mean zero and uncorrelated with noises that enter
    at or after their own time; compensated errors likewise from one tick on."""
    from dimfuse.linalg import psd_sqrt
    from dimfuse.local_filter import gain_update

    model, schemes, delays = toy_two_node([1, 2], seed=71)
    T, R = 6, 120_000
    n = model.n
    rng = np.random.default_rng(123)
    sqQw = psd_sqrt(model.Qw)
    sqQv = psd_sqrt(model.sensor(0).Qv)
    x = rng.standard_normal((R, n))
    loe = np.zeros((R, n))
    cse = np.zeros((R, n))
    cse_hist = [np.zeros((R, n)) for _ in range(delays[0] + 1)]
    loe_hist = [np.zeros((R, n)) for _ in range(delays[0] + 1)]
    cum = np.cumsum(schemes[0].probs)
    P = np.eye(n)
    d = delays[0]
    w_current = np.zeros((R, n))
    for t in range(1, T + 1):
        g = gain_update(P, model, 0)
        P = g.Pii
        w_current = rng.standard_normal((R, n)) @ sqQw.T
        x = x @ model.A.T + w_current
        y = x @ model.sensor(0).C.T \
            + rng.standard_normal((R, 1)) @ sqQv.T
        loe = loe @ g.PhiK.T + y @ g.K.T
        loe_hist[t % (d + 1)] = loe
        if t <= d:
            cse = cse @ model.A.T
        else:
            idx = np.searchsorted(cum, rng.random(R), side="right")
            D = schemes[0].masks[np.clip(idx, 0, schemes[0].delta - 1)]
            pred = cse_hist[(t - d - 1) % (d + 1)] @ model.A.T
            cse = (D * loe_hist[(t - d) % (d + 1)] + (1.0 - D) * pred) \
                @ np.linalg.matrix_power(model.A, d).T
        cse_hist[t % (d + 1)] = cse

        for err in (x - loe, x - cse):
            mean = err.mean(axis=0)
            se = err.std(axis=0, ddof=1) / np.sqrt(R)
            assert np.all(np.abs(mean) <= 4.0 * se)
    # both errors at time T are uncorrelated with noise entering at T+1
    w_future = rng.standard_normal((R, n)) @ sqQw.T
    for err in (x - loe, x - cse):
        prod = np.einsum("ra,rb->rab", err, w_future)
        assert np.all(np.abs(prod.mean(axis=0))
                      <= 3.5 * prod.std(axis=0, ddof=1) / np.sqrt(R))
    # contrast: the correlation with the noise that entered at tick T is the
    # analytic one-step kernel GK(T) Qw, not zero
    prod = np.einsum("ra,rb->rab", x - loe, w_current)
    se = prod.std(axis=0, ddof=1) / np.sqrt(R)
    assert np.all(np.abs(prod.mean(axis=0) - g.GK @ model.Qw) <= 3.5 * se)
    assert np.max(np.abs(g.GK @ model.Qw)) > 10 * np.max(se)


def test_ledger_dump_csv(tmp_path):
    model, schemes, delays = toy_two_node([1, 1], seed=73)
    ledger = CovarianceLedger(model, schemes, delays, P0=np.eye(2))
    ledger.advance_to(4)
    path = tmp_path / "xi.csv"
    ledger.dump_csv(path, "xi")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,i,j,block_row,block_col,value"
    # 4 pairs x 4 entries x 5 times (0..4)
    assert len(lines) == 1 + 4 * 4 * 5


def test_memoization_pruning_keeps_long_runs_bounded():
    model, schemes, delays = toy_two_node([1, 2], seed=79)
    ledger = CovarianceLedger(model, schemes, delays, P0=np.eye(2))
    ledger.advance_to(400)
    assert len(ledger._memo_phi_w) < 4000
    assert len(ledger._P) < 1500
    # pruned history raises a dependency error rather than silently recomputing
    from dimfuse.covariance import DependencyError
    with pytest.raises(DependencyError):
        ledger.P(0, 0, 5)
