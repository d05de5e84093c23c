import math

import numpy as np
import pytest

from conftest import fd_grad, rel_err
from dfcm import estimate as est
from dfcm.blockcorr import BlockSpec, block_of_eta, eta_of_block
from dfcm.convt import ConvTSpec, loglik, sample
from dfcm.exceptions import FilterDivergenceError, SpecError
from dfcm.loadings import rho_of_tau, tau_of_rho
from dfcm.matcorr import gamma_of_corr, random_corr, sym_sqrt
from dfcm.scoredriven import (
    ScoreParams,
    corr_path,
    corr_score,
    equicorr_information_ht,
    equicorr_information_mt,
    equicorr_score_ht,
    equicorr_score_mt,
    filter_core_joint,
    filter_corr,
    filter_equicorr_ht,
    filter_equicorr_mt,
    filter_factor_corr,
    filter_loading_decoupled,
    filter_sector_block,
    joint_score,
    loading_score,
    scaled_innovation,
)

STRUCT_CASES = [
    (BlockSpec((1, 1, 1, 1), structure="unrestricted"), ConvTSpec.mt(4, 7.0)),
    (BlockSpec((2, 3), structure="fbc"), ConvTSpec.ct((2, 3), (5.0, 9.0))),
    (BlockSpec((2, 1, 2), (0, 0, 1), "sbc"), ConvTSpec.ht((5.0, 6.0, 7.0, 8.0, 9.0))),
    (BlockSpec((3, 2), structure="dbc"), ConvTSpec.gauss(5)),
]


def dense_ll(x, eta, spec, dist):
    return loglik(x, np.zeros(spec.n), sym_sqrt(block_of_eta(eta, spec)), dist)


def joint_dense_ll(z, u, tau, eta, spec, dist):
    rho = np.vstack([rho_of_tau(t) for t in tau])
    om = np.sqrt(1 - np.sum(rho**2, 1))
    Xi = om[:, None] * sym_sqrt(block_of_eta(eta, spec))
    return loglik(z, rho @ u, Xi, dist)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------
def test_score_params():
    p = ScoreParams([0.5, -0.2], 0.9, 0.05)
    assert np.allclose(p.kappa, [0.05, -0.02])
    with pytest.raises(SpecError):
        ScoreParams([0.0], 1.0, 0.1)
    with pytest.raises(SpecError):
        ScoreParams([0.0], 0.5, -0.1)
    with pytest.raises(SpecError):
        ScoreParams([0.0], 0.5, 0.1, lam=[-1.0])
    with pytest.raises(SpecError):
        ScoreParams([0.0], 0.5, 0.1, scaling="newton")


# ---------------------------------------------------------------------------
# correlation score
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("spec,dist", STRUCT_CASES, ids=lambda v: getattr(v, "structure", None) or v.kind)
def test_corr_score_fd(spec, dist, rng):
    for _ in range(20):
        eta = rng.uniform(-0.3, 0.3, spec.n_eta)
        x = sample(dist, np.zeros(spec.n), sym_sqrt(block_of_eta(eta, spec)), 1, rng)[0]
        ll, g, _ = corr_score(x, eta, spec, dist)
        assert ll == pytest.approx(dense_ll(x, eta, spec, dist), abs=1e-10)
        assert rel_err(g, fd_grad(lambda e: dense_ll(x, e, spec, dist), eta)) < 1e-5


def test_corr_score_information_and_zero_mean():
    spec, dist = STRUCT_CASES[1]
    rng = np.random.default_rng(3)
    eta = np.array([0.3, 0.1, 0.2])
    X = sample(dist, np.zeros(5), sym_sqrt(block_of_eta(eta, spec)), 100_000, rng)
    G = np.array([corr_score(x, eta, spec, dist)[1] for x in X])
    info = corr_score(X[0], eta, spec, dist)[2]
    assert np.linalg.norm(G.T @ G / len(G) - info) / np.linalg.norm(info) < 0.02
    se = G.std(0) / math.sqrt(len(G))
    assert np.all(np.abs(G.mean(0)) < 3 * se)


# ---------------------------------------------------------------------------
# joint score
# ---------------------------------------------------------------------------
def _joint_case(rng, spec, dist, r):
    n = spec.n
    tau = rng.normal(scale=0.4, size=(n, r))
    eta = rng.uniform(-0.2, 0.2, spec.n_eta)
    u = rng.normal(size=r)
    z = joint_dense_sample(rng, u, tau, eta, spec, dist)
    return z, u, tau, eta


def joint_dense_sample(rng, u, tau, eta, spec, dist):
    rho = np.vstack([rho_of_tau(t) for t in tau])
    om = np.sqrt(1 - np.sum(rho**2, 1))
    return sample(dist, rho @ u, om[:, None] * sym_sqrt(block_of_eta(eta, spec)), 1, rng)[0]


@pytest.mark.parametrize("spec,dist", STRUCT_CASES[1:], ids=lambda v: getattr(v, "structure", None) or v.kind)
def test_joint_score_fd(spec, dist, rng):
    r = 2
    n = spec.n
    for _ in range(20):
        z, u, tau, eta = _joint_case(rng, spec, dist, r)
        js = joint_score(z, u, tau, eta, spec, dist)
        assert js.loglik == pytest.approx(joint_dense_ll(z, u, tau, eta, spec, dist), abs=1e-10)

        def f(zeta):
            return joint_dense_ll(z, u, zeta[: n * r].reshape(n, r), zeta[n * r :], spec, dist)

        fd = fd_grad(f, np.concatenate([tau.ravel(), eta]))
        assert rel_err(js.grad_zeta, fd) < 1e-5
        # the eta block is the correlation score of the idiosyncratic shocks
        assert np.allclose(js.grad_zeta[n * r :], corr_score(js.e, eta, spec, dist)[1], atol=1e-10)
        # grad_zeta = Pi' grad_xi
        assert np.allclose(js.Pi.T @ js.grad_xi, js.grad_zeta, atol=1e-10)


def test_joint_score_at_origin_gaussian(rng):
    spec, dist = BlockSpec((2, 2)), ConvTSpec.gauss(4)
    u, z = rng.normal(size=3), rng.normal(size=4)
    js = joint_score(z, u, np.zeros((4, 3)), np.zeros(spec.n_eta), spec, dist)
    # with rho = 0 and C_e = I the loading score of asset i is U z_i
    assert np.allclose(js.grad_zeta[:12].reshape(4, 3), np.outer(z, u), atol=1e-12)


def test_joint_information_vs_monte_carlo():
    rng = np.random.default_rng(9)
    spec, dist = BlockSpec((2, 2)), ConvTSpec.ct((2, 2), (6.0, 9.0))
    r, n = 2, 4
    tau = rng.normal(scale=0.4, size=(n, r))
    eta = np.array([0.3, 0.1, 0.2])
    u = rng.normal(size=r)
    N = 20_000
    G = np.empty((N, n * r + 3))
    for k in range(N):
        z = joint_dense_sample(rng, u, tau, eta, spec, dist)
        G[k] = joint_score(z, u, tau, eta, spec, dist).grad_zeta
    info = joint_score(z, u, tau, eta, spec, dist).info_zeta
    assert np.linalg.norm(G.T @ G / N - info) / np.linalg.norm(info) < 0.04


def test_scaled_innovation(rng):
    spec, dist = BlockSpec((2, 2)), ConvTSpec.ct((2, 2), (6.0, 9.0))
    z, u, tau, eta = _joint_case(rng, spec, dist, 3)
    js = joint_score(z, u, tau, eta, spec, dist)
    assert np.array_equal(scaled_innovation(js, "identity"), js.grad_zeta)
    e0 = scaled_innovation(js, "mp")
    assert np.allclose(scaled_innovation(js, "tikhonov", 0.0), e0, atol=1e-10)
    # the eta part is I_eta^{-1} grad_eta in every non-identity scaling
    q = spec.n_eta
    I = js.info_xi
    s = np.linalg.solve(I, js.grad_xi)
    assert np.allclose(e0[-q:], s[-q:])
    with pytest.raises(SpecError):
        scaled_innovation(js, "bogus")


def test_scaled_innovation_near_parallel_sweep():
    rng = np.random.default_rng(4)
    spec, dist = BlockSpec((1, 1), structure="dbc"), ConvTSpec.gauss(2)
    tau = rng.normal(scale=0.5, size=(2, 3))
    rho0 = rho_of_tau(tau[0])
    mp, tk = [], []
    for eps in 10.0 ** -np.arange(1, 8):
        u = 1.3 * rho0 / np.linalg.norm(rho0) + eps * rng.normal(size=3)
        z = rng.normal(size=2)
        js = joint_score(z, u, tau, np.zeros(0), spec, dist)
        mp.append(np.linalg.norm(scaled_innovation(js, "mp")[:3]))
        tk.append(np.linalg.norm(scaled_innovation(js, "tikhonov", math.exp(3.0))[:3]))
    assert max(mp) > 1e3 * np.median(mp)
    assert max(tk) < 10 * np.median(tk)


# ---------------------------------------------------------------------------
# decoupled loading score
# ---------------------------------------------------------------------------
def test_loading_score(rng):
    d = loading_score(0.0, np.zeros(2), np.zeros(2), 5.0)
    assert np.allclose(d["grad_xi"], [0.0, -1.0])
    d = loading_score(0.3, [0.5, 0.1], [0.4, -0.2], 5.0)
    om = math.sqrt(1 - rho_of_tau([0.4, -0.2]) @ rho_of_tau([0.4, -0.2]))
    assert np.allclose(np.diag(d["info_xi"]) * om**2, [1.25, 1.25])
    for nu in (4.5, 8.0, math.inf):
        spec = ConvTSpec.mt(1, nu) if nu < math.inf else ConvTSpec.gauss(1)
        for _ in range(20):
            r = int(rng.integers(1, 6))
            tau, u = rng.normal(scale=0.5, size=r), rng.normal(size=r)
            z = rng.normal() * 1.5

            def f(t):
                rho = rho_of_tau(t)
                return loglik([z], [rho @ u], [[math.sqrt(1 - rho @ rho)]], spec)

            d = loading_score(z, u, tau, nu)
            assert rel_err(d["grad_tau"], fd_grad(f, tau)) < 1e-5


def test_loading_information_vs_monte_carlo():
    rng = np.random.default_rng(12)
    nu, tau, u = 6.0, np.array([0.5, -0.3]), np.array([0.7, 1.1])
    rho = rho_of_tau(tau)
    om = math.sqrt(1 - rho @ rho)
    e = sample(ConvTSpec.mt(1, nu), [0.0], [[1.0]], 100_000, rng)[:, 0]
    Z = rho @ u + om * e
    G = np.array([loading_score(z, u, tau, nu)["grad_xi"] for z in Z])
    info = loading_score(Z[0], u, tau, nu)["info_xi"]
    assert np.linalg.norm(G.T @ G / len(G) - info) / np.linalg.norm(info) < 0.02


# ---------------------------------------------------------------------------
# equicorrelation blocks
# ---------------------------------------------------------------------------
def _equi_dense(x, eta, dist):
    n = x.size
    return dense_ll(x, np.array([eta]), BlockSpec((n,), structure="dbc"), dist)


def test_equicorr_scores_fd(rng):
    assert equicorr_score_mt(np.zeros(3), 0.0, 6.0)[1] == pytest.approx(0.0, abs=1e-14)
    for _ in range(20):
        n = int(rng.integers(2, 7))
        eta = rng.uniform(-0.1, 0.5)
        x = rng.normal(size=n) * 1.3
        nu = rng.uniform(3, 20)
        ll, g = equicorr_score_mt(x, eta, nu)
        assert ll == pytest.approx(_equi_dense(x, eta, ConvTSpec.mt(n, nu)), abs=1e-10)
        assert g == pytest.approx(fd_grad(lambda e: _equi_dense(x, e[0], ConvTSpec.mt(n, nu)), [eta])[0], rel=1e-5, abs=1e-8)
        nus = rng.uniform(3, 20, n)
        ll, g = equicorr_score_ht(x, eta, nus)
        assert ll == pytest.approx(_equi_dense(x, eta, ConvTSpec.ht(nus)), abs=1e-10)
        assert g == pytest.approx(fd_grad(lambda e: _equi_dense(x, e[0], ConvTSpec.ht(nus)), [eta])[0], rel=1e-5, abs=1e-8)
    # Gaussian limit of the HT block
    x = rng.normal(size=5)
    g_inf = equicorr_score_ht(x, 0.2, np.full(5, math.inf))[1]
    fd = fd_grad(lambda e: _equi_dense(x, e[0], ConvTSpec.gauss(5)), [0.2])[0]
    assert g_inf == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("kind", ["mt", "ht"])
def test_equicorr_information_vs_monte_carlo(kind):
    rng = np.random.default_rng(21)
    n, eta = 4, 0.25
    nus = np.array([5.0, 7.0, 9.0, 12.0])
    dist = ConvTSpec.mt(n, 7.0) if kind == "mt" else ConvTSpec.ht(nus)
    X = sample(dist, np.zeros(n), sym_sqrt(block_of_eta([eta], BlockSpec((n,), structure="dbc"))), 100_000, rng)
    if kind == "mt":
        g = np.array([equicorr_score_mt(x, eta, 7.0)[1] for x in X])
        info = equicorr_information_mt(n, eta, 7.0)
    else:
        g = np.array([equicorr_score_ht(x, eta, nus)[1] for x in X])
        info = equicorr_information_ht(eta, nus)
    assert np.mean(g**2) == pytest.approx(info, rel=0.02)
    # information from the generic canonical engine agrees
    info_c = corr_score(X[0], [eta], BlockSpec((n,), structure="dbc"), dist)[2][0, 0]
    assert info == pytest.approx(info_c, rel=1e-10)


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------
def test_alpha_zero_filter_is_static(rng):
    spec, dist = STRUCT_CASES[1]
    eta = np.array([0.3, 0.1, 0.2])
    X = sample(dist, np.zeros(5), sym_sqrt(block_of_eta(eta, spec)), 50, rng)
    res = filter_corr(X, ScoreParams(eta, 0.9, 0.0), spec, dist)
    assert np.all(res.path == eta)
    static = sum(dense_ll(x, eta, spec, dist) for x in X)
    assert res.loglik == pytest.approx(static, abs=1e-9)
    C = corr_path(res.path[:2], spec)
    assert np.allclose(C[0], block_of_eta(eta, spec))


def test_recursion_fixed_point():
    spec, dist = BlockSpec((2,), structure="dbc"), ConvTSpec.gauss(2)
    mu, beta = np.array([0.4]), 0.8
    X = np.zeros((40, 2))
    res = filter_corr(X, ScoreParams(mu, beta, 0.5), spec, dist)
    # X = 0 gives a constant negative score; the path converges to a fixed point
    d = np.abs(np.diff(res.path[:, 0]))
    assert np.all(d[3:] <= d[2:-1]) and d[-1] < 1e-3 * d[0]
    # zero score: path is constant at mu (start value = mu)
    res = filter_equicorr_mt(np.zeros((10, 2)), ScoreParams([0.0], beta, 0.3), 5.0)
    assert np.allclose(res.path, 0.0)


def test_sector_block_additivity(rng):
    spec = BlockSpec((2, 2, 3), (0, 0, 1), "sbc")
    eta = rng.uniform(-0.1, 0.3, spec.n_eta)
    for dist in (ConvTSpec.gauss(7), ConvTSpec.ct((2, 2, 3), (5.0, 7.0, 9.0)), ConvTSpec.ht(np.linspace(5, 11, 7))):
        X = sample(dist, np.zeros(7), sym_sqrt(block_of_eta(eta, spec)), 200, rng)
        p = ScoreParams(eta, 0.95, 0.03)
        full = filter_corr(X, p, spec, dist)
        parts = filter_sector_block(X, p, spec, dist)
        assert sum(r.loglik for r in parts) == pytest.approx(full.loglik, abs=1e-9)
    with pytest.raises(SpecError):
        filter_sector_block(X, p, spec, ConvTSpec.mt(7, 6.0))


def test_single_group_sector_matches_equicorr_filters(rng):
    spec = BlockSpec((3, 4), (0, 1), "dbc")
    eta = np.array([0.2, 0.1])
    dist = ConvTSpec.ht(np.linspace(5, 10, 7))
    X = sample(dist, np.zeros(7), sym_sqrt(block_of_eta(eta, spec)), 300, rng)
    p = ScoreParams(eta, 0.95, 0.04)
    parts = filter_sector_block(X, p, spec, dist)
    eq = filter_equicorr_ht(X[:, 3:], ScoreParams(eta[1:], 0.95, 0.04), dist.nu[3:])
    assert np.allclose(parts[1].loglik_t, eq.loglik_t, atol=1e-10)
    assert np.allclose(parts[1].path[:, 0], eq.path[:, 0], atol=1e-10)
    sub = BlockSpec((3,), structure="dbc")
    mt = filter_corr(X[:, :3], ScoreParams(eta[:1], 0.95, 0.04), sub, ConvTSpec.mt(3, 6.0))
    eq = filter_equicorr_mt(X[:, :3], ScoreParams(eta[:1], 0.95, 0.04), 6.0)
    assert np.allclose(mt.loglik_t, eq.loglik_t, atol=1e-10)


def test_filter_divergence_reports_step():
    spec, dist = BlockSpec((2,), structure="dbc"), ConvTSpec.gauss(2)
    X = np.zeros((20, 2))
    X[5] = [1e200, -1e200]
    res = filter_corr(X, ScoreParams([0.1], 0.9, 0.1), spec, dist)
    assert res.extra["fail"] == 5 and np.isneginf(res.loglik)
    with pytest.raises(FilterDivergenceError) as info:
        filter_corr(X, ScoreParams([0.1], 0.9, 0.1), spec, dist, raise_on_fail=True)
    assert info.value.step == 5


def test_factor_filter_recovers_path():
    rng = np.random.default_rng(1)
    C = np.array([[1.0, 0.4], [0.4, 1.0]])
    p = ScoreParams(gamma_of_corr(C), 0.98, 0.03)
    sim = est.simulate_factors(4000, p, ConvTSpec.gauss(2), rng)
    res = filter_factor_corr(sim["F"], p, ConvTSpec.gauss(2))
    assert np.corrcoef(res.path[:, 0], sim["gamma"][:, 0])[0, 1] > 0.9
    U = res.extra["U"]
    assert np.allclose(np.cov(U.T), np.eye(2), atol=0.06)


def test_joint_filter_accounting_identity(rng):
    spec, dist = BlockSpec((2, 2)), ConvTSpec.ct((2, 2), (6.0, 9.0))
    n, r, T = 4, 2, 300
    tau = rng.normal(scale=0.4, size=(n, r))
    eta = np.array([0.3, 0.1, 0.2])
    p = ScoreParams(np.concatenate([tau.ravel(), eta]), 0.97, 0.02, np.ones(n), "tikhonov")
    U = rng.normal(size=(T, r))
    Z = np.array([joint_dense_sample(rng, u, tau, eta, spec, dist) for u in U])
    res = filter_core_joint(Z, U, p, spec, dist)
    for t in range(0, T, 7):
        zeta = res.path[t]
        rho = np.vstack([rho_of_tau(x) for x in zeta[: n * r].reshape(n, r)])
        om = np.sqrt(1 - np.sum(rho**2, 1))
        e = (Z[t] - rho @ U[t]) / om
        ll_e = corr_score(e, zeta[n * r :], spec, dist)[0]
        assert abs(res.loglik_t[t] - (ll_e - np.log(om).sum())) < 1e-10
        assert np.allclose(res.extra["e"][t], e, atol=1e-12)


def test_scalings_coincide_for_one_factor(rng):
    # r = 1: M is 2 x 1 so the Moore-Penrose and lam = 0 Tikhonov updates agree
    spec, dist = BlockSpec((3,), structure="dbc"), ConvTSpec.gauss(3)
    tau = np.array([[0.3], [0.5], [-0.2]])
    U = rng.normal(size=(200, 1))
    Z = np.array([joint_dense_sample(rng, u, tau, [0.1], spec, dist) for u in U])
    mu = np.concatenate([tau.ravel(), [0.1]])
    a = filter_core_joint(Z, U, ScoreParams(mu, 0.95, 0.05, np.zeros(3), "mp"), spec, dist)
    b = filter_core_joint(Z, U, ScoreParams(mu, 0.95, 0.05, np.zeros(3), "tikhonov"), spec, dist)
    assert np.allclose(a.path, b.path, atol=1e-10)


def test_decoupled_loading_filter(rng):
    U = rng.normal(size=(400, 2))
    tau = np.array([0.4, -0.2])
    rho = rho_of_tau(tau)
    z = U @ rho + math.sqrt(1 - rho @ rho) * rng.standard_t(6, 400) * math.sqrt(4 / 6)
    res = filter_loading_decoupled(z, U, ScoreParams(tau, 0.9, 0.0, [1.0]), 6.0)
    om = math.sqrt(1 - rho @ rho)
    assert np.allclose(res.extra["e"], (z - U @ rho) / om)
    ref = sum(loglik([x], [rho @ u], [[om]], ConvTSpec.mt(1, 6.0)) for x, u in zip(z, U))
    assert res.loglik == pytest.approx(ref, abs=1e-9)
    with pytest.raises(SpecError):
        filter_loading_decoupled(z, U, ScoreParams(tau, 0.9, 0.0), 2.0)
