import itertools
import math

import numpy as np
import pytest

from dfcm import estimate as est
from dfcm.blockcorr import BlockSpec, block_of_eta, eta_of_block
from dfcm.convt import ConvTSpec, loglik
from dfcm.exceptions import SpecError
from dfcm.loadings import tau_of_rho
from dfcm.matcorr import gamma_of_corr, sym_sqrt
from dfcm.scoredriven import ScoreParams, filter_corr

SPEC = BlockSpec((2, 2), (0, 1), "sbc")
C_E = np.array([[1, 0.4, 0, 0], [0.4, 1, 0, 0], [0, 0, 1, 0.3], [0, 0, 0.3, 1]])
RHO = np.array([[0.5, 0.1], [0.4, 0.2], [0.1, 0.5], [0.2, 0.3]])


@pytest.fixture(scope="module")
def panel():
    rng = np.random.default_rng(7)
    T, r = 800, 2
    fp = ScoreParams(gamma_of_corr(np.array([[1, 0.3], [0.3, 1]])), 0.97, 0.02)
    fs = est.simulate_factors(T, fp, ConvTSpec.gauss(r), rng)
    tau = np.vstack([tau_of_rho(x) for x in RHO])
    cp = ScoreParams(np.concatenate([tau.ravel(), eta_of_block(C_E, SPEC)]), 0.97, 0.02, np.ones(4))
    sim = est.simulate_core(fs["U"], cp, SPEC, ConvTSpec.ct((2, 2), (6.0, 12.0)), rng)
    return sim["Z"], fs["U"], fs["F"]


def test_bic_example():
    assert round(est.bic(-36124, 85, 4278)) == 72959


@pytest.mark.parametrize("structure,p", [("dbc", 312), ("sbc", 318), ("fbc", 330), ("unrestricted", 498)])
def test_count_params_reference(structure, p):
    if structure == "unrestricted":
        spec = BlockSpec((1,) * 12, structure="unrestricted")
    else:
        spec = BlockSpec((3, 3, 3, 3), (0, 0, 1, 1), structure)
    assert est.count_params("joint", 8, spec, "gauss") == p


def test_count_params_grid():
    sizes, sectors = (3, 3, 3, 3), (0, 0, 1, 1)
    nu_extra = {"gauss": 0, "mt": 1, "ct": 4, "ht": 12}
    base = {"dbc": 312, "sbc": 318, "fbc": 330}
    for structure, dist in itertools.product(base, nu_extra):
        spec = BlockSpec(sizes, sectors, structure)
        assert est.count_params("joint", 8, spec, dist) == base[structure] + nu_extra[dist]
        # without the per-asset penalty
        assert est.count_params("joint", 8, spec, dist, scaling="mp") == base[structure] + nu_extra[dist] - 12
    spec = BlockSpec((1,) * 12, structure="unrestricted")
    for dist, k in (("gauss", 0), ("mt", 1), ("ht", 12)):
        assert est.count_params("joint", 8, spec, dist) == 498 + k
    # pooled recursions: long-run levels plus one (beta, alpha) pair per component
    spec = BlockSpec(sizes, sectors, "dbc")
    assert est.count_params("joint", 8, spec, "gauss", pooling="component") == 100 + 4 + 12
    assert est.count_params("factor", 8) == 28 * 3
    assert est.count_params("stage2", 0, spec, "ct", pooling="component") == 4 + 2 + 4
    # decoupled: stage 1 per asset penalty and nu, stage 2 recursions and nu
    assert est.count_params("decoupled", 8, spec, "ct", pooling="component") == 96 + 2 + 12 * 2 + 4 + 2 + 4
    with pytest.raises(SpecError):
        est.count_params("joint", 8)
    with pytest.raises(SpecError):
        est.count_params("joint", 8, spec, pooling="group")


def test_static_block_corr():
    rng = np.random.default_rng(1)
    spec = BlockSpec((2, 3), (0, 0), "fbc")
    C = block_of_eta([0.4, 0.2, 0.3], spec)
    E = rng.normal(size=(20000, 5)) @ sym_sqrt(C)
    S, repaired = est.static_block_corr(E, spec)
    assert not repaired and np.max(np.abs(S - C)) < 0.03
    assert np.allclose(np.diag(S), 1.0)
    S, _ = est.static_block_corr(E, BlockSpec((2, 3), (0, 1), "sbc"))
    assert np.all(S[:2, 2:] == 0)
    with pytest.raises(SpecError):
        est.static_block_corr(E[:3], spec)


def test_truncate_small():
    C = np.array([[1, 0.04, -0.3], [0.04, 1, -0.01], [-0.3, -0.01, 1]])
    T = est.truncate_small(C)
    assert T[0, 1] == 0 and T[1, 2] == 0 and T[0, 2] == -0.3 and np.all(np.diag(T) == 1)


def test_structures_are_nested():
    # a diagonal-block filter equals the sparse-block filter with the extra
    # cells switched off (zero level, no score loading)
    rng = np.random.default_rng(3)
    sizes, sectors = (2, 2, 2), (0, 0, 1)
    dbc, sbc = BlockSpec(sizes, sectors, "dbc"), BlockSpec(sizes, sectors, "sbc")
    eta = np.array([0.3, 0.2, 0.4])
    X = rng.normal(size=(300, 6)) @ sym_sqrt(block_of_eta(eta, dbc))
    dist = ConvTSpec.ct(sizes, (5.0, 7.0, 9.0))
    a = filter_corr(X, ScoreParams(eta, 0.9, 0.05), dbc, dist)
    # embed: the sbc cell order puts cross cell (1, 0) between the within cells
    rows, cols = sbc.cells
    mu, beta, alpha = np.zeros(sbc.n_eta), np.full(sbc.n_eta, 0.9), np.zeros(sbc.n_eta)
    w = 0
    for m, (k, l) in enumerate(zip(rows, cols)):
        if k == l:
            mu[m], alpha[m] = eta[w], 0.05
            w += 1
    b = filter_corr(X, ScoreParams(mu, beta, alpha), sbc, dist)
    assert b.loglik == pytest.approx(a.loglik, abs=1e-8)
    # gauss is the large-nu limit of ct
    g = filter_corr(X, ScoreParams(eta, 0.9, 0.05), dbc, ConvTSpec.gauss(6))
    c = filter_corr(X, ScoreParams(eta, 0.9, 0.05), dbc, ConvTSpec.ct(sizes, (1e9,) * 3))
    assert c.loglik == pytest.approx(g.loglik, rel=1e-6)


def test_fit_core_joint_small(panel):
    Z, U, _ = panel
    rep = est.fit_core_joint(Z, U, SPEC, "ct", maxiter=200)
    assert rep.model == "joint" and rep.p == est.count_params("joint", 2, SPEC, "ct", pooling="component")
    assert rep.bic == pytest.approx(-2 * rep.loglik + rep.p * math.log(rep.T))
    assert np.isfinite(rep.loglik)
    f = est.filter_fitted(rep, Z, U)
    assert np.allclose(f["loglik_t"], rep.paths["loglik_t"])
    d = rep.to_dict()
    rep2 = est.FitReport.from_dict(d)
    assert np.allclose(est.filter_fitted(rep2, Z, U)["loglik_t"], rep.paths["loglik_t"])
    # loading paths track the static loadings
    assert np.max(np.abs(rep.paths["rho"].mean(0) - RHO)) < 0.15


def test_joint_guard():
    spec = BlockSpec((31,), structure="dbc")
    with pytest.raises(SpecError, match="decoupled"):
        est.fit_core_joint(np.zeros((10, 31)), np.zeros((10, 1)), spec)


def test_decoupled_stage_additivity(panel):
    Z, U, _ = panel
    rep = est.fit_core_decoupled(Z, U, SPEC, "ct", maxiter=200)
    c = rep.components
    assert rep.loglik == pytest.approx(c["loglik_e"] - c["log_det_omega"], abs=1e-8)
    # each step agrees with the dense density of Z given U
    P, nu = rep.paths, rep.params["stage2"]["nu"]
    d = ConvTSpec.ct(SPEC.group_sizes, nu)
    for t in range(0, Z.shape[0], 97):
        rho, om = P["rho"][t], P["omega"][t]
        Xi = om[:, None] * sym_sqrt(block_of_eta(P["eta"][t], SPEC))
        assert P["loglik_t"][t] == pytest.approx(loglik(Z[t], rho @ U[t], Xi, d), abs=1e-9)
    assert np.allclose(est.filter_fitted(rep, Z, U)["loglik_t"], P["loglik_t"])
    # stage 1 can be shared between specifications
    s1 = est.fit_stage1(Z, U, maxiter=200)
    again = est.fit_core_decoupled(Z, U, SPEC, "ct", maxiter=200, stage1=s1)
    assert again.loglik == pytest.approx(rep.loglik, abs=1e-9)


def test_fits_are_deterministic(panel):
    _, _, F = panel
    a = est.fit_factor_model(F, "gauss")
    b = est.fit_factor_model(F, "gauss")
    assert a.loglik == b.loglik and a.params == b.params
    assert a.p == est.count_params("factor", 2, pooling="component")
    assert a.summary["beta"] > 0.5


def test_oos_purity(panel):
    Z, U, _ = panel
    k = 600
    rep = est.fit_core_decoupled(Z[:k], U[:k], SPEC, "gauss", maxiter=100)
    o = est.evaluate_oos(rep, Z, U, k, "x")
    assert o.n_out == Z.shape[0] - k
    assert o.loglik_in == pytest.approx(rep.loglik, abs=1e-8)
    # holdout data cannot change the in-sample part
    Z2 = Z.copy()
    Z2[k:] *= 1.5
    o2 = est.evaluate_oos(rep, Z2, U, k)
    assert o2.loglik_in == o.loglik_in and o2.loglik_out != o.loglik_out
    empty = est.evaluate_oos(rep, Z[:k], U[:k], k)
    assert empty.n_out == 0 and empty.loglik_out == 0.0 and math.isnan(empty.loglik_out_per_obs)
    with pytest.raises(SpecError):
        est.evaluate_oos(rep, Z, U, 0)


def test_loading_path_correlation():
    rng = np.random.default_rng(0)
    a = {"rho": rng.normal(size=(50, 3, 2))}
    assert est.loading_path_correlation(a, a) == pytest.approx(1.0)
    b = {"rho": -a["rho"]}
    assert est.loading_path_correlation(a, b) == pytest.approx(-1.0)


def test_burn_in_is_diagnostic_only(panel):
    Z, U, _ = panel
    rep = est.fit_core_decoupled(Z, U, SPEC, "gauss", maxiter=100)
    d = rep.diagnostics
    assert d["burn_in"] == est.BURN_IN
    assert d["loglik_after_burn_in"] == pytest.approx(rep.paths["loglik_t"][est.BURN_IN:].sum())
    assert rep.loglik == pytest.approx(rep.paths["loglik_t"].sum())


def test_fitted_distributions_nest():
    # one group: ct has a single nu and reduces to mt; heavier tails never lose to gauss
    rng = np.random.default_rng(12)
    spec = BlockSpec((4,), structure="dbc")
    C = block_of_eta([0.35], spec)
    E = rng.standard_t(5, size=(600, 4)) * math.sqrt(3 / 5) @ sym_sqrt(C)
    fits = {d: est.fit_idiosyncratic(E, spec, d, maxiter=300) for d in ("gauss", "mt", "ct", "ht")}
    for d in ("mt", "ct", "ht"):
        assert fits[d].loglik >= fits["gauss"].loglik
    assert abs(fits["ct"].loglik - fits["mt"].loglik) / E.shape[0] < 1e-4
