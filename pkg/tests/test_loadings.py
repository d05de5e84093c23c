import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import fd_jac, rel_err
from dfcm.exceptions import ConditioningError, DomainError
from dfcm.loadings import (
    LoadingState,
    moore_penrose_Mplus,
    rho_of_tau,
    sensitivity_M,
    stack_rho,
    tau_jacobian,
    tau_of_rho,
    tikhonov_Mplus,
)

T06 = np.arctanh(0.6)  # 0.693147...


def test_tau_rho_examples():
    assert np.array_equal(tau_of_rho(np.zeros(3)), np.zeros(3))
    assert np.array_equal(rho_of_tau(np.zeros(3)), np.zeros(3))
    assert np.allclose(tau_of_rho([0.6, 0.0]), [0.693147, 0.0], atol=1e-6)
    assert np.allclose(rho_of_tau([T06, 0.0]), [0.6, 0.0], atol=1e-12)
    for r in (-0.9, -0.2, 0.3, 0.95):
        assert tau_of_rho([r])[0] == pytest.approx(np.arctanh(r), abs=1e-14)
    big = rho_of_tau([30.0, 40.0])
    # tanh(50) rounds to 1.0 in double precision; the map must not overflow
    assert np.all(np.isfinite(big)) and np.linalg.norm(big) == pytest.approx(np.tanh(50), abs=1e-15)
    assert np.allclose(big / np.linalg.norm(big), [0.6, 0.8])
    with pytest.raises(DomainError):
        tau_of_rho([0.8, 0.6])


def test_series_limit_near_origin():
    t = np.array([1e-9, -2e-9])
    assert np.allclose(rho_of_tau(t), t, rtol=1e-12)
    assert np.allclose(tau_of_rho(t), t, rtol=1e-12)
    assert np.allclose(tau_jacobian(t), np.eye(2), atol=1e-12)


@given(st.integers(1, 15), st.integers(0, 2**31))
def test_bijection(r, seed):
    rng = np.random.default_rng(seed)
    # |tau| <= 6 keeps 1 - |rho|^2 above 2e-5; beyond that the inverse map
    # loses digits to cancellation in 1 - |rho|
    u = rng.normal(size=r)
    tau = u / np.linalg.norm(u) * rng.uniform(0.0, 6.0)
    assert np.max(np.abs(tau_of_rho(rho_of_tau(tau)) - tau)) < 1e-10
    u = rng.normal(size=r)
    rho = u / np.linalg.norm(u) * rng.uniform(0.0, 0.99)
    assert np.max(np.abs(rho_of_tau(tau_of_rho(rho)) - rho)) < 1e-10


@given(st.integers(1, 15), st.integers(0, 2**31))
def test_jacobian_symmetric_pd_with_known_spectrum(r, seed):
    rng = np.random.default_rng(seed)
    tau = rng.normal(size=r)
    J = tau_jacobian(tau)
    rho = rho_of_tau(tau)
    assert np.max(np.abs(J - J.T)) < 1e-14
    ev = np.sort(np.linalg.eigvalsh(J))
    expected = np.sort([1 - rho @ rho] + [np.linalg.norm(rho) / np.linalg.norm(tau)] * (r - 1))
    assert np.allclose(ev, expected, atol=1e-12)
    assert ev[0] > 0


def test_jacobian_example_and_fd(rng):
    assert np.allclose(tau_jacobian(np.zeros(4)), np.eye(4))
    assert np.allclose(tau_jacobian([T06, 0.0]), np.diag([0.64, 0.6 / T06]), atol=1e-12)
    assert 0.6 / T06 == pytest.approx(0.865617, abs=1e-6)
    tau = rng.normal(size=15)
    assert rel_err(tau_jacobian(tau), fd_jac(rho_of_tau, tau)) < 1e-6


def test_sparsity_transfer():
    rho = np.array([0.3, 0.0, -0.2, 0.0])
    tau = tau_of_rho(rho)
    assert np.array_equal(tau == 0, rho == 0)
    assert np.array_equal(tau_of_rho(rho), tau_of_rho(rho.copy()))
    assert np.all(np.sign(tau) == np.sign(rho))


def test_state_and_stack():
    s = LoadingState.from_tau([T06, 0.0])
    assert s.omega == pytest.approx(0.8)
    assert s.r == 2
    s2 = LoadingState.from_rho(s.rho)
    assert np.allclose(s2.tau, s.tau, atol=1e-12)
    rho, om = stack_rho(np.array([[T06, 0.0], [0.0, 0.0]]).ravel(), 2, 2)
    assert np.allclose(rho, [[0.6, 0.0], [0.0, 0.0]]) and np.allclose(om, [0.8, 1.0])
    C = rho @ rho.T + np.diag(om**2)
    assert np.allclose(np.diag(C), 1.0)


def test_sensitivity_examples(rng):
    M = sensitivity_M(np.zeros(3), [1.0, 2.0, 3.0])
    assert np.allclose(M, [[1, 2, 3], [0, 0, 0]])
    M = sensitivity_M(LoadingState.from_tau([T06, 0.0]), [1.0, 1.0])
    assert np.allclose(M, [[0.64, 0.6 / T06], [-0.48, 0.0]], atol=1e-12)
    tau, U = rng.normal(size=4), rng.normal(size=4)

    def mu_om(t):
        rho = rho_of_tau(t)
        return np.array([rho @ U, np.sqrt(1 - rho @ rho)])

    assert rel_err(sensitivity_M(tau, U), fd_jac(mu_om, tau).reshape(2, 4, order="F")) < 1e-6
    with pytest.raises(DomainError):
        sensitivity_M([40.0, 0.0], U[:2])


def test_moore_penrose(rng):
    # r = 2: generic M is square and invertible
    tau, U = rng.normal(size=2), rng.normal(size=2)
    M = sensitivity_M(tau, U)
    assert np.allclose(moore_penrose_Mplus(tau, U), np.linalg.inv(M), atol=1e-10)
    tau, U = rng.normal(size=5), rng.normal(size=5)
    M = sensitivity_M(tau, U)
    P = moore_penrose_Mplus(tau, U)
    assert np.allclose(P, np.linalg.pinv(M), atol=1e-10)
    proj = P @ M
    assert np.allclose(proj @ proj, proj, atol=1e-10) and np.allclose(M @ proj, M, atol=1e-10)
    with pytest.raises(ConditioningError):
        moore_penrose_Mplus(tau, 2.5 * rho_of_tau(tau))


def test_moore_penrose_blows_up_near_parallel(rng):
    tau = rng.normal(size=3)
    rho = rho_of_tau(tau)
    perp = np.cross(rho, rng.normal(size=3))
    perp /= np.linalg.norm(perp)
    norms = [np.linalg.norm(moore_penrose_Mplus(tau, rho + eps * perp)) for eps in (1e-1, 1e-3, 1e-5)]
    assert norms[0] < norms[1] < norms[2] and norms[2] > 1e3 * norms[0]


def test_tikhonov(rng):
    tau, U = rng.normal(size=4), rng.normal(size=4)
    M = sensitivity_M(tau, U)
    assert np.allclose(tikhonov_Mplus(tau, U, 0.0), moore_penrose_Mplus(tau, U), atol=1e-10)
    lam = 0.7
    assert np.allclose(tikhonov_Mplus(tau, U, lam), M.T @ np.linalg.inv(M @ M.T + lam * np.eye(2)), atol=1e-12)
    assert np.max(np.abs(tikhonov_Mplus(tau, U, 1e12))) < 1e-10
    with pytest.raises(DomainError):
        tikhonov_Mplus(tau, U, -1.0)


def test_tikhonov_rank_one_example():
    # tau = 0 and U = e1 give M = [[1, 0], [0, 0]]
    P = tikhonov_Mplus(np.zeros(2), [1.0, 0.0], 1.0)
    assert np.allclose(P, [[0.5, 0.0], [0.0, 0.0]])


def test_regularized_boundedness_sweep():
    rng = np.random.default_rng(11)
    lam = np.exp(3.0)
    mp, tk = [], []
    for k in range(10_000):
        tau = rng.normal(scale=0.7, size=3)
        rho = rho_of_tau(tau)
        U = rng.normal(size=3)
        if k % 10 == 0:
            # near-parallel pairs
            U = rho / np.linalg.norm(rho) * rng.normal(scale=2.0) + 10 ** rng.uniform(-7, -3) * rng.normal(size=3)
        tk.append(np.linalg.norm(tikhonov_Mplus(tau, U, lam)))
        try:
            mp.append(np.linalg.norm(moore_penrose_Mplus(tau, U, rel_tol=0.0)))
        except ConditioningError:
            mp.append(np.inf)
    mp, tk = np.array(mp), np.array(tk)
    assert np.max(tk) / np.median(tk) < 10
    assert np.max(mp) / np.median(mp) > 1e3
