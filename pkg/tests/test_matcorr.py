import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, strategies as st

from conftest import fd_jac, rel_err
from dfcm.exceptions import ConvergenceError, DomainError
from dfcm.matcorr import (
    IndexMaps,
    check_corr,
    corr_of_gamma,
    dsqrt_dgamma,
    gamma_jacobian,
    gamma_of_corr,
    matrix_exp,
    matrix_log,
    random_corr,
    sym_sqrt,
    unvecl,
    vech,
    vecl,
)

# 4x4 block example: within-group 0.8 and 0.6, between 0.4.
# Reference log entries from scipy.linalg.logm (frozen).
C4 = np.array([[1, 0.8, 0.4, 0.4], [0.8, 1, 0.4, 0.4], [0.4, 0.4, 1, 0.6], [0.4, 0.4, 0.6, 1]])
LOG4 = (-0.5711275553972882, 1.0383103570368106, 0.2557794748241845, -0.2884988338233634, 0.6277918980507917)
C3 = np.array([[1, 0.7, 0.4], [0.7, 1, 0.6], [0.4, 0.6, 1]])
GAMMA3 = (0.8246831290827987, 0.2229751484419363, 0.641668413083699)


def test_vecl_order_is_column_major():
    m = np.arange(16.0).reshape(4, 4)
    # column 0 below the diagonal, then column 1, then column 2
    assert vecl(m).tolist() == [4.0, 8.0, 12.0, 9.0, 13.0, 14.0]
    assert vech(m).tolist() == [0.0, 4.0, 8.0, 12.0, 5.0, 9.0, 13.0, 10.0, 14.0, 15.0]
    assert np.array_equal(vecl(unvecl(vecl(m), 4)), vecl(m))


def test_index_maps():
    n = 4
    im = IndexMaps.build(n)
    K = im.commutation_matrix()
    assert np.array_equal(K @ K, np.eye(n * n))
    m = np.random.default_rng(0).normal(size=(n, n))
    v = m.ravel(order="F")
    assert np.array_equal(K @ v, m.T.ravel(order="F"))
    assert np.array_equal(im.E_d() @ v, np.diag(m))
    assert np.array_equal(im.E_l() @ v, vecl(m))
    assert np.array_equal(im.E_u() @ v, vecl(m.T))
    assert np.array_equal(im.L() @ v, vech(m))
    # E_l + E_u puts each strict-lower coordinate into both mirror slots
    s = (im.E_l() + im.E_u()).T @ vecl(m)
    assert np.array_equal(s.reshape(n, n, order="F"), unvecl(vecl(m), n))


def test_matrix_log_identity_and_block_example():
    assert np.allclose(matrix_log(np.eye(4)), 0.0, atol=1e-15)
    L = matrix_log(C4)
    got = (L[0, 0], L[1, 0], L[2, 0], L[2, 2], L[3, 2])
    assert np.allclose(got, LOG4, atol=1e-12)
    assert np.allclose(L, L.T, atol=1e-14)


def test_matrix_log_2x2_closed_form():
    L = matrix_log([[1.0, 0.5], [0.5, 1.0]])
    assert L[1, 0] == pytest.approx(np.arctanh(0.5), abs=1e-12)
    assert L[0, 0] == pytest.approx(0.5 * np.log(0.75), abs=1e-12)


def test_matrix_log_rejects_non_pd():
    bad = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(DomainError, match="eigenvalue"):
        matrix_log(bad)
    with pytest.raises(DomainError):
        gamma_of_corr([[1.0, 0.2], [0.3, 1.0]])
    with pytest.raises(DomainError):
        check_corr([[2.0, 0.0], [0.0, 1.0]])


def test_gamma_examples():
    assert np.allclose(gamma_of_corr(C3), GAMMA3, atol=1e-12)
    assert np.allclose(gamma_of_corr(C3), (0.825, 0.223, 0.642), atol=5e-3)
    assert np.allclose(gamma_of_corr(np.eye(5)), 0.0)
    assert gamma_of_corr([[1, 0.5], [0.5, 1]])[0] == pytest.approx(0.549306, abs=1e-6)


def test_corr_of_gamma_examples():
    assert np.allclose(corr_of_gamma(np.zeros(6)), np.eye(4))
    assert corr_of_gamma([0.549306144334])[1, 0] == pytest.approx(0.5, abs=1e-10)
    assert np.allclose(vecl(corr_of_gamma(GAMMA3)), vecl(C3), atol=1e-10)


def test_corr_of_gamma_nonconvergence_reports_residual():
    with pytest.raises(ConvergenceError) as info:
        corr_of_gamma(np.random.default_rng(1).normal(size=10), max_iter=2)
    assert info.value.residual > 0
    assert info.value.iterations == 2


@given(st.floats(-0.999, 0.999))
def test_2x2_is_fisher_transform(rho):
    g = gamma_of_corr([[1.0, rho], [rho, 1.0]])
    assert g[0] == pytest.approx(np.arctanh(rho), abs=1e-12)


@given(st.integers(2, 30), st.integers(0, 2**31))
def test_round_trip_corr_gamma_corr(n, seed):
    rng = np.random.default_rng(seed)
    C = random_corr(n, rng, scale=1.5)
    C2 = corr_of_gamma(gamma_of_corr(C))
    assert np.max(np.abs(C2 - C)) < 1e-8
    assert np.max(np.abs(matrix_exp(matrix_log(C)) - C)) < 1e-10


@given(st.integers(2, 12), st.integers(0, 2**31))
def test_corr_of_gamma_is_valid_correlation(n, seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(scale=1.0, size=n * (n - 1) // 2)
    C = corr_of_gamma(g)
    check_corr(C)
    assert np.linalg.eigvalsh(C)[0] > 0
    assert np.allclose(gamma_of_corr(C), g, atol=1e-8)


def test_log_matches_scipy_oracle(rng):
    for n in (3, 7, 15):
        C = random_corr(n, rng)
        assert np.allclose(matrix_log(C), sla.logm(C).real, atol=1e-10)
        assert np.allclose(sym_sqrt(C), sla.sqrtm(C).real, atol=1e-10)


def test_sym_sqrt():
    assert np.allclose(sym_sqrt(np.eye(3)), np.eye(3))
    S = sym_sqrt([[1.0, 0.8], [0.8, 1.0]])
    assert S[0, 0] == pytest.approx(0.894427191, abs=1e-9)
    assert S[0, 1] == pytest.approx(0.4472135955, abs=1e-9)
    C = random_corr(12, np.random.default_rng(3))
    S = sym_sqrt(C)
    assert np.max(np.abs(S @ S - C)) < 1e-10
    with pytest.raises(DomainError):
        sym_sqrt(np.diag([1.0, -1.0]))


def test_gamma_jacobian_examples():
    assert gamma_jacobian(np.eye(2))[0, 0] == pytest.approx(1.0)
    assert gamma_jacobian([[1, 0.5], [0.5, 1]])[0, 0] == pytest.approx(0.75, abs=1e-12)


def test_gamma_jacobian_fd(rng):
    for _ in range(20):
        n = int(rng.integers(2, 7))
        C = random_corr(n, rng)
        g = gamma_of_corr(C)
        fd = fd_jac(lambda x: vecl(corr_of_gamma(x)), g)
        assert rel_err(gamma_jacobian(C), fd) < 1e-5


def test_gamma_jacobian_repeated_eigenvalues():
    # identity and equicorrelation have repeated eigenvalues
    for C in (np.eye(4), 0.7 * np.eye(4) + 0.3):
        g = gamma_of_corr(C)
        fd = fd_jac(lambda x: vecl(corr_of_gamma(x)), g)
        assert rel_err(gamma_jacobian(C), fd) < 1e-5


def test_dsqrt_dgamma_fd(rng):
    cases = [np.eye(3), C3, np.eye(2)] + [random_corr(int(rng.integers(2, 6)), rng) for _ in range(20)]
    for C in cases:
        g = gamma_of_corr(C)
        fd = fd_jac(lambda x: sym_sqrt(corr_of_gamma(x)), g)
        assert rel_err(dsqrt_dgamma(C), fd) < 1e-5


def test_dsqrt_dgamma_at_identity_2x2():
    # d S / d gamma at the identity puts 1/2 on both off-diagonal slots
    d = dsqrt_dgamma(np.eye(2))[:, 0]
    assert np.allclose(d, [0.0, 0.5, 0.5, 0.0], atol=1e-12)
