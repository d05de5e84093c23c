"""
Score-driven recursions.

Every filter updates a dynamic parameter ``x`` by

    x_{t+1} = (1 - beta) * mu + beta * x_t + alpha * eps_t

with diagonal ``beta`` and ``alpha`` and a scaled score ``eps_t``. The
recursion starts at ``x_1 = mu``.

Filters
-------
filter_corr
    Correlation matrix in log-domain block coordinates (factor correlation
    with an unrestricted spec, or the idiosyncratic correlation of a sector).
filter_core_joint
    Loadings ``tau`` of all assets together with ``eta``.
filter_loading_decoupled
    Loadings of a single asset.
filter_equicorr_mt, filter_equicorr_ht
    One equicorrelation block, closed-form score and information.
filter_sector_block
    Independent sectors of a sparse block structure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from numpy.typing import ArrayLike, NDArray

from . import _canon
from .blockcorr import BlockSpec
from .convt import ConvTSpec, bilinear_weights, ct_terms, information_from_X, log_constant
from .exceptions import DomainError, FilterDivergenceError, SpecError
from .loadings import PINV_CUTOFF, jacobian_nb, regularized_inverse_nb, rho_of_tau_nb

__all__ = [
    "SCALINGS",
    "ScoreParams",
    "FilterResult",
    "JointScore",
    "filter_corr",
    "filter_factor_corr",
    "filter_core_joint",
    "filter_loading_decoupled",
    "filter_equicorr_mt",
    "filter_equicorr_ht",
    "filter_sector_block",
    "joint_score",
    "scaled_innovation",
    "equicorr_score_mt",
    "equicorr_score_ht",
    "equicorr_information_mt",
    "equicorr_information_ht",
    "loading_score",
]

SCALINGS = {"identity": 0, "mp": 1, "tikhonov": 2}
OMEGA_FLOOR = 1e-8
SOLVE_TOL = 1e-8


@dataclass
class ScoreParams:
    """Coefficients of a score-driven recursion.

    Parameters
    ----------
    mu_bar : array_like
        Long-run level of the dynamic parameter (also its starting value).
    beta : array_like
        Persistence, elementwise in (-1, 1).
    alpha : array_like
        Loading on the scaled score, elementwise >= 0.
    lam : array_like, optional
        Per-asset penalties of the regularized loading update.
    scaling : {"identity", "mp", "tikhonov"}
        Scaled-score definition (raw score, Moore-Penrose, Tikhonov).
    """

    mu_bar: NDArray
    beta: NDArray
    alpha: NDArray
    lam: NDArray | None = None
    scaling: str = "tikhonov"

    def __post_init__(self):
        self.mu_bar = np.atleast_1d(np.asarray(self.mu_bar, dtype=float))
        p = self.mu_bar.size
        self.beta = np.broadcast_to(np.asarray(self.beta, dtype=float), (p,)).copy()
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), (p,)).copy()
        if np.any(np.abs(self.beta) >= 1):
            raise SpecError("persistence must lie in (-1, 1)")
        if np.any(self.alpha < 0):
            raise SpecError("score loadings must be non-negative")
        if self.lam is not None:
            self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
            if np.any(self.lam < 0):
                raise SpecError("penalties must be non-negative")
        if self.scaling not in SCALINGS:
            raise SpecError(f"unknown scaling {self.scaling!r}")

    @property
    def kappa(self) -> NDArray:
        return (1.0 - self.beta) * self.mu_bar


@dataclass
class FilterResult:
    """Output of a filter run.

    Attributes
    ----------
    path : ndarray (T, p)
        Dynamic parameter at each step (value used for observation t).
    loglik_t : ndarray (T,)
        Per-step predictive log-likelihood.
    extra : dict
        Filter-specific paths (orthogonalized factors, residuals, ...).
    """

    path: NDArray
    loglik_t: NDArray
    extra: dict = field(default_factory=dict)

    @property
    def loglik(self) -> float:
        return float(np.sum(self.loglik_t))


def _check_failure(fail: int, what: str, raise_on_fail: bool):
    if fail >= 0 and raise_on_fail:
        raise FilterDivergenceError(f"{what} filter produced a non-finite or inadmissible state at step {fail}", step=fail)


# ---------------------------------------------------------------------------
# correlation filter in canonical coordinates
# ---------------------------------------------------------------------------
@njit(cache=True)
def corr_step(x, eta, cells_k, cells_l, sizes, cgroup, dgroup, nu, m, consts, phi, c1, c2, u0):
    """Log density, score, scaled score for one observation ``x ~ CT(0, C(eta)^{1/2})``."""
    q = eta.shape[0]
    n = x.shape[0]
    u, S, Sinv, logdet, dS, X, resid = _canon.canon_state(eta, cells_k, cells_l, sizes, cgroup, u0, True)
    V = Sinv @ x
    llk, w = ct_terms(V, dgroup, nu, m, consts)
    ll = llk - 0.5 * logdet
    grad = np.zeros(q)
    for k in range(q):
        s = 0.0
        for a in range(n):
            wa = w[a] * V[a]
            for b in range(n):
                s += wa * V[b] * X[k, a, b]
            s -= X[k, a, a]
        grad[k] = s
    info = information_from_X(X, c1, c2, dgroup, phi)
    if q > 0 and np.all(np.isfinite(grad)):
        eps = np.linalg.solve(info, grad)
    elif q > 0:
        # overflowing data; the caller flags the step as a failure
        eps = np.full(q, np.nan)
    else:
        eps = grad
    return ll, grad, eps, info, V, u, resid


@njit(cache=True)
def _corr_filter(Xs, mu, beta, alpha, cells_k, cells_l, sizes, cgroup, dgroup, nu, m, consts, phi, c1, c2):
    T = Xs.shape[0]
    n = Xs.shape[1]
    q = mu.shape[0]
    path = np.empty((T, q))
    lls = np.zeros(T)
    Vs = np.zeros((T, n))
    u = np.zeros(sizes.shape[0])
    eta = mu.copy()
    fail = -1
    for t in range(T):
        path[t] = eta
        ll, grad, eps, info, V, u, resid = corr_step(
            Xs[t], eta, cells_k, cells_l, sizes, cgroup, dgroup, nu, m, consts, phi, c1, c2, u
        )
        ok = np.isfinite(ll) and resid < SOLVE_TOL
        for k in range(q):
            ok = ok and np.isfinite(eps[k])
        if not ok:
            fail = t
            lls[t:] = -np.inf
            for s in range(t + 1, T):
                path[s] = eta
            break
        lls[t] = ll
        Vs[t] = V
        eta = (1.0 - beta) * mu + beta * eta + alpha * eps
    return path, lls, Vs, fail


def corr_score(x: ArrayLike, eta: ArrayLike, spec: BlockSpec, dist: ConvTSpec) -> tuple[float, NDArray, NDArray]:
    """Log density, score and information of ``x ~ CT(0, C(eta)^{1/2})`` for one observation.

    Returns
    -------
    loglik : float
    grad : ndarray (q,)
        Derivative of the log density with respect to ``eta``.
    info : ndarray (q, q)
        Conditional information for ``eta``.
    """
    x = np.ascontiguousarray(x, dtype=float)
    eta = np.ascontiguousarray(np.atleast_1d(eta), dtype=float)
    r, c = spec.cells
    g, nu, m, consts, phi, psi, c1, c2 = _dist_arrays(dist)
    ll, grad, _, info, _, _, resid = corr_step(
        x, eta, r, c, spec.canon_sizes, spec.canon_group, g, nu, m, consts, phi, c1, c2, np.zeros(spec.canon_sizes.size)
    )
    if not resid < SOLVE_TOL:
        raise DomainError("unit-diagonal solve failed for this eta")
    return float(ll), grad, info


def _dist_arrays(dist: ConvTSpec):
    c1, c2 = bilinear_weights(dist.group_of, dist.phi, dist.psi)
    return dist.group_of, dist.nu_arr, dist.m_arr, dist.consts, dist.phi, dist.psi, c1, c2


def filter_corr(
    X: ArrayLike,
    params: ScoreParams,
    spec: BlockSpec,
    dist: ConvTSpec,
    raise_on_fail: bool = False,
) -> FilterResult:
    """Score-driven filter for ``C_t`` with ``X_t ~ CT(0, C_t^{1/2})``.

    The dynamic parameter is ``eta`` in the layout of ``spec`` and the
    scaled score is ``I_eta^{-1} grad_eta``.

    Returns
    -------
    FilterResult
        ``extra["V"]`` holds ``C_t^{-1/2} X_t``.
    """
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.n or dist.n != spec.n:
        raise SpecError(f"data has shape {X.shape}; spec expects {spec.n} columns")
    if params.mu_bar.size != spec.n_eta:
        raise SpecError(f"{params.mu_bar.size} recursion parameters for {spec.n_eta} cells")
    r, c = spec.cells
    g, nu, m, consts, phi, psi, c1, c2 = _dist_arrays(dist)
    path, lls, Vs, fail = _corr_filter(
        X, params.mu_bar, params.beta, params.alpha, r, c, spec.canon_sizes, spec.canon_group, g, nu, m, consts, phi, c1, c2
    )
    _check_failure(fail, "correlation", raise_on_fail)
    return FilterResult(path, lls, {"V": Vs, "fail": fail})


def filter_factor_corr(F: ArrayLike, params: ScoreParams, dist: ConvTSpec, raise_on_fail: bool = False) -> FilterResult:
    """Score-driven filter for the factor correlation matrix ``C_{F,t}``.

    ``params.mu_bar`` has the vecl layout of an r x r matrix. The result's
    ``extra["U"]`` holds the orthogonalized factors ``C_{F,t}^{-1/2} F_t``.
    """
    F = np.ascontiguousarray(F, dtype=float)
    r = F.shape[1]
    spec = BlockSpec((1,) * r, structure="unrestricted")
    res = filter_corr(F, params, spec, dist, raise_on_fail)
    res.extra["U"] = res.extra.pop("V")
    return res


def corr_path(path: ArrayLike, spec: BlockSpec) -> NDArray:
    """Correlation matrices (T, n, n) along a filtered ``eta`` path."""
    path = np.asarray(path, dtype=float)
    r, c = spec.cells
    out = np.empty((path.shape[0], spec.n, spec.n))
    u = np.zeros(spec.canon_sizes.size)
    for t, e in enumerate(path):
        out[t], u, _ = _canon.canon_corr(np.ascontiguousarray(e), r, c, spec.canon_sizes, spec.canon_group, u)
    return out


# ---------------------------------------------------------------------------
# joint filter for loadings and idiosyncratic correlation
# ---------------------------------------------------------------------------
@njit(cache=True)
def joint_step(z, uf, zeta, n, r, lam, scaling, cells_k, cells_l, sizes, cgroup, dgroup, nu, m, consts, phi, psi, c1, c2, u0):
    """One observation of the joint model ``Z = rho'U + Lambda_omega C_e^{1/2} V``.

    Returns
    -------
    ll, grad_zeta, eps, grad_xi, info_xi (omega/eta block), e, u, status
        ``status`` is 0 on success, 1 if some ``omega`` is below the floor,
        2 if the unit-diagonal solve failed, 3 if the score overflowed.
    """
    q = cells_k.shape[0]
    p = n * r + q
    rho = np.empty((n, r))
    om = np.empty(n)
    Js = np.empty((n, r, r))
    status = 0
    for i in range(n):
        J, rh = jacobian_nb(zeta[i * r : (i + 1) * r])
        Js[i] = J
        rho[i] = rh
        om[i] = np.sqrt(max(1.0 - np.sum(rh * rh), 0.0))
        if om[i] < OMEGA_FLOOR:
            status = 1
    if status != 0:
        return -np.inf, np.zeros(p), np.zeros(p), np.zeros(2 * n + q), np.zeros((n + q, n + q)), np.zeros(n), u0, status
    eta = zeta[n * r :].copy()
    u, S, Sinv, logdet, dS, Xe, resid = _canon.canon_state(eta, cells_k, cells_l, sizes, cgroup, u0, True)
    if not resid < SOLVE_TOL:
        return -np.inf, np.zeros(p), np.zeros(p), np.zeros(2 * n + q), np.zeros((n + q, n + q)), np.zeros(n), u0, 2
    e = (z - rho @ uf) / om
    V = Sinv @ e
    llk, w = ct_terms(V, dgroup, nu, m, consts)
    ll = llk - np.sum(np.log(om)) - 0.5 * logdet
    wV = w * V
    gmu = (Sinv @ wV) / om
    # directions Xi^{-1} dXi for omega_i and eta_m
    X = np.empty((n + q, n, n))
    for i in range(n):
        for a in range(n):
            for b in range(n):
                X[i, a, b] = Sinv[a, i] * S[i, b] / om[i]
    for k in range(q):
        X[n + k] = Xe[k]
    g = np.zeros(n + q)
    for k in range(n + q):
        s = 0.0
        for a in range(n):
            for b in range(n):
                s += wV[a] * V[b] * X[k, a, b]
            s -= X[k, a, a]
        g[k] = s
    grad_xi = np.empty(2 * n + q)
    grad_xi[:n] = gmu
    grad_xi[n:] = g
    M = np.empty((2, r))
    grad_zeta = np.empty(p)
    for i in range(n):
        M[0] = uf @ Js[i]
        M[1] = -(rho[i] @ Js[i]) / om[i]
        grad_zeta[i * r : (i + 1) * r] = M[0] * gmu[i] + M[1] * g[i]
    grad_zeta[n * r :] = g[n:]
    info = information_from_X(X, c1, c2, dgroup, phi)
    if scaling == 0:
        return ll, grad_zeta, grad_zeta.copy(), grad_xi, info, e, u, 0
    if not np.all(np.isfinite(grad_xi)):
        return ll, grad_zeta, np.full(p, np.nan), grad_xi, info, e, u, 3
    eps = np.empty(p)
    # I_mu^{-1} grad_mu = Lambda_omega S diag(psi)^{-1} (w o V)
    wvp = np.empty(n)
    for a in range(n):
        wvp[a] = wV[a] / psi[dgroup[a]]
    smu = om * (S @ wvp)
    s = np.linalg.solve(info, g)
    xi2 = np.empty(2)
    for i in range(n):
        M[0] = uf @ Js[i]
        M[1] = -(rho[i] @ Js[i]) / om[i]
        li = lam[i] if scaling == 2 else 0.0
        Mp = regularized_inverse_nb(M, li, PINV_CUTOFF)
        xi2[0] = smu[i]
        xi2[1] = s[i]
        eps[i * r : (i + 1) * r] = Mp @ xi2
    eps[n * r :] = s[n:]
    return ll, grad_zeta, eps, grad_xi, info, e, u, 0


@njit(cache=True)
def _joint_filter(Z, Uf, mu, beta, alpha, r, lam, scaling, cells_k, cells_l, sizes, cgroup, dgroup, nu, m, consts, phi, psi, c1, c2):
    T = Z.shape[0]
    n = Z.shape[1]
    p = mu.shape[0]
    path = np.empty((T, p))
    lls = np.zeros(T)
    E = np.zeros((T, n))
    u = np.zeros(sizes.shape[0])
    zeta = mu.copy()
    fail = -1
    for t in range(T):
        path[t] = zeta
        ll, gz, eps, gx, info, e, u, status = joint_step(
            Z[t], Uf[t], zeta, n, r, lam, scaling, cells_k, cells_l, sizes, cgroup, dgroup, nu, m, consts, phi, psi, c1, c2, u
        )
        ok = status == 0 and np.isfinite(ll)
        for k in range(p):
            ok = ok and np.isfinite(eps[k])
        if not ok:
            fail = t
            lls[t:] = -np.inf
            for s in range(t + 1, T):
                path[s] = zeta
            break
        lls[t] = ll
        E[t] = e
        zeta = (1.0 - beta) * mu + beta * zeta + alpha * eps
    return path, lls, E, fail


def _lam_array(lam, n):
    if lam is None:
        return np.zeros(n)
    return np.ascontiguousarray(np.broadcast_to(np.asarray(lam, dtype=float), (n,)))


def filter_core_joint(
    Z: ArrayLike,
    U: ArrayLike,
    params: ScoreParams,
    spec: BlockSpec,
    dist: ConvTSpec,
    raise_on_fail: bool = False,
) -> FilterResult:
    """Joint filter for all loadings and the idiosyncratic correlation.

    The dynamic parameter stacks ``tau_1, ..., tau_n`` (r entries each)
    followed by ``eta``.

    Returns
    -------
    FilterResult
        ``extra["e"]`` holds the idiosyncratic shocks ``(Z - rho'U) / omega``.
    """
    Z = np.ascontiguousarray(Z, dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    T, n = Z.shape
    r = U.shape[1]
    if U.shape[0] != T or spec.n != n or dist.n != n:
        raise SpecError("inconsistent dimensions between Z, U, block spec and distribution")
    if params.mu_bar.size != n * r + spec.n_eta:
        raise SpecError(f"expected {n * r + spec.n_eta} recursion parameters, got {params.mu_bar.size}")
    rr, cc = spec.cells
    g, nu, m, consts, phi, psi, c1, c2 = _dist_arrays(dist)
    path, lls, E, fail = _joint_filter(
        Z, U, params.mu_bar, params.beta, params.alpha, r, _lam_array(params.lam, n), SCALINGS[params.scaling],
        rr, cc, spec.canon_sizes, spec.canon_group, g, nu, m, consts, phi, psi, c1, c2,
    )
    _check_failure(fail, "joint", raise_on_fail)
    return FilterResult(path, lls, {"e": E, "fail": fail, "r": r})


@dataclass
class JointScore:
    """Score pieces of the joint model at one observation.

    ``xi`` is ordered ``(mu_1..mu_n, omega_1..omega_n, eta)`` and ``zeta`` is
    ``(tau_1, ..., tau_n, eta)``.
    """

    loglik: float
    grad_zeta: NDArray
    grad_xi: NDArray
    info_xi: NDArray
    M: NDArray
    Theta: NDArray
    e: NDArray
    n: int
    r: int

    @property
    def Pi(self) -> NDArray:
        """``d xi / d zeta'``."""
        n, r = self.n, self.r
        q = self.grad_zeta.size - n * r
        P = np.zeros((2 * n + q, n * r + q))
        for i in range(n):
            P[i, i * r : (i + 1) * r] = self.M[i, 0]
            P[n + i, i * r : (i + 1) * r] = self.M[i, 1]
        P[2 * n :, n * r :] = np.eye(q)
        return P

    @property
    def info_zeta(self) -> NDArray:
        P = self.Pi
        return P.T @ self.info_xi @ P


def _xi_info(info_oe: NDArray, n: int, Xi: NDArray, psi_coord: NDArray) -> NDArray:
    q = info_oe.shape[0] - n
    Xinv = np.linalg.inv(Xi)
    I_mu = Xinv.T @ (psi_coord[:, None] * Xinv)
    out = np.zeros((2 * n + q, 2 * n + q))
    out[:n, :n] = I_mu
    out[n:, n:] = info_oe
    return out


def joint_score(
    z: ArrayLike,
    u: ArrayLike,
    tau: ArrayLike,
    eta: ArrayLike,
    spec: BlockSpec,
    dist: ConvTSpec,
) -> JointScore:
    """Score and information of the joint model at a single observation.

    Parameters
    ----------
    z : array_like (n,)
        Standardized asset returns.
    u : array_like (r,)
        Orthogonalized factors.
    tau : array_like (n, r)
        Loading parameters, one row per asset.
    eta : array_like
        Log-domain idiosyncratic correlation parameter.
    """
    z = np.ascontiguousarray(z, dtype=float)
    u = np.ascontiguousarray(u, dtype=float)
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    n, r = tau.shape
    eta = np.ascontiguousarray(np.atleast_1d(eta), dtype=float)
    zeta = np.concatenate([tau.ravel(), eta])
    rr, cc = spec.cells
    g, nu, m, consts, phi, psi, c1, c2 = _dist_arrays(dist)
    ll, gz, eps, gx, info, e, uu, status = joint_step(
        z, u, zeta, n, r, np.zeros(n), 0, rr, cc, spec.canon_sizes, spec.canon_group, g, nu, m, consts, phi, psi, c1, c2,
        np.zeros(spec.canon_sizes.size),
    )
    if status == 1:
        raise DomainError("a loading vector is at the boundary (omega below 1e-8)")
    if status == 2:
        raise DomainError("idiosyncratic correlation solve failed")
    Ms = np.empty((n, 2, r))
    for i in range(n):
        J, rho = jacobian_nb(tau[i])
        om = math.sqrt(1 - rho @ rho)
        Ms[i, 0] = u @ J
        Ms[i, 1] = -(rho @ J) / om
    _, S, Sinv, _, dS, _, _ = _canon.canon_state(eta, rr, cc, spec.canon_sizes, spec.canon_group, uu, True)
    om = np.array([math.sqrt(1 - rho_of_tau_nb(t) @ rho_of_tau_nb(t)) for t in tau])
    Xi = om[:, None] * S
    q = eta.size
    Theta = np.empty((n * n, n + q))
    for i in range(n):
        D = np.zeros((n, n))
        D[i] = S[i]
        Theta[:, i] = D.ravel(order="F")
    for k in range(q):
        Theta[:, n + k] = (om[:, None] * dS[k]).ravel(order="F")
    info_xi = _xi_info(info, n, Xi, dist.psi[dist.group_of])
    return JointScore(ll, gz, gx, info_xi, Ms, Theta, e, n, r)


def scaled_innovation(js: JointScore, scaling: str, lam: ArrayLike | float = 0.0) -> NDArray:
    """Scaled score of the joint model.

    ``identity`` returns the raw score, ``mp`` applies the Moore-Penrose
    inverse of each asset's sensitivity matrix to ``I_xi^{-1} grad_xi`` and
    ``tikhonov`` the regularized inverse with penalty ``lam``.
    """
    if scaling not in SCALINGS:
        raise SpecError(f"unknown scaling {scaling!r}")
    if scaling == "identity":
        return js.grad_zeta.copy()
    n, r = js.n, js.r
    lam = _lam_array(lam, n) if scaling == "tikhonov" else np.zeros(n)
    s = np.linalg.solve(js.info_xi, js.grad_xi)
    eps = np.empty_like(js.grad_zeta)
    for i in range(n):
        Mp = regularized_inverse_nb(np.ascontiguousarray(js.M[i]), float(lam[i]), PINV_CUTOFF)
        eps[i * r : (i + 1) * r] = Mp @ np.array([s[i], s[n + i]])
    eps[n * r :] = s[2 * n :]
    return eps


# ---------------------------------------------------------------------------
# decoupled loading filter (one asset)
# ---------------------------------------------------------------------------
@njit(cache=True)
def loading_step(z, uf, tau, nu, lam, scaling):
    """Per-asset log density, score and scaled score with ``e ~ t_nu`` (``nu = inf``: Gaussian)."""
    r = tau.shape[0]
    J, rho = jacobian_nb(tau)
    om = np.sqrt(max(1.0 - np.sum(rho * rho), 0.0))
    if om < OMEGA_FLOOR:
        return -np.inf, np.zeros(r), np.zeros(r), 0.0, 1
    e = (z - np.sum(rho * uf)) / om
    if np.isinf(nu):
        W = 1.0
        ll = -0.5 * np.log(2 * np.pi) - np.log(om) - 0.5 * e * e
        ia = 1.0
        ib = 2.0
    else:
        W = (nu + 1.0) / (nu - 2.0 + e * e)
        c = _lgamma((nu + 1.0) / 2.0) - _lgamma(nu / 2.0) - 0.5 * np.log((nu - 2.0) * np.pi)
        ll = c - np.log(om) - 0.5 * (nu + 1.0) * np.log1p(e * e / (nu - 2.0))
        ia = (nu + 1.0) * nu / ((nu + 3.0) * (nu - 2.0))
        ib = 2.0 * nu / (nu + 3.0)
    g_mu = W * e / om
    g_om = (W * e * e - 1.0) / om
    M = np.empty((2, r))
    M[0] = uf @ J
    M[1] = -(rho @ J) / om
    grad = M[0] * g_mu + M[1] * g_om
    if scaling == 0:
        return ll, grad, grad.copy(), e, 0
    s = np.empty(2)
    s[0] = om * om * g_mu / ia
    s[1] = om * om * g_om / ib
    li = lam if scaling == 2 else 0.0
    eps = regularized_inverse_nb(M, li, PINV_CUTOFF) @ s
    return ll, grad, eps, e, 0


@njit(cache=True)
def _lgamma(x):
    return math.lgamma(x)


@njit(cache=True)
def _loading_filter(z, Uf, mu, beta, alpha, nu, lam, scaling):
    T = z.shape[0]
    r = mu.shape[0]
    path = np.empty((T, r))
    lls = np.zeros(T)
    E = np.zeros(T)
    tau = mu.copy()
    fail = -1
    for t in range(T):
        path[t] = tau
        ll, grad, eps, e, status = loading_step(z[t], Uf[t], tau, nu, lam, scaling)
        ok = status == 0 and np.isfinite(ll)
        for k in range(r):
            ok = ok and np.isfinite(eps[k])
        if not ok:
            fail = t
            lls[t:] = -np.inf
            for s in range(t + 1, T):
                path[s] = tau
            break
        lls[t] = ll
        E[t] = e
        tau = (1.0 - beta) * mu + beta * tau + alpha * eps
    return path, lls, E, fail


def loading_score(z: float, u: ArrayLike, tau: ArrayLike, nu: float) -> dict:
    """Per-asset score pieces: ``grad_xi``, ``info_xi``, ``grad_tau``, ``info_tau``, ``M``.

    ``xi = (mu, omega)`` with ``mu = rho'U``.
    """
    u = np.ascontiguousarray(u, dtype=float)
    tau = np.ascontiguousarray(np.atleast_1d(tau), dtype=float)
    J, rho = jacobian_nb(tau)
    om = math.sqrt(1 - rho @ rho)
    if om < OMEGA_FLOOR:
        raise DomainError("loading vector at the boundary")
    e = (z - rho @ u) / om
    if math.isinf(nu):
        W, ia, ib = 1.0, 1.0, 2.0
    else:
        W = (nu + 1) / (nu - 2 + e * e)
        ia = (nu + 1) * nu / ((nu + 3) * (nu - 2))
        ib = 2 * nu / (nu + 3)
    grad_xi = np.array([W * e, W * e * e - 1]) / om
    info_xi = np.diag([ia, ib]) / om**2
    M = np.vstack([u @ J, -(rho @ J) / om])
    return {
        "e": e,
        "grad_xi": grad_xi,
        "info_xi": info_xi,
        "M": M,
        "grad_tau": M.T @ grad_xi,
        "info_tau": M.T @ info_xi @ M,
        "J": J,
    }


def filter_loading_decoupled(
    z: ArrayLike,
    U: ArrayLike,
    params: ScoreParams,
    nu: float,
    raise_on_fail: bool = False,
) -> FilterResult:
    """Loading filter for one asset with ``Z_i | U ~ t_nu(rho'U, omega^2)``.

    Returns
    -------
    FilterResult
        ``extra["e"]`` holds the residuals ``(Z_i - rho_i'U) / omega_i``.
    """
    z = np.ascontiguousarray(z, dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    if not nu > 2:
        raise SpecError("degrees of freedom must exceed 2")
    lam = 0.0 if params.lam is None else float(np.atleast_1d(params.lam)[0])
    path, lls, E, fail = _loading_filter(
        z, U, params.mu_bar, params.beta, params.alpha, float(nu), lam, SCALINGS[params.scaling]
    )
    _check_failure(fail, "loading", raise_on_fail)
    return FilterResult(path, lls, {"e": E, "fail": fail})


# ---------------------------------------------------------------------------
# equicorrelation blocks
# ---------------------------------------------------------------------------
@njit(cache=True)
def _equi_rho(eta, n):
    x = n * eta
    if x > 0:
        ex = np.exp(-x)
        return (1.0 - ex) / (1.0 + (n - 1) * ex)
    ex = np.expm1(x)
    return ex / (ex + n)


@njit(cache=True)
def equi_mt_step(x, eta, nu):
    """Equicorrelation block with a multivariate t (``nu = inf``: Gaussian)."""
    n = x.shape[0]
    rho = _equi_rho(eta, n)
    a = 1.0 + (n - 1) * rho
    b = 1.0 - rho
    xx = np.sum(x * x)
    s = np.sum(x)
    Q = xx / b - rho * s * s / (b * a)
    logdet = np.log(a) + (n - 1) * np.log(b)
    if np.isinf(nu):
        W = 1.0
        phi = 1.0
        ll = -0.5 * n * np.log(2 * np.pi) - 0.5 * logdet - 0.5 * Q
    else:
        W = (nu + n) / (nu - 2.0 + Q)
        phi = (nu + n) / (nu + n + 2.0)
        c = _lgamma((nu + n) / 2.0) - _lgamma(nu / 2.0) - 0.5 * n * np.log((nu - 2.0) * np.pi)
        ll = c - 0.5 * logdet - 0.5 * (nu + n) * np.log1p(Q / (nu - 2.0))
    g_rho = -0.5 * ((n - 1) / a - (n - 1) / b + W * (xx / (b * b) - (1.0 + (n - 1) * rho * rho) * s * s / (b * b * a * a)))
    i_rho = (
        0.25 * (3 * phi - 1) * (n - 1) ** 2 / (a * a)
        + 0.5 * phi * (n - 1) / (b * b)
        + 0.25 * (1 - phi) * (1 - (n + 1) * rho) * (n - 1) ** 2 / (a * b * b)
    )
    # d eta / d rho
    jac = 1.0 / (a * b)
    return ll, g_rho / jac, i_rho / (jac * jac), rho


@njit(cache=True)
def equi_ht_step(x, eta, nu):
    """Equicorrelation block with independent univariate t shocks."""
    n = x.shape[0]
    rho = _equi_rho(eta, n)
    a = 1.0 + (n - 1) * rho
    b = 1.0 - rho
    xbar = np.mean(x)
    logdet = np.log(a) + (n - 1) * np.log(b)
    ll = -0.5 * logdet
    g = -0.5 * ((n - 1) / a - (n - 1) / b)
    sphi = 0.0
    spsi = 0.0
    for i in range(n):
        V = (x[i] - xbar) / np.sqrt(b) + xbar / np.sqrt(a)
        dV = 0.5 * (x[i] - xbar) / b**1.5 - 0.5 * (n - 1) * xbar / a**1.5
        if np.isinf(nu[i]):
            W = 1.0
            ll += -0.5 * np.log(2 * np.pi) - 0.5 * V * V
            ph = 1.0
            ps = 1.0
        else:
            W = (nu[i] + 1.0) / (nu[i] - 2.0 + V * V)
            c = _lgamma((nu[i] + 1.0) / 2.0) - _lgamma(nu[i] / 2.0) - 0.5 * np.log((nu[i] - 2.0) * np.pi)
            ll += c - 0.5 * (nu[i] + 1.0) * np.log1p(V * V / (nu[i] - 2.0))
            ph = (nu[i] + 1.0) / (nu[i] + 3.0)
            ps = ph * nu[i] / (nu[i] - 2.0)
        g -= W * V * dV
        sphi += ph
        spsi += ps
    A1 = 3 * sphi + (n - 1) * spsi - 2 * n
    A2 = (3 * sphi - n) * (n - 1) + spsi + n
    A3 = spsi + 2 * n - 3 * sphi
    n2 = n * n
    i_rho = (
        0.25 * (n2 + A1) * (n - 1) ** 2 / (n2 * a * a)
        + 0.25 * (n - 1) * A2 / (n2 * b * b)
        + 0.5 * (n - 1) ** 2 * A3 / (n2 * a * b)
    )
    jac = 1.0 / (a * b)
    return ll, g / jac, i_rho / (jac * jac), rho


@njit(cache=True)
def _equi_filter(X, mu, beta, alpha, nu, ht):
    T = X.shape[0]
    path = np.empty(T)
    lls = np.zeros(T)
    eta = mu
    fail = -1
    for t in range(T):
        path[t] = eta
        if ht:
            ll, g, info, rho = equi_ht_step(X[t], eta, nu)
        else:
            ll, g, info, rho = equi_mt_step(X[t], eta, nu[0])
        eps = g / info if info > 0.0 else np.nan
        if not (np.isfinite(ll) and np.isfinite(eps)):
            fail = t
            lls[t:] = -np.inf
            path[t + 1 :] = eta
            break
        lls[t] = ll
        eta = (1.0 - beta) * mu + beta * eta + alpha * eps
    return path, lls, fail


def _equi_check(X):
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise SpecError("an equicorrelation block needs at least two columns")
    return X


def equicorr_score_mt(x: ArrayLike, eta: float, nu: float) -> tuple[float, float]:
    """Log density and ``d loglik / d eta`` of an equicorrelation multivariate t."""
    ll, g, _, rho = equi_mt_step(np.ascontiguousarray(x, dtype=float), float(eta), float(nu))
    return ll, g


def equicorr_information_mt(n: int, eta: float, nu: float) -> float:
    """Information for ``eta`` of an n-dimensional equicorrelation multivariate t."""
    return float(equi_mt_step(np.zeros(n), float(eta), float(nu))[2])


def equicorr_score_ht(x: ArrayLike, eta: float, nu: ArrayLike) -> tuple[float, float]:
    ll, g, _, _ = equi_ht_step(np.ascontiguousarray(x, dtype=float), float(eta), np.ascontiguousarray(nu, dtype=float))
    return ll, g


def equicorr_information_ht(eta: float, nu: ArrayLike) -> float:
    nu = np.ascontiguousarray(nu, dtype=float)
    return float(equi_ht_step(np.zeros(nu.size), float(eta), nu)[2])


def filter_equicorr_mt(X: ArrayLike, params: ScoreParams, nu: float, raise_on_fail: bool = False) -> FilterResult:
    """Filter for one equicorrelation block with multivariate t shocks."""
    X = _equi_check(X)
    path, lls, fail = _equi_filter(
        X, float(params.mu_bar[0]), float(params.beta[0]), float(params.alpha[0]), np.array([float(nu)]), False
    )
    _check_failure(fail, "equicorrelation", raise_on_fail)
    return FilterResult(path[:, None], lls, {"fail": fail})


def filter_equicorr_ht(X: ArrayLike, params: ScoreParams, nu: ArrayLike, raise_on_fail: bool = False) -> FilterResult:
    """Filter for one equicorrelation block with independent univariate t shocks."""
    X = _equi_check(X)
    nu = np.ascontiguousarray(np.broadcast_to(np.asarray(nu, dtype=float), (X.shape[1],)))
    path, lls, fail = _equi_filter(
        X, float(params.mu_bar[0]), float(params.beta[0]), float(params.alpha[0]), nu, True
    )
    _check_failure(fail, "equicorrelation", raise_on_fail)
    return FilterResult(path[:, None], lls, {"fail": fail})


def sector_dist(dist: ConvTSpec, spec: BlockSpec, j: int) -> ConvTSpec:
    """Restriction of a group-aligned distribution to sector ``j``."""
    g0, g1 = spec.sectors[j]
    if dist.kind == "gauss":
        return ConvTSpec.gauss(int(sum(spec.group_sizes[g0:g1])))
    if dist.kind == "ct":
        if tuple(dist.m) != tuple(spec.group_sizes):
            raise SpecError("convolution-t blocks must coincide with the asset groups")
        return ConvTSpec.ct(spec.group_sizes[g0:g1], dist.nu[g0:g1])
    if dist.kind == "ht":
        sl = spec.sector_assets(j)
        return ConvTSpec.ht(dist.nu[sl])
    raise SpecError(f"{dist.kind} shocks do not factorize across sectors")


def filter_sector_block(
    e: ArrayLike,
    params: ScoreParams,
    spec: BlockSpec,
    dist: ConvTSpec,
    raise_on_fail: bool = False,
) -> list[FilterResult]:
    """Filter each sector of a sparse (or diagonal) block structure separately.

    ``params.mu_bar`` follows the full ``eta`` layout of ``spec``. Sectors
    are independent for Gaussian, group-aligned CT and HT shocks, so the
    total log-likelihood is the sum over the returned results.

    Raises
    ------
    SpecError
        For multivariate t shocks, which couple all sectors.
    """
    if dist.kind == "mt":
        raise SpecError("multivariate t shocks do not factorize across sectors")
    if spec.structure not in ("sbc", "dbc"):
        raise SpecError("sector factorization needs a sparse or diagonal block structure")
    e = np.ascontiguousarray(e, dtype=float)
    out = []
    for j in range(len(spec.sectors)):
        sub = spec.sector_spec(j)
        idx = spec.sector_eta(j)
        sp = ScoreParams(params.mu_bar[idx], params.beta[idx], params.alpha[idx]) if idx.size else None
        sl = spec.sector_assets(j)
        d = sector_dist(dist, spec, j)
        if idx.size == 0:
            # only singleton groups: no correlation left to filter
            x = e[:, sl]
            g, nu, m, consts, phi, psi, c1, c2 = _dist_arrays(d)
            lls = np.array([ct_terms(np.ascontiguousarray(row), g, nu, m, consts)[0] for row in x])
            out.append(FilterResult(np.zeros((e.shape[0], 0)), lls, {"V": x, "fail": -1}))
            continue
        out.append(filter_corr(e[:, sl], sp, sub, d, raise_on_fail))
    return out
