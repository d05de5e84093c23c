"""
Variation-free parametrization of factor loadings.

Asset ``i`` loads on the orthogonalized factors through ``rho_i`` with
``rho_i' rho_i < 1`` and ``omega_i = sqrt(1 - rho_i' rho_i)``. The map

    tau = artanh(|rho|) rho / |rho|

sends the open unit ball onto all of R^r, so ``tau`` can follow an
unrestricted recursion. For r = 1 it is the Fisher transform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.typing import ArrayLike, NDArray

from .exceptions import ConditioningError, DomainError

__all__ = [
    "LoadingState",
    "tau_of_rho",
    "rho_of_tau",
    "tau_jacobian",
    "sensitivity_M",
    "moore_penrose_Mplus",
    "tikhonov_Mplus",
    "stack_rho",
]

SERIES_TOL = 1e-6
OMEGA_FLOOR = 1e-8
PINV_CUTOFF = 1e-12


@njit(cache=True)
def _rho_scale(x):
    # tanh(x) / x
    if x < SERIES_TOL:
        return 1.0 - x * x / 3.0
    return np.tanh(x) / x


@njit(cache=True)
def _tau_scale(y):
    # artanh(y) / y
    if y < SERIES_TOL:
        return 1.0 + y * y / 3.0
    return np.arctanh(y) / y


@njit(cache=True)
def rho_of_tau_nb(tau):
    x = np.sqrt(np.sum(tau * tau))
    return tau * _rho_scale(x)


@njit(cache=True)
def jacobian_nb(tau):
    """``d rho / d tau'`` and ``rho``."""
    r = tau.shape[0]
    x = np.sqrt(np.sum(tau * tau))
    s = _rho_scale(x)
    rho = tau * s
    rr = np.sum(rho * rho)
    J = np.eye(r) * s
    if x > 0.0:
        # radial eigenvalue 1 - rho'rho, orthogonal eigenvalue tanh(x)/x
        c = (1.0 - rr - s) / (x * x)
        for i in range(r):
            for j in range(r):
                J[i, j] += c * tau[i] * tau[j]
    return J, rho


@njit(cache=True)
def sensitivity_nb(tau, U):
    """Rows ``d mu / d tau'`` and ``d omega / d tau'`` for ``mu = rho'U``."""
    J, rho = jacobian_nb(tau)
    r = tau.shape[0]
    om = np.sqrt(max(1.0 - np.sum(rho * rho), 0.0))
    M = np.empty((2, r))
    M[0] = U @ J
    M[1] = -(rho @ J) / om
    return M, rho, om


@njit(cache=True)
def regularized_inverse_nb(M, lam, cutoff):
    """``M' (M M' + lam I)^+`` for a 2 x r matrix ``M``.

    Eigenvalues of ``M M' + lam I`` at or below ``cutoff`` times the largest
    one are treated as zero. The 2 x 2 eigenproblem is solved in closed form.
    """
    r = M.shape[1]
    p = lam
    q = lam
    s = 0.0
    for k in range(r):
        p += M[0, k] * M[0, k]
        q += M[1, k] * M[1, k]
        s += M[0, k] * M[1, k]
    m = 0.5 * (p + q)
    h = 0.5 * (p - q)
    d = np.sqrt(h * h + s * s)
    wmax = m + d
    inv = np.zeros((2, 2))
    if wmax <= 0.0:
        return M.T @ inv
    det = p * q - s * s
    wmin = det / wmax
    if wmin > cutoff * wmax:
        inv[0, 0] = q / det
        inv[1, 1] = p / det
        inv[0, 1] = -s / det
        inv[1, 0] = -s / det
    else:
        # rank one: keep the leading eigenvector
        if h >= 0.0:
            v0 = wmax - q
            v1 = s
        else:
            v0 = s
            v1 = wmax - p
        nv = v0 * v0 + v1 * v1
        if nv > 0.0:
            inv[0, 0] = v0 * v0 / (nv * wmax)
            inv[1, 1] = v1 * v1 / (nv * wmax)
            inv[0, 1] = v0 * v1 / (nv * wmax)
            inv[1, 0] = inv[0, 1]
    return M.T @ inv


@dataclass
class LoadingState:
    """Loadings of one asset on the orthogonalized factors.

    Build from either representation with :meth:`from_tau` or
    :meth:`from_rho`.
    """

    tau: NDArray
    rho: NDArray
    omega: float

    @property
    def r(self) -> int:
        return self.tau.size

    @classmethod
    def from_tau(cls, tau: ArrayLike) -> "LoadingState":
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        rho = rho_of_tau(tau)
        return cls(tau=tau, rho=rho, omega=float(np.sqrt(1.0 - rho @ rho)))

    @classmethod
    def from_rho(cls, rho: ArrayLike) -> "LoadingState":
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        return cls(tau=tau_of_rho(rho), rho=rho, omega=float(np.sqrt(1.0 - rho @ rho)))


def tau_of_rho(rho: ArrayLike) -> NDArray:
    """Unconstrained image of a loading vector with ``|rho| < 1``.

    Examples
    --------
    >>> tau_of_rho([0.6, 0.0]).round(6)
    array([0.693147, 0.      ])
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    y2 = float(rho @ rho)
    if not y2 < 1.0:
        raise DomainError(f"loading vector has squared norm {y2:.6g} >= 1")
    return rho * _tau_scale(np.sqrt(y2))


def rho_of_tau(tau: ArrayLike) -> NDArray:
    """Loading vector for an unconstrained ``tau``; always inside the unit ball."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    return rho_of_tau_nb(tau)


def tau_jacobian(tau: ArrayLike) -> NDArray:
    """Symmetric Jacobian ``d rho / d tau'``.

    Its eigenvalues are ``1 - rho'rho`` along ``tau`` and
    ``|rho| / |tau|`` on the orthogonal complement.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    return jacobian_nb(tau)[0]


def _state_tau(state) -> NDArray:
    if isinstance(state, LoadingState):
        return np.asarray(state.tau, dtype=float)
    return np.atleast_1d(np.asarray(state, dtype=float))


def sensitivity_M(state, U: ArrayLike) -> NDArray:
    """2 x r sensitivity of ``(rho'U, omega)`` to ``tau``.

    Parameters
    ----------
    state : LoadingState or array_like
        Loading state, or ``tau`` directly.
    U : array_like
        Orthogonalized factor values.

    Raises
    ------
    DomainError
        If ``omega`` is below ``1e-8``.
    """
    tau = _state_tau(state)
    M, rho, om = sensitivity_nb(tau, np.asarray(U, dtype=float))
    if om < OMEGA_FLOOR:
        raise DomainError(f"omega = {om:.3e} is at the boundary of the loading domain")
    return M


def moore_penrose_Mplus(state, U: ArrayLike, rel_tol: float = 1e-14) -> NDArray:
    """Moore-Penrose inverse of the sensitivity matrix.

    For r >= 2 the closed form has denominator
    ``U'U rho'rho - (U'rho)^2``, which vanishes when ``U`` is parallel to
    ``rho``. For r = 1 the matrix is a 2 x 1 column and the inverse is
    ``(M'M)^{-1} M'``.

    Raises
    ------
    ConditioningError
        If ``U`` is (numerically) parallel to ``rho`` with r >= 2.
    """
    tau = _state_tau(state)
    U = np.asarray(U, dtype=float)
    M = sensitivity_M(tau, U)
    if tau.size >= 2:
        rho = rho_of_tau(tau)
        uu, rr, ur = U @ U, rho @ rho, U @ rho
        den = uu * rr - ur * ur
        if not den > rel_tol * uu * rr:
            raise ConditioningError(
                f"factor vector is parallel to the loading vector (relative denominator {den / max(uu * rr, 1e-300):.3e})"
            )
    return regularized_inverse_nb(M, 0.0, PINV_CUTOFF)


def tikhonov_Mplus(state, U: ArrayLike, lam: float) -> NDArray:
    """Regularized inverse ``M'(M M' + lam I)^+``.

    Bounded uniformly in ``U`` for ``lam > 0``; coincides with the
    Moore-Penrose inverse at ``lam = 0``.
    """
    if lam < 0:
        raise DomainError("penalty must be non-negative")
    tau = _state_tau(state)
    M = sensitivity_M(tau, np.asarray(U, dtype=float))
    return regularized_inverse_nb(M, float(lam), PINV_CUTOFF)


def stack_rho(tau: ArrayLike, n: int, r: int) -> tuple[NDArray, NDArray]:
    """Loadings matrix (n x r) and ``omega`` (n,) from stacked ``tau``."""
    tau = np.asarray(tau, dtype=float).reshape(n, r)
    rho = np.vstack([rho_of_tau_nb(t) for t in tau])
    return rho, np.sqrt(1.0 - np.sum(rho * rho, axis=1))
