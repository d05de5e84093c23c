"""
Dense transforms of correlation matrices.

The log-domain parametrization maps a positive definite correlation matrix
``C`` to ``gamma = vecl(log C)``, the strict lower triangle of its matrix
logarithm stacked column by column. The map is one-to-one onto the whole
Euclidean space, so ``gamma`` can follow unrestricted dynamics.

All matrix functions are computed from a symmetric eigendecomposition.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import ConvergenceError, DomainError

__all__ = [
    "IndexMaps",
    "vecl",
    "vech",
    "unvecl",
    "matrix_log",
    "matrix_exp",
    "sym_sqrt",
    "gamma_of_corr",
    "corr_of_gamma",
    "exp_divided_differences",
    "gamma_jacobian",
    "dsqrt_dgamma",
    "dcorr_dgamma",
    "random_corr",
    "check_corr",
]

EIG_FLOOR = 1e-12
REPEATED_TOL = 1e-10


# ---------------------------------------------------------------------------
# index bookkeeping
# ---------------------------------------------------------------------------
def _lower_pairs(n: int, strict: bool = True) -> tuple[NDArray, NDArray]:
    """Row and column indices of the lower triangle in column-major order."""
    rows, cols = [], []
    off = 1 if strict else 0
    for j in range(n):
        for i in range(j + off, n):
            rows.append(i)
            cols.append(j)
    return np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp)


def vecl(m: ArrayLike) -> NDArray:
    """Strict lower triangle of a square matrix, column-major."""
    m = np.asarray(m)
    r, c = _lower_pairs(m.shape[0])
    return m[r, c]


def vech(m: ArrayLike) -> NDArray:
    """Lower triangle including the diagonal, column-major."""
    m = np.asarray(m)
    r, c = _lower_pairs(m.shape[0], strict=False)
    return m[r, c]


def unvecl(v: ArrayLike, n: int | None = None, diag: ArrayLike | float = 0.0) -> NDArray:
    """Symmetric matrix whose strict lower triangle is ``v``."""
    v = np.asarray(v, dtype=float)
    if n is None:
        n = _dim_from_vecl(v.size)
    out = np.zeros((n, n))
    r, c = _lower_pairs(n)
    out[r, c] = v
    out[c, r] = v
    out[np.diag_indices(n)] = diag
    return out


def _dim_from_vecl(k: int) -> int:
    n = int(round((1 + np.sqrt(1 + 8 * k)) / 2))
    if n * (n - 1) // 2 != k:
        raise DomainError(f"length {k} is not n(n-1)/2 for any integer n")
    return n


@dataclass(frozen=True)
class IndexMaps:
    """Index permutations and selections acting on ``vec`` of an n x n matrix.

    ``vec`` is column-major, so entry ``(i, j)`` sits at position ``i + n*j``.

    Attributes
    ----------
    n : int
        Matrix dimension.
    commutation : ndarray
        Permutation ``p`` with ``vec(M')[k] = vec(M)[p[k]]`` (the commutation
        matrix ``K_n`` as an index map).
    lower, upper : ndarray
        Positions of the strict-lower entries ``(i, j)`` and of their mirror
        images ``(j, i)``, both in vecl order.
    diag : ndarray
        Positions of the diagonal.
    half : ndarray
        Positions of the lower triangle with diagonal (vech order).
    """

    n: int
    commutation: NDArray = field(repr=False)
    lower: NDArray = field(repr=False)
    upper: NDArray = field(repr=False)
    diag: NDArray = field(repr=False)
    half: NDArray = field(repr=False)

    @classmethod
    def build(cls, n: int) -> "IndexMaps":
        idx = np.arange(n * n).reshape(n, n, order="F")
        r, c = _lower_pairs(n)
        rh, ch = _lower_pairs(n, strict=False)
        return cls(
            n=n,
            commutation=idx.T.ravel(order="F"),
            lower=idx[r, c],
            upper=idx[c, r],
            diag=idx[np.arange(n), np.arange(n)],
            half=idx[rh, ch],
        )

    def _select(self, pos: NDArray) -> NDArray:
        out = np.zeros((pos.size, self.n * self.n))
        out[np.arange(pos.size), pos] = 1.0
        return out

    def commutation_matrix(self) -> NDArray:
        return self._select(self.commutation)

    def E_l(self) -> NDArray:
        return self._select(self.lower)

    def E_u(self) -> NDArray:
        return self._select(self.upper)

    def E_d(self) -> NDArray:
        return self._select(self.diag)

    def L(self) -> NDArray:
        """vech selector: ``vech(A) = L vec(A)``."""
        return self._select(self.half)


# ---------------------------------------------------------------------------
# matrix functions
# ---------------------------------------------------------------------------
def check_corr(c: ArrayLike, tol: float = 1e-12) -> NDArray:
    """Validate a correlation matrix and return it as a float array.

    Raises
    ------
    DomainError
        If ``c`` is not square, not symmetric, or lacks a unit diagonal.
    """
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DomainError("matrix has non-finite entries")
    if np.max(np.abs(c - c.T), initial=0.0) > tol:
        raise DomainError("matrix is not symmetric")
    if np.max(np.abs(np.diag(c) - 1.0), initial=0.0) > tol:
        raise DomainError("matrix does not have a unit diagonal")
    return c


def _eigh_pd(c: NDArray) -> tuple[NDArray, NDArray]:
    lam, q = np.linalg.eigh((c + c.T) / 2)
    if lam[0] <= EIG_FLOOR:
        raise DomainError(f"matrix is not positive definite: smallest eigenvalue {lam[0]:.3e}")
    return lam, q


def matrix_log(c: ArrayLike) -> NDArray:
    """Matrix logarithm of a symmetric positive definite matrix.

    Parameters
    ----------
    c : array_like
        Symmetric positive definite matrix. A unit diagonal is not required.

    Returns
    -------
    ndarray
        Symmetric matrix ``L`` with ``expm(L) = c``.
    """
    lam, q = _eigh_pd(np.asarray(c, dtype=float))
    return (q * np.log(lam)) @ q.T


def matrix_exp(m: ArrayLike) -> NDArray:
    """Exponential of a symmetric matrix."""
    m = np.asarray(m, dtype=float)
    a, q = np.linalg.eigh((m + m.T) / 2)
    if a[-1] > 700:
        raise DomainError(f"matrix exponential overflows: largest eigenvalue {a[-1]:.3e}")
    return (q * np.exp(a)) @ q.T


def sym_sqrt(c: ArrayLike) -> NDArray:
    """Symmetric positive definite square root."""
    lam, q = _eigh_pd(np.asarray(c, dtype=float))
    return (q * np.sqrt(lam)) @ q.T


def gamma_of_corr(c: ArrayLike) -> NDArray:
    """Log-domain parameter ``vecl(log C)`` of a correlation matrix.

    Examples
    --------
    >>> gamma_of_corr([[1.0, 0.5], [0.5, 1.0]])
    array([0.54930614])
    """
    return vecl(matrix_log(check_corr(c, tol=1e-10)))


def corr_of_gamma(
    g: ArrayLike,
    tol: float = 1e-12,
    max_iter: int = 500,
    x0: ArrayLike | None = None,
) -> NDArray:
    """Correlation matrix with ``vecl(log C) = g``.

    The diagonal ``x`` of the log-domain matrix is updated by
    ``x <- x - log(diag(expm(L(x))))`` until the exponential has a unit
    diagonal.

    Parameters
    ----------
    g : array_like
        Log-domain off-diagonal entries, length ``n(n-1)/2``.
    tol : float
        Convergence tolerance on the max-abs diagonal residual
        ``|log diag(expm(L))|``.
    max_iter : int
        Iteration cap.
    x0 : array_like, optional
        Starting diagonal (warm start). Zeros by default.

    Returns
    -------
    ndarray
        Correlation matrix.

    Raises
    ------
    ConvergenceError
        If the residual is above ``tol`` after ``max_iter`` iterations.
    """
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise DomainError("gamma has non-finite entries")
    n = _dim_from_vecl(g.size)
    if n == 1:
        return np.ones((1, 1))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    L = unvecl(g, n)
    resid = np.inf
    for it in range(1, max_iter + 1):
        L[np.diag_indices(n)] = x
        a, q = np.linalg.eigh(L)
        if a[-1] > 700:
            raise DomainError("matrix exponential overflows for this gamma")
        d = np.einsum("ij,j,ij->i", q, np.exp(a), q)
        step = np.log(d)
        resid = np.max(np.abs(step))
        x = x - step
        if resid < tol:
            L[np.diag_indices(n)] = x
            a, q = np.linalg.eigh(L)
            c = (q * np.exp(a)) @ q.T
            s = 1.0 / np.sqrt(np.diag(c))
            c = c * s[:, None] * s[None, :]
            c = (c + c.T) / 2
            c[np.diag_indices(n)] = 1.0
            return c
    raise ConvergenceError(
        f"diagonal iteration did not converge in {max_iter} steps (residual {resid:.3e})",
        residual=float(resid),
        iterations=max_iter,
    )


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------
def exp_divided_differences(a: NDArray, power: float = 1.0) -> NDArray:
    """First divided differences of ``x -> exp(power * x)`` at the points ``a``.

    ``F[i, j] = (exp(p a_i) - exp(p a_j)) / (a_i - a_j)`` and the limit
    ``p exp(p a_i)`` on (near-)coincident points. With ``a = log(lam)`` and
    ``p = 1`` the off-diagonal entries are
    ``(lam_i - lam_j) / (log lam_i - log lam_j)``.
    """
    a = np.asarray(a, dtype=float)
    ea = np.exp(power * a)
    da = a[:, None] - a[None, :]
    close = np.abs(da) < REPEATED_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (ea[:, None] - ea[None, :]) / da
    # second-order accurate limit on nearly repeated points
    mid = power * np.exp(power * (a[:, None] + a[None, :]) / 2)
    f[close] = mid[close]
    return f


def diag_sensitivity(q: NDArray, f: NDArray) -> NDArray:
    """``d diag(expm(L)) / d diag(L)'`` given the eigenvectors of ``L`` and
    the divided differences ``f`` of ``exp`` at its eigenvalues."""
    return np.einsum("ka,ja,ab,kb,jb->kj", q, q, f, q, q, optimize=True)


def _gamma_pieces(c: NDArray):
    lam, q = _eigh_pd(c)
    f = exp_divided_differences(np.log(lam))
    return lam, q, f


def dcorr_dgamma(c: ArrayLike) -> NDArray:
    """Jacobian ``d vec(C) / d gamma'`` (n^2 x n(n-1)/2) at ``C``.

    Perturbing ``gamma`` moves the strict off-diagonal of ``log C`` while the
    diagonal of ``log C`` adjusts to keep the unit diagonal of ``C``. Let
    ``Gam = d vec(C) / d vec(log C)'``. The constrained derivative is

        (I - Gam E_d' (E_d Gam E_d')^{-1} E_d) Gam (E_l + E_u)'.
    """
    c = check_corr(c, tol=1e-10)
    n = c.shape[0]
    lam, q, f = _gamma_pieces(c)
    # Gam acting on a symmetric direction dL: Q (F o Q'dL Q) Q'
    md = diag_sensitivity(q, f)
    md_inv = np.linalg.inv(md)
    m = n * (n - 1) // 2
    r, cidx = _lower_pairs(n)
    out = np.empty((n * n, m))
    for k in range(m):
        i, j = r[k], cidx[k]
        # Q' (e_i e_j' + e_j e_i') Q
        h = np.outer(q[i], q[j])
        h = h + h.T
        dc = q @ (f * h) @ q.T
        dx = -md_inv @ np.diag(dc)
        dc = dc + q @ (f * ((q.T * dx) @ q)) @ q.T
        out[:, k] = dc.ravel(order="F")
    return out


def gamma_jacobian(c: ArrayLike) -> NDArray:
    """Jacobian ``d vecl(C) / d gamma'`` at a correlation matrix ``C``.

    Repeated eigenvalues are handled through the divided-difference limit,
    so equicorrelation and identity inputs are fine.

    Examples
    --------
    >>> float(gamma_jacobian([[1.0, 0.5], [0.5, 1.0]])[0, 0])
    0.75
    """
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    return dcorr_dgamma(c)[IndexMaps.build(n).lower]


def dsqrt_dgamma(c: ArrayLike) -> NDArray:
    """Jacobian ``d vec(C^{1/2}) / d gamma'`` (n^2 x n(n-1)/2).

    Differentiating ``S S = C`` gives the Sylvester equation
    ``S dS + dS S = dC``, i.e. ``(S (+) S) vec(dS) = vec(dC)`` with the
    Kronecker sum ``S (+) S = S kron I + I kron S``. In the eigenbasis of
    ``C`` the solve is an elementwise division by ``sqrt(lam_a) + sqrt(lam_b)``.
    """
    c = check_corr(c, tol=1e-10)
    n = c.shape[0]
    lam, q = _eigh_pd(c)
    denom = np.sqrt(lam)[:, None] + np.sqrt(lam)[None, :]
    dc = dcorr_dgamma(c)
    out = np.empty_like(dc)
    for k in range(dc.shape[1]):
        d = dc[:, k].reshape(n, n, order="F")
        out[:, k] = (q @ ((q.T @ d @ q) / denom) @ q.T).ravel(order="F")
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def random_corr(n: int, rng: np.random.Generator | None = None, scale: float = 1.0) -> NDArray:
    """Random positive definite correlation matrix via a random log-domain vector."""
    rng = np.random.default_rng() if rng is None else rng
    g = rng.normal(scale=scale / np.sqrt(max(n - 1, 1)), size=n * (n - 1) // 2)
    return corr_of_gamma(g)
