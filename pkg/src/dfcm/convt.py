"""
Convolution-t distributions.

``X = mu + Xi V`` where ``V`` stacks G independent standardized
multivariate-t vectors ``V_g`` of dimensions ``m_g`` with ``nu_g`` degrees of
freedom. Special cases:

* Gauss: one block with ``nu = inf``.
* MT: one block (multivariate t).
* CT: blocks aligned with asset groups.
* HT: every block is univariate.

Each ``V_g`` has identity covariance, so ``var(X) = Xi Xi'``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from numba import njit
from numpy.typing import ArrayLike, NDArray
from scipy.special import gammaln

from .exceptions import DomainError, SpecError

__all__ = [
    "ConvTSpec",
    "log_constant",
    "loglik",
    "loglik_block_mt",
    "loglik_block_ct",
    "loglik_block_ht",
    "weights",
    "score_mu_xi",
    "information_mu_xi",
    "upsilon",
    "upsilon_monte_carlo",
    "score_bilinear",
    "sample",
]

KINDS = ("gauss", "mt", "ct", "ht")


@dataclass(frozen=True)
class ConvTSpec:
    """Partition and degrees of freedom of a convolution-t distribution.

    Parameters
    ----------
    m : sequence of int
        Block sizes, summing to the dimension.
    nu : sequence of float
        Degrees of freedom per block, each > 2. ``inf`` gives a Gaussian block.
    kind : str, optional
        Label ("gauss", "mt", "ct", "ht"); checked against the partition.
    """

    m: tuple
    nu: tuple
    kind: str = "ct"

    def __post_init__(self):
        m = tuple(int(x) for x in self.m)
        nu = tuple(float(x) for x in np.atleast_1d(self.nu))
        if len(m) == 0 or min(m) < 1:
            raise SpecError("block sizes must be positive integers")
        if len(nu) != len(m):
            raise SpecError(f"{len(nu)} degrees of freedom for {len(m)} blocks")
        if any(not (v > 2) for v in nu):
            raise SpecError(f"degrees of freedom must exceed 2, got {nu}")
        if self.kind not in KINDS:
            raise SpecError(f"unknown kind {self.kind!r}")
        if self.kind in ("mt", "gauss") and len(m) != 1:
            raise SpecError(f"{self.kind} requires a single block")
        if self.kind == "gauss" and not math.isinf(nu[0]):
            raise SpecError("gauss requires nu = inf")
        if self.kind == "ht" and max(m) != 1:
            raise SpecError("ht requires univariate blocks")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "nu", nu)

    @classmethod
    def gauss(cls, n: int) -> "ConvTSpec":
        return cls((n,), (math.inf,), "gauss")

    @classmethod
    def mt(cls, n: int, nu: float) -> "ConvTSpec":
        return cls((n,), (nu,), "mt")

    @classmethod
    def ct(cls, m: Sequence[int], nu: Sequence[float]) -> "ConvTSpec":
        return cls(tuple(m), tuple(nu), "ct")

    @classmethod
    def ht(cls, nu: Sequence[float]) -> "ConvTSpec":
        nu = tuple(np.atleast_1d(nu))
        return cls((1,) * len(nu), nu, "ht")

    @classmethod
    def make(cls, kind: str, group_sizes: Sequence[int], nu=None) -> "ConvTSpec":
        """Distribution of the given kind over assets partitioned by ``group_sizes``."""
        n = int(sum(group_sizes))
        if kind == "gauss":
            return cls.gauss(n)
        if kind == "mt":
            return cls.mt(n, 8.0 if nu is None else float(np.atleast_1d(nu)[0]))
        if kind == "ct":
            g = len(group_sizes)
            nu = np.full(g, 8.0) if nu is None else np.broadcast_to(nu, (g,))
            return cls.ct(group_sizes, nu)
        if kind == "ht":
            nu = np.full(n, 8.0) if nu is None else np.broadcast_to(nu, (n,))
            return cls.ht(nu)
        raise SpecError(f"unknown kind {kind!r}")

    def with_nu(self, nu) -> "ConvTSpec":
        return ConvTSpec(self.m, tuple(np.atleast_1d(nu)), self.kind)

    @property
    def n(self) -> int:
        return int(sum(self.m))

    @property
    def G(self) -> int:
        return len(self.m)

    @property
    def is_gauss(self) -> bool:
        return self.kind == "gauss"

    @cached_property
    def group_of(self) -> NDArray:
        return np.repeat(np.arange(self.G), self.m).astype(np.int64)

    @cached_property
    def m_arr(self) -> NDArray:
        return np.asarray(self.m, dtype=np.float64)

    @cached_property
    def nu_arr(self) -> NDArray:
        return np.asarray(self.nu, dtype=np.float64)

    @cached_property
    def phi(self) -> NDArray:
        """``(nu + m) / (nu + m + 2)`` per block (1 for Gaussian blocks)."""
        return _phi(self.nu_arr, self.m_arr)

    @cached_property
    def psi(self) -> NDArray:
        """``phi nu / (nu - 2)`` per block (1 for Gaussian blocks)."""
        return _psi(self.nu_arr, self.m_arr)

    @cached_property
    def consts(self) -> NDArray:
        return np.array([log_constant(v, k) for v, k in zip(self.nu, self.m)])


def _phi(nu, m):
    out = np.ones_like(nu)
    fin = np.isfinite(nu)
    out[fin] = (nu[fin] + m[fin]) / (nu[fin] + m[fin] + 2.0)
    return out


def _psi(nu, m):
    out = np.ones_like(nu)
    fin = np.isfinite(nu)
    out[fin] = _phi(nu[fin], m[fin]) * nu[fin] / (nu[fin] - 2.0)
    return out


def log_constant(nu: float, m: int) -> float:
    """Log normalizing constant of the standardized m-variate t density.

    ``log Gamma((nu+m)/2) - log Gamma(nu/2) - (m/2) log((nu-2) pi)``, and
    ``-(m/2) log(2 pi)`` for ``nu = inf``.
    """
    if math.isinf(nu):
        return -0.5 * m * math.log(2 * math.pi)
    return float(gammaln((nu + m) / 2) - gammaln(nu / 2) - 0.5 * m * math.log((nu - 2) * math.pi))


# ---------------------------------------------------------------------------
# compiled core shared with the filters
# ---------------------------------------------------------------------------
@njit(cache=True)
def ct_terms(V, group, nu, m, consts):
    """Kernel part of the log density and per-coordinate weights.

    Returns ``sum_g c_g - (nu_g + m_g)/2 log(1 + V_g'V_g / (nu_g - 2))`` and
    the weights ``w_a = W_{g(a)}``.
    """
    G = nu.shape[0]
    n = V.shape[0]
    ss = np.zeros(G)
    for a in range(n):
        ss[group[a]] += V[a] * V[a]
    ll = 0.0
    Wg = np.ones(G)
    for g in range(G):
        ll += consts[g]
        if np.isinf(nu[g]):
            ll -= 0.5 * ss[g]
        else:
            ll -= 0.5 * (nu[g] + m[g]) * np.log1p(ss[g] / (nu[g] - 2.0))
            Wg[g] = (nu[g] + m[g]) / (nu[g] - 2.0 + ss[g])
    w = np.empty(n)
    for a in range(n):
        w[a] = Wg[group[a]]
    return ll, w


@njit(cache=True)
def bilinear_weights(group, phi, psi):
    """Coefficient matrices of the score bilinear form (see :func:`score_bilinear`)."""
    n = group.shape[0]
    c1 = np.empty((n, n))
    c2 = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            if group[a] == group[b]:
                c1[a, b] = phi[group[a]]
                c2[a, b] = phi[group[a]]
            else:
                c1[a, b] = psi[group[a]]
                c2[a, b] = 1.0
    return c1, c2


@njit(cache=True)
def information_from_X(X, c1, c2, group, phi):
    """Information matrix ``B(X_k, X_l)`` for a stack of directions ``X`` (p, n, n)."""
    p = X.shape[0]
    n = X.shape[1]
    G = phi.shape[0]
    P = np.empty((p, n * n))
    Z = np.empty((p, n * n))
    tr = np.zeros((p, G))
    for k in range(p):
        for a in range(n):
            tr[k, group[a]] += X[k, a, a]
            for b in range(n):
                P[k, a * n + b] = X[k, a, b]
                Z[k, a * n + b] = c1[a, b] * X[k, a, b] + c2[a, b] * X[k, b, a]
    out = P @ Z.T
    for k in range(p):
        for l in range(p):
            s = 0.0
            for g in range(G):
                s += (phi[g] - 1.0) * tr[k, g] * tr[l, g]
            out[k, l] += s
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# likelihoods
# ---------------------------------------------------------------------------
def _check_shapes(X, mu, n):
    X = np.asarray(X, dtype=float)
    mu = np.zeros(n) if mu is None else np.asarray(mu, dtype=float)
    if X.shape != (n,) or mu.shape != (n,):
        raise SpecError(f"expected vectors of length {n}")
    return X, mu


def loglik(X: ArrayLike, mu: ArrayLike, Xi: ArrayLike, spec: ConvTSpec) -> float:
    """Log density of a convolution-t vector.

    Parameters
    ----------
    X : array_like
        Observation of length n.
    mu : array_like
        Location.
    Xi : array_like
        Invertible n x n scale with ``var(X) = Xi Xi'``.
    spec : ConvTSpec

    Examples
    --------
    >>> round(loglik([0.0], [0.0], [[1.0]], ConvTSpec.mt(1, 5.0)), 5)
    -0.7132
    """
    Xi = np.asarray(Xi, dtype=float)
    X, mu = _check_shapes(X, mu, spec.n)
    sign, logdet = np.linalg.slogdet(Xi)
    if sign == 0 or not np.isfinite(logdet):
        raise DomainError("scale matrix is singular")
    V = np.linalg.solve(Xi, X - mu)
    ll, _ = ct_terms(V, spec.group_of, spec.nu_arr, spec.m_arr, spec.consts)
    return float(ll - logdet)


def _block_quadratics(X, mu, cb):
    from .blockcorr import block_loglik_helpers, build_Q

    Q = build_Q(cb.spec)
    Y = Q.T @ (X - mu)
    return Y, block_loglik_helpers(cb, Y)


def loglik_block_mt(X: ArrayLike, mu: ArrayLike, C, spec, nu: float) -> float:
    """Multivariate-t log density with block correlation ``C`` (scale ``C^{1/2}``).

    ``C`` may be a correlation matrix or a :class:`~dfcm.blockcorr.CanonicalBlock`;
    ``spec`` is the :class:`~dfcm.blockcorr.BlockSpec`.
    """
    cb = _as_canonical(C, spec)
    X, mu = _check_shapes(X, mu, cb.spec.n)
    n = cb.spec.n
    _, h = _block_quadratics(X, mu, cb)
    c = log_constant(nu, n)
    if math.isinf(nu):
        return float(c - 0.5 * h["logdet"] - 0.5 * h["quad"])
    return float(c - 0.5 * h["logdet"] - 0.5 * (nu + n) * math.log1p(h["quad"] / (nu - 2)))


def loglik_block_ct(X: ArrayLike, mu: ArrayLike, C, spec, nu: Sequence[float]) -> float:
    """Convolution-t log density with one t block per asset group.

    The squared norm of block k is
    ``(A^{-1/2} Y_0)_k^2 + Y_k'Y_k / delta_k`` with ``Y = Q'(X - mu)``.
    """
    cb = _as_canonical(C, spec)
    X, mu = _check_shapes(X, mu, cb.spec.n)
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    K = cb.spec.K
    if nu.size != K:
        raise SpecError(f"{nu.size} degrees of freedom for {K} groups")
    Y, h = _block_quadratics(X, mu, cb)
    lam, U = np.linalg.eigh(cb.A)
    z = (U / np.sqrt(lam)) @ U.T @ Y[:K]
    ss = z**2 + h["quadk"]
    ll = -0.5 * h["logdet"]
    for k, s in enumerate(cb.spec.group_sizes):
        ll += log_constant(nu[k], s)
        ll -= 0.5 * ss[k] if math.isinf(nu[k]) else 0.5 * (nu[k] + s) * math.log1p(ss[k] / (nu[k] - 2))
    return float(ll)


def loglik_block_ht(X: ArrayLike, mu: ArrayLike, C, spec, nu: Sequence[float]) -> float:
    """Log density with independent univariate t shocks, ``V = C^{-1/2}(X - mu)``."""
    cb = _as_canonical(C, spec)
    X, mu = _check_shapes(X, mu, cb.spec.n)
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    n = cb.spec.n
    if nu.size != n:
        raise SpecError(f"{nu.size} degrees of freedom for {n} assets")
    from .blockcorr import build_Q

    Q = build_Q(cb.spec)
    Y = Q.T @ (X - mu)
    K = cb.spec.K
    lam, U = np.linalg.eigh(cb.A)
    Z = np.empty(n)
    Z[:K] = (U / np.sqrt(lam)) @ U.T @ Y[:K]
    pos = K
    logdet = float(np.sum(np.log(lam)))
    for k, s in enumerate(cb.spec.group_sizes):
        if s > 1:
            Z[pos : pos + s - 1] = Y[pos : pos + s - 1] / np.sqrt(cb.delta[k])
            logdet += (s - 1) * math.log(cb.delta[k])
            pos += s - 1
    V = Q @ Z
    ht = ConvTSpec.ht(nu)
    ll, _ = ct_terms(V, ht.group_of, ht.nu_arr, ht.m_arr, ht.consts)
    return float(ll - 0.5 * logdet)


def _as_canonical(C, spec):
    from .blockcorr import CanonicalBlock, canonical_of_block

    if isinstance(C, CanonicalBlock):
        return C
    return canonical_of_block(C, spec)


# ---------------------------------------------------------------------------
# scores and information
# ---------------------------------------------------------------------------
def weights(V: ArrayLike, spec: ConvTSpec) -> NDArray:
    """Per-block weights ``W_g = (nu_g + m_g) / (nu_g - 2 + V_g'V_g)``."""
    V = np.asarray(V, dtype=float)
    _, w = ct_terms(V, spec.group_of, spec.nu_arr, spec.m_arr, spec.consts)
    first = np.concatenate([[0], np.cumsum(spec.m)[:-1]])
    return w[first]


def score_mu_xi(X: ArrayLike, mu: ArrayLike, Xi: ArrayLike, spec: ConvTSpec) -> tuple[NDArray, NDArray]:
    """Scores with respect to the location and to ``vec(Xi)`` (column-major).

    ``grad_mu = Xi'^{-1} (w o V)`` and
    ``grad_Xi = vec(Xi'^{-1} (diag(w) V V' - I))``.
    """
    Xi = np.asarray(Xi, dtype=float)
    X, mu = _check_shapes(X, mu, spec.n)
    V = np.linalg.solve(Xi, X - mu)
    _, w = ct_terms(V, spec.group_of, spec.nu_arr, spec.m_arr, spec.consts)
    XiTinv = np.linalg.inv(Xi).T
    g_mu = XiTinv @ (w * V)
    S = (w * V)[:, None] * V[None, :] - np.eye(spec.n)
    g_xi = (XiTinv @ S).ravel(order="F")
    return g_mu, g_xi


def upsilon(spec: ConvTSpec) -> NDArray:
    """Closed form of ``Upsilon = E[vec(S) vec(S)'] - K_n`` with
    ``S = diag(w) V V' - I`` at ``Xi = I``.

    Writing ``phi_g = (nu_g+m_g)/(nu_g+m_g+2)`` and ``psi_g = phi_g nu_g/(nu_g-2)``,
    for ``a`` in block g:

    * ``b, d`` in g, ``c`` in g: ``phi_g (d_ab d_cd + d_ac d_bd + d_ad d_bc) - d_ab d_cd``
    * ``b, d`` outside g, ``c`` in g: ``psi_g d_ac d_bd``
    * ``c`` outside g: ``d_ad d_bc``

    and zero otherwise. For a Gaussian spec ``Upsilon`` is the identity.
    """
    n = spec.n
    g = spec.group_of
    phi, psi = spec.phi, spec.psi
    E = np.zeros((n, n, n, n))  # E[S_ab S_cd]
    for a in range(n):
        for b in range(n):
            for c in range(n):
                for d in range(n):
                    ga = g[a]
                    if g[c] == ga:
                        if g[b] == ga and g[d] == ga:
                            v = phi[ga] * ((a == b) * (c == d) + (a == c) * (b == d) + (a == d) * (b == c))
                            v -= (a == b) * (c == d)
                        elif g[b] != ga and g[d] != ga:
                            v = psi[ga] * (a == c) * (b == d)
                        else:
                            v = 0.0
                    else:
                        v = float((a == d) * (b == c))
                    E[a, b, c, d] = v
    # vec index of (a, b) is a + n b
    M = E.transpose(1, 0, 3, 2).reshape(n * n, n * n)
    Kn = np.zeros((n * n, n * n))
    idx = np.arange(n * n).reshape(n, n, order="F")
    Kn[idx.ravel(order="F"), idx.T.ravel(order="F")] = 1.0
    return M - Kn


def upsilon_monte_carlo(spec: ConvTSpec, n_draws: int = 1_000_000, seed: int = 0, chunk: int = 100_000) -> NDArray:
    """Monte Carlo estimate of ``Upsilon`` (see :func:`upsilon`) at ``Xi = I``."""
    n = spec.n
    rng = np.random.default_rng(seed)
    acc = np.zeros((n * n, n * n))
    done = 0
    while done < n_draws:
        k = min(chunk, n_draws - done)
        V = _standard_draws(spec, k, rng)
        ss = np.zeros((k, spec.G))
        np.add.at(ss.T, spec.group_of, (V**2).T)
        nu = spec.nu_arr
        W = np.where(np.isfinite(nu), (nu + spec.m_arr) / (np.where(np.isfinite(nu), nu, 3.0) - 2.0 + ss), 1.0)
        w = W[:, spec.group_of]
        S = (w * V)[:, :, None] * V[:, None, :] - np.eye(n)
        vs = S.transpose(0, 2, 1).reshape(k, n * n)  # column-major vec
        acc += vs.T @ vs
        done += k
    Kn = np.zeros((n * n, n * n))
    idx = np.arange(n * n).reshape(n, n, order="F")
    Kn[idx.ravel(order="F"), idx.T.ravel(order="F")] = 1.0
    return acc / n_draws - Kn


def information_mu_xi(spec: ConvTSpec, Xi: ArrayLike, ups: NDArray | None = None) -> tuple[NDArray, NDArray]:
    """Information matrices for the location and for ``vec(Xi)``.

    ``I_mu = Xi'^{-1} diag(psi) Xi^{-1}`` and
    ``I_Xi = (I kron Xi'^{-1}) (K_n + Upsilon) (I kron Xi^{-1})``.

    Parameters
    ----------
    ups : ndarray, optional
        Pre-computed ``Upsilon`` (for instance the Monte Carlo estimate);
        the closed form is used by default.
    """
    Xi = np.asarray(Xi, dtype=float)
    n = spec.n
    Xinv = np.linalg.inv(Xi)
    psi = spec.psi[spec.group_of]
    I_mu = Xinv.T @ (psi[:, None] * Xinv)
    ups = upsilon(spec) if ups is None else ups
    Kn = np.zeros((n * n, n * n))
    idx = np.arange(n * n).reshape(n, n, order="F")
    Kn[idx.ravel(order="F"), idx.T.ravel(order="F")] = 1.0
    L = np.kron(np.eye(n), Xinv.T)
    I_xi = L @ (Kn + ups) @ L.T
    return I_mu, 0.5 * (I_xi + I_xi.T)


def score_bilinear(spec: ConvTSpec, X: ArrayLike, Y: ArrayLike) -> float:
    """``E[<S, X> <S, Y>]`` for ``S = diag(w) V V' - I`` at ``Xi = I``.

    Equals ``vec(X)' (K_n + Upsilon) vec(Y)`` and is computed in O(n^2).
    The information of any scalar parameters ``theta`` entering through the
    scale is ``B(Xi^{-1} dXi/dtheta_k, Xi^{-1} dXi/dtheta_l)``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    c1, c2 = bilinear_weights(spec.group_of, spec.phi, spec.psi)
    return float(information_from_X(np.stack([X, Y]), c1, c2, spec.group_of, spec.phi)[0, 1])


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
def _standard_draws(spec: ConvTSpec, count: int, rng: np.random.Generator) -> NDArray:
    out = rng.standard_normal((count, spec.n))
    for g, (s, nu) in enumerate(zip(spec.m, spec.nu)):
        if math.isinf(nu):
            continue
        sl = spec.group_of == g
        chi = rng.chisquare(nu, size=count)
        out[:, sl] *= np.sqrt((nu - 2.0) / chi)[:, None]
    return out


def sample(spec: ConvTSpec, mu: ArrayLike, Xi: ArrayLike, count: int, seed=None) -> NDArray:
    """Draw ``count`` vectors ``mu + Xi V``.

    Parameters
    ----------
    seed : int, Generator or None
        Seed or generator; draws are deterministic for a fixed seed.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu = np.asarray(mu, dtype=float)
    Xi = np.asarray(Xi, dtype=float)
    V = _standard_draws(spec, count, rng)
    return mu + V @ Xi.T
