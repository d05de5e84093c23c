"""Compiled kernels for block correlation matrices in canonical coordinates.

A block correlation matrix with group sizes ``n_1..n_K`` is determined by a
K x K matrix ``A`` and scalars ``delta_k``:

    C[i, j] = A[k, l] / sqrt(n_k n_l) + [k == l] * delta_k * (1{i == j} - 1 / n_k)

for ``i`` in group ``k`` and ``j`` in group ``l``. Products, inverses and
matrix functions act on ``(A, delta)`` separately, so only a K x K
eigendecomposition is ever needed. Singleton groups have no ``delta``.

In the log domain ``log A = W + diag(u)`` where ``W`` carries the free
parameters and ``u`` is pinned down by the unit diagonal of ``C``.
"""
import numpy as np
from numba import njit

REPEATED_TOL = 1e-10


@njit(cache=True)
def divided_differences(a, p):
    """``F[i, j] = (exp(p a_i) - exp(p a_j)) / (a_i - a_j)`` with the
    coincident-point limit ``p exp(p a)``."""
    k = a.shape[0]
    f = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            d = a[i] - a[j]
            if abs(d) < REPEATED_TOL:
                f[i, j] = p * np.exp(p * 0.5 * (a[i] + a[j]))
            else:
                f[i, j] = (np.exp(p * a[i]) - np.exp(p * a[j])) / d
    return f


@njit(cache=True)
def frechet(U, F, dL):
    """Directional derivative ``U (F o U' dL U) U'`` of a spectral function."""
    return U @ (F * (U.T @ dL @ U)) @ U.T


@njit(cache=True)
def spectral(U, a, p):
    """``U diag(exp(p a)) U'``."""
    return (U * np.exp(p * a)) @ U.T


@njit(cache=True)
def _diag_of_exp(U, a):
    k = U.shape[0]
    out = np.zeros(k)
    ea = np.exp(a)
    for i in range(k):
        s = 0.0
        for j in range(k):
            s += U[i, j] * U[i, j] * ea[j]
        out[i] = s
    return out


@njit(cache=True)
def _diag_jac(U, F):
    # d diag(exp L) / d diag(L)'
    k = U.shape[0]
    out = np.zeros((k, k))
    for r in range(k):
        for c in range(r, k):
            s = 0.0
            for a in range(k):
                pa = U[r, a] * U[c, a]
                if pa == 0.0:
                    continue
                for b in range(k):
                    s += pa * F[a, b] * U[r, b] * U[c, b]
            out[r, c] = s
            out[c, r] = s
    return out


@njit(cache=True)
def _constraint(U, a, u, sizes):
    # log of the diagonal of C for each group
    d = _diag_of_exp(U, a)
    k = sizes.shape[0]
    h = np.empty(k)
    for i in range(k):
        nk = sizes[i]
        c = d[i] / nk
        if nk > 1:
            c += (1.0 - 1.0 / nk) * np.exp(u[i])
        h[i] = np.log(c)
    return h


@njit(cache=True)
def canon_solve(W, sizes, u0, tol=1e-13, max_iter=100):
    """Solve for ``u`` so that ``log A = W + diag(u)`` gives a unit diagonal.

    Newton steps on ``log diag(C) = 0`` with a fixed-point fallback whenever
    Newton fails to reduce the residual.

    Returns
    -------
    u, a, U, resid, iterations
        ``a, U`` are the eigenvalues and eigenvectors of ``W + diag(u)``.
    """
    k = sizes.shape[0]
    u = u0.copy()
    L = W.copy()
    for i in range(k):
        L[i, i] = W[i, i] + u[i]
    a, U = np.linalg.eigh(L)
    h = _constraint(U, a, u, sizes)
    resid = np.max(np.abs(h))
    it = 0
    while resid > tol and it < max_iter:
        it += 1
        F = divided_differences(a, 1.0)
        Jc = _diag_jac(U, F)
        for i in range(k):
            nk = sizes[i]
            for j in range(k):
                Jc[i, j] /= nk
            if nk > 1:
                Jc[i, i] += (1.0 - 1.0 / nk) * np.exp(u[i])
        # d log c = diag(1/c) dc
        ec = np.exp(h)
        for i in range(k):
            for j in range(k):
                Jc[i, j] /= ec[i]
        step = np.linalg.solve(Jc, h)
        un = u - step
        for i in range(k):
            L[i, i] = W[i, i] + un[i]
        an, Un = np.linalg.eigh(L)
        if an[k - 1] > 700.0:
            hn = np.full(k, np.inf)
        else:
            hn = _constraint(Un, an, un, sizes)
        rn = np.max(np.abs(hn))
        if not rn < resid:
            # plain fixed-point update
            un = u - h
            for i in range(k):
                L[i, i] = W[i, i] + un[i]
            an, Un = np.linalg.eigh(L)
            hn = _constraint(Un, an, un, sizes)
            rn = np.max(np.abs(hn))
        u, a, U, h, resid = un, an, Un, hn, rn
    return u, a, U, resid, it


@njit(cache=True)
def cell_direction(k, l, sizes):
    """``dW`` for a unit change of the log-domain parameter of cell (k, l)."""
    K = sizes.shape[0]
    dW = np.zeros((K, K))
    if k == l:
        dW[k, k] = sizes[k]
    else:
        v = np.sqrt(sizes[k] * sizes[l])
        dW[k, l] = v
        dW[l, k] = v
    return dW


@njit(cache=True)
def eta_to_W(eta, cells_k, cells_l, sizes):
    K = sizes.shape[0]
    W = np.zeros((K, K))
    for m in range(eta.shape[0]):
        k = cells_k[m]
        l = cells_l[m]
        if k == l:
            W[k, k] = sizes[k] * eta[m]
        else:
            v = np.sqrt(sizes[k] * sizes[l]) * eta[m]
            W[k, l] = v
            W[l, k] = v
    return W


@njit(cache=True)
def log_derivatives(u, a, U, cells_k, cells_l, sizes):
    """Derivatives of ``(log A, u)`` with respect to each free cell.

    Returns
    -------
    dLA : (q, K, K) array
        ``d log A / d eta_m``.
    du : (q, K) array
        ``d u / d eta_m``.
    """
    K = sizes.shape[0]
    q = cells_k.shape[0]
    F = divided_differences(a, 1.0)
    Jc = _diag_jac(U, F)
    for i in range(K):
        nk = sizes[i]
        for j in range(K):
            Jc[i, j] /= nk
        if nk > 1:
            Jc[i, i] += (1.0 - 1.0 / nk) * np.exp(u[i])
    rhs = np.zeros((K, q))
    dWs = np.zeros((q, K, K))
    for m in range(q):
        dW = cell_direction(cells_k[m], cells_l[m], sizes)
        dWs[m] = dW
        dA = frechet(U, F, dW)
        for i in range(K):
            rhs[i, m] = -dA[i, i] / sizes[i]
    du = np.linalg.solve(Jc, rhs).T.copy()
    dLA = dWs
    for m in range(q):
        for i in range(K):
            dLA[m, i, i] += du[m, i]
    return dLA, du


@njit(cache=True)
def assemble(A, d, sizes, group):
    """Dense n x n matrix from canonical pieces ``(A, d)``."""
    n = group.shape[0]
    out = np.empty((n, n))
    for i in range(n):
        k = group[i]
        for j in range(n):
            l = group[j]
            v = A[k, l] / np.sqrt(sizes[k] * sizes[l])
            if k == l and sizes[k] > 1:
                if i == j:
                    v += d[k] * (1.0 - 1.0 / sizes[k])
                else:
                    v -= d[k] / sizes[k]
            out[i, j] = v
    return out


@njit(cache=True)
def canon_state(eta, cells_k, cells_l, sizes, group, u0, want_derivs):
    """Everything the filters need about ``C(eta)``.

    Returns
    -------
    u : (K,) array
        Solved diagonal shifts (warm start for the next call).
    S, Sinv : (n, n) arrays
        ``C^{1/2}`` and ``C^{-1/2}``.
    logdet : float
        ``log |C|``.
    dS : (q, n, n) array
        ``d C^{1/2} / d eta_m`` (empty when ``want_derivs`` is false).
    X : (q, n, n) array
        ``C^{-1/2} dS_m``.
    resid : float
        Final unit-diagonal residual.
    """
    K = sizes.shape[0]
    q = eta.shape[0]
    n = group.shape[0]
    W = eta_to_W(eta, cells_k, cells_l, sizes)
    u, a, U, resid, it = canon_solve(W, sizes, u0, 1e-13, 100)
    Ahalf = spectral(U, a, 0.5)
    Aihalf = spectral(U, a, -0.5)
    dh = np.ones(K)
    dih = np.ones(K)
    logdet = 0.0
    for i in range(K):
        logdet += a[i]
        if sizes[i] > 1:
            dh[i] = np.exp(0.5 * u[i])
            dih[i] = np.exp(-0.5 * u[i])
            logdet += (sizes[i] - 1) * u[i]
    S = assemble(Ahalf, dh, sizes, group)
    Sinv = assemble(Aihalf, dih, sizes, group)
    if not want_derivs:
        return u, S, Sinv, logdet, np.zeros((0, n, n)), np.zeros((0, n, n)), resid
    dLA, du = log_derivatives(u, a, U, cells_k, cells_l, sizes)
    Fh = divided_differences(a, 0.5)
    dS = np.empty((q, n, n))
    X = np.empty((q, n, n))
    ddh = np.zeros(K)
    rel = np.zeros(K)
    for m in range(q):
        dAh = frechet(U, Fh, dLA[m])
        for i in range(K):
            if sizes[i] > 1:
                ddh[i] = 0.5 * dh[i] * du[m, i]
                rel[i] = 0.5 * du[m, i]
        dS[m] = assemble(dAh, ddh, sizes, group)
        X[m] = assemble(Aihalf @ dAh, rel, sizes, group)
    return u, S, Sinv, logdet, dS, X, resid


@njit(cache=True)
def canon_corr(eta, cells_k, cells_l, sizes, group, u0):
    """``C(eta)`` and the solved shifts."""
    K = sizes.shape[0]
    W = eta_to_W(eta, cells_k, cells_l, sizes)
    u, a, U, resid, it = canon_solve(W, sizes, u0, 1e-13, 100)
    A = spectral(U, a, 1.0)
    d = np.ones(K)
    for i in range(K):
        if sizes[i] > 1:
            d[i] = np.exp(u[i])
    return assemble(A, d, sizes, group), u, resid


@njit(cache=True)
def canon_dcorr(eta, cells_k, cells_l, sizes, group, u0):
    """``d C / d eta_m`` as a (q, n, n) array."""
    K = sizes.shape[0]
    q = eta.shape[0]
    n = group.shape[0]
    W = eta_to_W(eta, cells_k, cells_l, sizes)
    u, a, U, resid, it = canon_solve(W, sizes, u0, 1e-13, 100)
    dLA, du = log_derivatives(u, a, U, cells_k, cells_l, sizes)
    F = divided_differences(a, 1.0)
    out = np.empty((q, n, n))
    dd = np.zeros(K)
    for m in range(q):
        dA = frechet(U, F, dLA[m])
        for i in range(K):
            if sizes[i] > 1:
                dd[i] = np.exp(u[i]) * du[m, i]
        out[m] = assemble(dA, dd, sizes, group)
    return out
