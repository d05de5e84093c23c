"""
Block correlation matrices.

Assets are sorted so that each group (subindustry) is a consecutive run of
columns, and groups are nested in sectors. A block correlation matrix is
constant within each (group, group) cell. Three restrictions are supported
on top of the unrestricted matrix:

``fbc``
    Full block: every cell has its own correlation.
``sbc``
    Sparse block: cells linking two different sectors are zero.
``dbc``
    Diagonal block: every cell off the block diagonal is zero.

The log-domain parameter ``eta`` holds the distinct values of ``log C``,
one per free cell, in column-major order over the lower triangle of the
K x K cell grid. Within-group cells of singleton groups are not free.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import _canon
from .exceptions import ConvergenceError, DomainError, StructureError
from .matcorr import _lower_pairs, check_corr, matrix_log

__all__ = [
    "STRUCTURES",
    "BlockSpec",
    "CanonicalBlock",
    "build_Q",
    "canonical_of_block",
    "eta_of_block",
    "block_of_eta",
    "bit_matrix",
    "block_loglik_helpers",
    "dcorr_deta",
    "project_block",
    "block_constancy_error",
    "eta_of_equicorr",
    "equicorr_of_eta",
    "equicorr_jacobian",
]

STRUCTURES = ("unrestricted", "fbc", "sbc", "dbc")
BLOCK_TOL = 1e-10


@dataclass(frozen=True)
class BlockSpec:
    """Two-level partition of assets into groups and sectors.

    Parameters
    ----------
    group_sizes : sequence of int
        Sizes ``n_1..n_K`` of the consecutive groups.
    sector_of_group : sequence of int, optional
        Sector label of each group. Labels must be non-decreasing so each
        sector is a consecutive run of groups. Defaults to a single sector.
    structure : {"unrestricted", "fbc", "sbc", "dbc"}
        Restriction imposed on the correlation matrix.
    """

    group_sizes: tuple
    sector_of_group: tuple = None
    structure: str = "fbc"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.group_sizes)
        if len(sizes) == 0 or min(sizes) < 1:
            raise StructureError("group sizes must be positive integers")
        object.__setattr__(self, "group_sizes", sizes)
        sec = self.sector_of_group
        sec = (0,) * len(sizes) if sec is None else tuple(int(s) for s in sec)
        if len(sec) != len(sizes):
            raise StructureError("sector_of_group must have one entry per group")
        if any(b < a for a, b in zip(sec, sec[1:])):
            raise StructureError("sectors must be contiguous runs of groups")
        if len(set(sec)) != len(_runs(sec)):
            raise StructureError("sectors must be contiguous runs of groups")
        object.__setattr__(self, "sector_of_group", sec)
        if self.structure not in STRUCTURES:
            raise StructureError(f"unknown structure {self.structure!r}; expected one of {STRUCTURES}")

    # -- sizes -----------------------------------------------------------
    @property
    def n(self) -> int:
        return int(sum(self.group_sizes))

    @property
    def K(self) -> int:
        return len(self.group_sizes)

    @cached_property
    def canon_sizes(self) -> NDArray:
        """Group sizes used by the canonical engine (all ones when unrestricted)."""
        if self.structure == "unrestricted":
            return np.ones(self.n, dtype=np.float64)
        return np.asarray(self.group_sizes, dtype=np.float64)

    @cached_property
    def group_of_asset(self) -> NDArray:
        return np.repeat(np.arange(self.K), self.group_sizes).astype(np.int64)

    @cached_property
    def canon_group(self) -> NDArray:
        if self.structure == "unrestricted":
            return np.arange(self.n, dtype=np.int64)
        return self.group_of_asset

    @cached_property
    def offsets(self) -> NDArray:
        return np.concatenate([[0], np.cumsum(self.group_sizes)]).astype(np.int64)

    # -- free cells --------------------------------------------------------
    @cached_property
    def cells(self) -> tuple[NDArray, NDArray]:
        """Row and column (in the canonical grid) of each free log-domain cell."""
        sizes = self.canon_sizes
        K = sizes.size
        if self.structure == "unrestricted":
            r, c = _lower_pairs(K)
            return r.astype(np.int64), c.astype(np.int64)
        sec = np.asarray(self.sector_of_group)
        rows, cols = [], []
        for j in range(K):
            for i in range(j, K):
                if i == j and sizes[i] < 2:
                    continue
                if self.structure == "dbc" and i != j:
                    continue
                if self.structure == "sbc" and sec[i] != sec[j]:
                    continue
                rows.append(i)
                cols.append(j)
        return np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)

    @property
    def n_eta(self) -> int:
        return int(self.cells[0].size)

    # -- sectors -----------------------------------------------------------
    @cached_property
    def sectors(self) -> list[tuple[int, int]]:
        """Group index ranges ``[start, stop)`` of each sector."""
        return _runs(self.sector_of_group)

    def sector_spec(self, j: int, structure: str | None = None) -> "BlockSpec":
        """Full-block spec restricted to sector ``j``."""
        g0, g1 = self.sectors[j]
        st = structure or ("dbc" if self.structure == "dbc" else "fbc")
        return BlockSpec(self.group_sizes[g0:g1], None, st)

    def sector_assets(self, j: int) -> slice:
        g0, g1 = self.sectors[j]
        return slice(int(self.offsets[g0]), int(self.offsets[g1]))

    def sector_eta(self, j: int) -> NDArray:
        """Positions in ``eta`` that belong to sector ``j`` (sbc and dbc)."""
        g0, g1 = self.sectors[j]
        r, c = self.cells
        return np.flatnonzero((c >= g0) & (c < g1))

    def with_structure(self, structure: str) -> "BlockSpec":
        return BlockSpec(self.group_sizes, self.sector_of_group, structure)


def _runs(labels: Sequence[int]) -> list[tuple[int, int]]:
    out = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            out.append((start, i))
            start = i
    return out


@dataclass
class CanonicalBlock:
    """Canonical coordinates ``C = Q diag(A, delta_1 I, ..., delta_K I) Q'``.

    ``delta_k`` is ``nan`` for singleton groups.
    """

    A: NDArray
    delta: NDArray
    spec: BlockSpec = field(repr=False)

    @property
    def Q(self) -> NDArray:
        return build_Q(self.spec)

    def D(self) -> NDArray:
        parts = [self.A] + [np.eye(s - 1) * d for s, d in zip(self.spec.group_sizes, self.delta) if s > 1]
        return _block_diag(parts)

    def dense(self) -> NDArray:
        d = np.where(np.isnan(self.delta), 1.0, self.delta)
        return _canon.assemble(self.A, d, np.asarray(self.spec.group_sizes, float), self.spec.group_of_asset)


def _block_diag(parts: list[NDArray]) -> NDArray:
    n = sum(p.shape[0] for p in parts)
    out = np.zeros((n, n))
    i = 0
    for p in parts:
        k = p.shape[0]
        out[i : i + k, i : i + k] = p
        i += k
    return out


def build_Q(spec: BlockSpec) -> NDArray:
    """Orthonormal matrix of the canonical representation.

    The first K columns are normalized group indicators. The remaining
    columns are Helmert contrasts within each group, group by group.
    """
    n, K = spec.n, spec.K
    Q = np.zeros((n, n))
    col = K
    for k, (s, o) in enumerate(zip(spec.group_sizes, spec.offsets)):
        Q[o : o + s, k] = 1.0 / np.sqrt(s)
        for j in range(1, s):
            # j-th Helmert contrast: first j entries equal, entry j balances them
            v = np.zeros(s)
            v[:j] = 1.0
            v[j] = -j
            Q[o : o + s, col] = v / np.sqrt(j * (j + 1))
            col += 1
    return Q


def block_constancy_error(C: ArrayLike, spec: BlockSpec) -> tuple[float, tuple[int, int]]:
    """Largest deviation from cell-wise constancy and the offending cell."""
    C = np.asarray(C, dtype=float)
    worst, where = 0.0, (0, 0)
    off = spec.offsets
    for k in range(spec.K):
        for l in range(k + 1):
            blk = C[off[k] : off[k + 1], off[l] : off[l + 1]]
            if k == l:
                s = blk.shape[0]
                vals = blk[~np.eye(s, dtype=bool)]
                if vals.size == 0:
                    continue
                dev = np.ptp(vals)
            else:
                dev = np.ptp(blk)
            if dev > worst:
                worst, where = float(dev), (k, l)
    return worst, where


def _cell_means(C: NDArray, spec: BlockSpec) -> NDArray:
    off = spec.offsets
    R = np.eye(spec.K)
    for k in range(spec.K):
        for l in range(k + 1):
            blk = C[off[k] : off[k + 1], off[l] : off[l + 1]]
            if k == l:
                s = blk.shape[0]
                if s < 2:
                    continue
                v = blk[~np.eye(s, dtype=bool)].mean()
            else:
                v = blk.mean()
            R[k, l] = R[l, k] = v
    return R


def canonical_of_block(C: ArrayLike, spec: BlockSpec, tol: float = BLOCK_TOL) -> CanonicalBlock:
    """Canonical coordinates ``(A, delta)`` of a block correlation matrix.

    ``A[k, k] = 1 + (n_k - 1) rho_kk``, ``A[k, l] = rho_kl sqrt(n_k n_l)`` and
    ``delta_k = (n_k - A[k, k]) / (n_k - 1)``.

    Raises
    ------
    StructureError
        If ``C`` is not constant within the cells of ``spec``.
    """
    C = check_corr(C, tol=1e-10)
    if C.shape[0] != spec.n:
        raise StructureError(f"matrix has dimension {C.shape[0]}, spec expects {spec.n}")
    err, cell = block_constancy_error(C, spec)
    if err > tol:
        raise StructureError(f"matrix is not block constant: cell {cell} varies by {err:.3e}")
    R = _cell_means(C, spec)
    ns = np.asarray(spec.group_sizes, dtype=float)
    A = R * np.sqrt(np.outer(ns, ns))
    A[np.diag_indices(spec.K)] = 1.0 + (ns - 1.0) * np.diag(R)
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = np.where(ns > 1, (ns - np.diag(A)) / (ns - 1.0), np.nan)
    return CanonicalBlock(A=A, delta=delta, spec=spec)


def _check_structure_zeros(C: NDArray, spec: BlockSpec, tol: float) -> None:
    if spec.structure not in ("sbc", "dbc"):
        return
    off = spec.offsets
    sec = spec.sector_of_group
    for k in range(spec.K):
        for l in range(k):
            zero = sec[k] != sec[l] if spec.structure == "sbc" else True
            if zero:
                v = np.max(np.abs(C[off[k] : off[k + 1], off[l] : off[l + 1]]))
                if v > tol:
                    raise StructureError(f"cell ({k}, {l}) must be zero under {spec.structure}, found {v:.3e}")


def eta_of_block(C: ArrayLike, spec: BlockSpec) -> NDArray:
    """Log-domain block parameter of a block correlation matrix.

    Examples
    --------
    >>> spec = BlockSpec((2,), structure="dbc")
    >>> round(float(eta_of_block([[1, .6], [.6, 1]], spec)[0]), 6)
    0.693147
    """
    C = check_corr(C, tol=1e-10)
    r, c = spec.cells
    if spec.structure == "unrestricted":
        L = matrix_log(C)
        return L[r, c]
    _check_structure_zeros(C, spec, BLOCK_TOL)
    cb = canonical_of_block(C, spec)
    ns = np.asarray(spec.group_sizes, dtype=float)
    lam, U = np.linalg.eigh(cb.A)
    if lam[0] <= 1e-12:
        raise DomainError(f"canonical core A is not positive definite (eigenvalue {lam[0]:.3e})")
    if np.any(cb.delta[ns > 1] <= 0):
        raise DomainError("non-positive within-group eigenvalue delta")
    LA = (U * np.log(lam)) @ U.T
    W = LA.copy()
    multi = ns > 1
    W[np.diag_indices(spec.K)] = np.where(multi, np.diag(LA) - np.log(np.where(multi, cb.delta, 1.0)), 0.0)
    scale = np.sqrt(np.outer(ns, ns))
    return W[r, c] / scale[r, c]


def _eta_array(e: ArrayLike, spec: BlockSpec) -> NDArray:
    e = np.ascontiguousarray(e, dtype=float)
    if e.shape != (spec.n_eta,):
        raise StructureError(f"eta has shape {e.shape}, spec expects ({spec.n_eta},)")
    if not np.all(np.isfinite(e)):
        raise DomainError("eta has non-finite entries")
    return e


def block_of_eta(e: ArrayLike, spec: BlockSpec) -> NDArray:
    """Block correlation matrix with log-domain parameter ``e``.

    Raises
    ------
    DomainError
        If the matrix exponential overflows.
    ConvergenceError
        If the unit-diagonal solve fails.
    """
    e = _eta_array(e, spec)
    r, c = spec.cells
    sizes = spec.canon_sizes
    C, u, resid = _canon.canon_corr(e, r, c, sizes, spec.canon_group, np.zeros(sizes.size))
    if not np.all(np.isfinite(C)):
        raise DomainError("matrix exponential overflow for this eta")
    if not resid < 1e-10:
        raise ConvergenceError(f"unit-diagonal solve failed (residual {resid:.3e})", residual=float(resid))
    C = (C + C.T) / 2
    C[np.diag_indices(spec.n)] = 1.0
    return C


def dcorr_deta(e: ArrayLike, spec: BlockSpec) -> NDArray:
    """Jacobian ``d vecl(C) / d eta'``."""
    e = _eta_array(e, spec)
    r, c = spec.cells
    sizes = spec.canon_sizes
    d = _canon.canon_dcorr(e, r, c, sizes, spec.canon_group, np.zeros(sizes.size))
    rr, cc = _lower_pairs(spec.n)
    return d[:, rr, cc].T


def bit_matrix(spec: BlockSpec) -> NDArray:
    """0/1 matrix ``B`` with ``vecl(log C) = B eta``."""
    rr, cc = _lower_pairs(spec.n)
    g = spec.canon_group
    r, c = spec.cells
    lookup = {(int(a), int(b)): m for m, (a, b) in enumerate(zip(r, c))}
    B = np.zeros((rr.size, spec.n_eta))
    for row, (i, j) in enumerate(zip(rr, cc)):
        m = lookup.get((int(g[i]), int(g[j])))
        if m is not None:
            B[row, m] = 1.0
    return B


def block_loglik_helpers(cb: CanonicalBlock, Y: ArrayLike) -> dict:
    """Log-determinant and quadratic forms in canonical coordinates.

    Parameters
    ----------
    cb : CanonicalBlock
    Y : array_like
        Rotated data ``Q'(X - mu)``.

    Returns
    -------
    dict
        ``logdet`` (``log|C|``), ``quad0`` (``Y_0' A^{-1} Y_0``), ``quadk``
        (``Y_k'Y_k / delta_k`` per group, zero for singletons) and ``quad``
        (their total, equal to ``X' C^{-1} X``).
    """
    Y = np.asarray(Y, dtype=float)
    spec = cb.spec
    K = spec.K
    lam = np.linalg.eigvalsh(cb.A)
    if lam[0] <= 0:
        raise DomainError("canonical core A is singular")
    y0 = Y[:K]
    quad0 = float(y0 @ np.linalg.solve(cb.A, y0))
    quadk = np.zeros(K)
    logdet = float(np.sum(np.log(lam)))
    pos = K
    for k, s in enumerate(spec.group_sizes):
        if s > 1:
            yk = Y[pos : pos + s - 1]
            quadk[k] = yk @ yk / cb.delta[k]
            logdet += (s - 1) * np.log(cb.delta[k])
            pos += s - 1
    return {"logdet": logdet, "quad0": quad0, "quadk": quadk, "quad": quad0 + quadk.sum()}


def project_block(C: ArrayLike, spec: BlockSpec, floor: float = 1e-6) -> tuple[NDArray, bool]:
    """Method-of-moments block estimate from a sample correlation matrix.

    Averages the entries of each cell, zeroes the cells excluded by the
    structure, and floors the canonical eigenvalues if the result is not
    positive definite.

    Returns
    -------
    C_block : ndarray
    repaired : bool
        True if the eigenvalue floor was applied.
    """
    C = np.asarray(C, dtype=float)
    if spec.structure == "unrestricted":
        return C.copy(), False
    R = _cell_means(C, spec)
    sec = spec.sector_of_group
    for k in range(spec.K):
        for l in range(k):
            if spec.structure == "dbc" or (spec.structure == "sbc" and sec[k] != sec[l]):
                R[k, l] = R[l, k] = 0.0
    ns = np.asarray(spec.group_sizes, dtype=float)
    A = R * np.sqrt(np.outer(ns, ns))
    A[np.diag_indices(spec.K)] = 1.0 + (ns - 1.0) * np.diag(R)
    delta = np.where(ns > 1, (ns - np.diag(A)) / np.maximum(ns - 1.0, 1.0), 1.0)
    lam, U = np.linalg.eigh(A)
    repaired = bool(lam[0] < floor or np.any(delta < floor))
    if repaired:
        A = (U * np.maximum(lam, floor)) @ U.T
        delta = np.maximum(delta, floor)
    out = _canon.assemble(A, delta, ns, spec.group_of_asset)
    s = 1.0 / np.sqrt(np.diag(out))
    out = out * np.outer(s, s)
    out[np.diag_indices(spec.n)] = 1.0
    return out, repaired


# ---------------------------------------------------------------------------
# single equicorrelation block
# ---------------------------------------------------------------------------
def eta_of_equicorr(rho: float, n: int) -> float:
    """Log-domain parameter of an n x n equicorrelation matrix."""
    if not (-1.0 / (n - 1) < rho < 1.0):
        raise DomainError(f"equicorrelation {rho} outside (-1/(n-1), 1)")
    return float(np.log1p(n * rho / (1.0 - rho)) / n)


def equicorr_of_eta(eta: float, n: int) -> float:
    """Inverse of :func:`eta_of_equicorr`."""
    x = n * eta
    if x > 0:
        e = np.exp(-x)
        return float((1.0 - e) / (1.0 + (n - 1) * e))
    e = np.expm1(x)
    return float(e / (e + n))


def equicorr_jacobian(rho: float, n: int) -> float:
    """``d eta / d rho`` for an equicorrelation block, ``1 / ((1 - rho)(1 + (n-1) rho))``."""
    return 1.0 / ((1.0 - rho) * (1.0 + (n - 1) * rho))
