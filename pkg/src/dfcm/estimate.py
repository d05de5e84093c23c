"""
Maximum-likelihood drivers for the factor and core models.

Three fitted objects are supported:

``factor``
    Score-driven correlation of the factors, giving orthogonalized factors U.
``joint``
    Loadings of all assets and the idiosyncratic block correlation in one
    likelihood ``l(Z | U)``.
``decoupled``
    Per-asset loading filters (stage 1), then a block correlation filter on
    the standardized residuals (stage 2). The combined likelihood is
    ``l(Z | U) = -sum log omega + l(e)``.

Recursion coefficients are either free per dynamic element
(``pooling="element"``) or shared within a component such as all loadings
(``pooling="component"``). With ``targeting=True`` the long-run levels are
fixed at moment estimates and only persistence, score loadings, penalties
and degrees of freedom are optimized.

All optimizations run L-BFGS-B with numerical gradients on the average
negative log-likelihood in transformed coordinates (``beta = tanh``,
``alpha = exp``, ``nu = 2 + exp``, ``log lambda``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats
from scipy.optimize import minimize

from . import _canon
from .blockcorr import BlockSpec, eta_of_block, project_block
from .convt import ConvTSpec, _standard_draws
from .exceptions import ConvergenceError, DomainError, FilterDivergenceError, SpecError, StructureError
from .loadings import rho_of_tau_nb, tau_of_rho
from .matcorr import gamma_of_corr
from .scoredriven import (
    SCALINGS,
    FilterResult,
    ScoreParams,
    _dist_arrays,
    corr_step,
    filter_core_joint,
    filter_corr,
    filter_equicorr_ht,
    filter_equicorr_mt,
    filter_factor_corr,
    filter_loading_decoupled,
    filter_sector_block,
    joint_step,
)

__all__ = [
    "FitReport",
    "OosReport",
    "fit_factor_model",
    "fit_core_joint",
    "fit_core_decoupled",
    "fit_loading",
    "fit_idiosyncratic",
    "static_block_corr",
    "truncate_small",
    "evaluate_oos",
    "filter_fitted",
    "count_params",
    "bic",
    "loading_path_correlation",
    "simulate_factors",
    "simulate_core",
]

KINDS = ("gauss", "mt", "ct", "ht")
POOLINGS = ("element", "component")
MAX_JOINT_N = 30
NU_STARTS = (5.0, 10.0, 30.0)
PENALTY = 1e6
FTOL = 1e-8
GTOL = 1e-5
FD_STEP = 1e-7
RHO_CAP = 0.95
BURN_IN = 50

# box limits in transformed coordinates
BETA_X = (-3.0, 5.0)
ALPHA_X = (-14.0, 1.5)
NU_X = (math.log(0.05), math.log(500.0))
LAM_X = (-12.0, 12.0)

_SOFT_ERRORS = (DomainError, SpecError, ConvergenceError, StructureError, FilterDivergenceError, np.linalg.LinAlgError,
                FloatingPointError, ZeroDivisionError)


def bic(loglik: float, p: int, T: int) -> float:
    """``-2 loglik + p log T``.

    Examples
    --------
    >>> round(bic(-36124, 85, 4278))
    72959
    """
    return -2.0 * loglik + p * math.log(T)


# ---------------------------------------------------------------------------
# parameter vectors
# ---------------------------------------------------------------------------
class _Vector:
    """Named slices of an unconstrained parameter vector with box limits."""

    def __init__(self):
        self.slices = {}
        self.x0 = []
        self.bounds = []

    def add(self, name, x0, bounds):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        start = len(self.x0)
        self.slices[name] = slice(start, start + x0.size)
        self.x0.extend(x0.tolist())
        self.bounds.extend([bounds] * x0.size)

    def get(self, x, name):
        sl = self.slices.get(name)
        return np.zeros(0) if sl is None else x[sl]

    @property
    def size(self):
        return len(self.x0)


class _Recursion:
    """Maps free coefficients onto the elementwise ``(mu, beta, alpha)`` of a recursion."""

    def __init__(self, target, comp, pooling, targeting, prefix, vec, beta0=0.95, alpha0=0.05):
        if pooling not in POOLINGS:
            raise SpecError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
        self.target = np.asarray(target, dtype=float)
        q = self.target.size
        self.comp = np.arange(q) if pooling == "element" else np.asarray(comp, dtype=np.int64)
        nc = int(self.comp.max()) + 1 if q else 0
        self.targeting = targeting
        self.prefix = prefix
        if not targeting:
            vec.add(prefix + "mu", self.target, (None, None))
        vec.add(prefix + "beta", np.full(nc, math.atanh(beta0)), BETA_X)
        vec.add(prefix + "alpha", np.full(nc, math.log(alpha0)), ALPHA_X)

    def unpack(self, x, vec):
        mu = self.target if self.targeting else vec.get(x, self.prefix + "mu")
        beta = np.tanh(vec.get(x, self.prefix + "beta"))[self.comp]
        alpha = np.exp(vec.get(x, self.prefix + "alpha"))[self.comp]
        return mu, beta, alpha


def _nu_count(kind: str, blocks) -> int:
    return {"gauss": 0, "mt": 1, "ct": len(blocks), "ht": int(sum(blocks))}[kind]


def _make_dist(kind: str, blocks, nu) -> ConvTSpec:
    if kind not in KINDS:
        raise SpecError(f"unknown distribution {kind!r}; expected one of {KINDS}")
    if kind == "gauss":
        return ConvTSpec.gauss(int(sum(blocks)))
    return ConvTSpec.make(kind, blocks, np.asarray(nu, dtype=float))


def _nu_of(x, vec):
    return 2.0 + np.exp(vec.get(x, "nu"))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
@dataclass
class _Opt:
    x: NDArray
    loglik: float
    converged: bool
    message: str
    iterations: int
    evaluations: int
    grad_norm: float
    trace: list
    start_values: list


def _separable_objective(parts_fn, part_fn, owner, vec: _Vector, T: int, count: list):
    """Objective and forward-difference gradient of a sum of per-unit terms.

    ``owner[j]`` is the unit whose term alone depends on coordinate ``j``
    (-1 for shared coordinates), so a perturbation only refilters that unit.
    """
    owner = np.asarray(owner, dtype=np.int64)
    upper = np.array([np.inf if b[1] is None else b[1] for b in vec.bounds])

    def total(parts):
        v = float(np.sum(parts))
        return -v / T if np.isfinite(v) else PENALTY

    def safe(fn, *args):
        count[0] += 1
        try:
            return fn(*args)
        except _SOFT_ERRORS:
            return None

    def fun(x):
        parts = safe(parts_fn, x)
        if parts is None:
            return PENALTY, np.zeros(x.size)
        parts = np.asarray(parts, dtype=float)
        f0 = total(parts)
        g = np.zeros(x.size)
        for j in range(x.size):
            h = FD_STEP if x[j] + FD_STEP <= upper[j] else -FD_STEP
            xj = x.copy()
            xj[j] += h
            if owner[j] < 0:
                new = safe(parts_fn, xj)
                fj = PENALTY if new is None else total(np.asarray(new, dtype=float))
            else:
                pj = safe(part_fn, xj, int(owner[j]))
                if pj is None:
                    fj = PENALTY
                else:
                    alt = parts.copy()
                    alt[owner[j]] = pj
                    fj = total(alt)
            g[j] = (fj - f0) / h
        return f0, g

    return fun


def _optimize(loglik_fn, vec: _Vector, T: int, maxiter: int = 500, multistart: bool = True,
              separable: tuple | None = None) -> _Opt:
    """Maximize ``loglik_fn`` over ``vec``; non-finite values are replaced by a large penalty.

    ``separable = (parts_fn, part_fn, owner)`` supplies a sum-of-terms
    structure that makes the finite-difference gradient cheaper.
    """
    count = [0]

    def f(x):
        count[0] += 1
        try:
            v = loglik_fn(x)
        except _SOFT_ERRORS:
            return PENALTY
        if not np.isfinite(v):
            return PENALTY
        return -v / T

    x0 = np.asarray(vec.x0, dtype=float)
    starts = []
    nu_sl = vec.slices.get("nu")
    if multistart and nu_sl is not None and nu_sl.stop > nu_sl.start:
        best = None
        for nu0 in NU_STARTS:
            xs = x0.copy()
            xs[nu_sl] = math.log(nu0 - 2.0)
            fx = f(xs)
            starts.append({"nu": nu0, "objective": float(fx)})
            if best is None or fx < best[0]:
                best = (fx, xs)
        x0 = best[1]
    a_sl = vec.slices.get("alpha")
    if a_sl is not None and f(x0) >= PENALTY:
        # outlying data can break the filter at the default score loading;
        # retreat towards a static model until the likelihood is finite
        for _ in range(4):
            x0 = x0.copy()
            x0[a_sl] = np.maximum(x0[a_sl] - math.log(10.0), ALPHA_X[0])
            fx = f(x0)
            starts.append({"alpha": float(np.exp(x0[a_sl]).max()), "objective": float(fx)})
            if fx < PENALTY:
                break
    if vec.size == 0:
        fx = f(x0)
        return _Opt(x0, -fx * T, True, "no free parameters", 0, count[0], 0.0, [float(fx)], starts)
    trace = [float(f(x0))]

    def cb(intermediate_result):
        trace.append(float(intermediate_result.fun))

    opts = {"ftol": FTOL, "gtol": GTOL, "maxiter": maxiter}
    if separable is None:
        res = minimize(f, x0, method="L-BFGS-B", bounds=vec.bounds, callback=cb, options=opts | {"eps": FD_STEP})
    else:
        fun = _separable_objective(*separable, vec, T, count)
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=vec.bounds, callback=cb, options=opts)
    fx = float(res.fun)
    if fx >= PENALTY:
        raise FilterDivergenceError("the filter diverges for every parameter value tried; check the data scaling")
    jac = getattr(res, "jac", None)
    gnorm = float(np.max(np.abs(jac))) if jac is not None and len(jac) else 0.0
    return _Opt(
        x=res.x,
        loglik=-fx * T,
        converged=bool(res.success) and fx < PENALTY,
        message=str(res.message),
        iterations=int(res.nit),
        evaluations=count[0],
        grad_norm=gnorm,
        trace=trace,
        start_values=starts,
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
def _to_list(v):
    if isinstance(v, np.ndarray):
        return [_to_list(x) for x in v.tolist()] if v.ndim > 1 else [float(x) for x in v]
    if isinstance(v, dict):
        return {k: _to_list(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_to_list(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _finite_or_none(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


@dataclass
class FitReport:
    """Estimates, fit statistics and convergence diagnostics of one model.

    ``params`` holds elementwise recursion coefficients and degrees of
    freedom, enough to rerun the filters (see :func:`filter_fitted`).
    ``summary`` holds averages of ``mu, beta, alpha`` per component and the
    mean of ``nu`` and ``log lambda``. Filtered paths are kept in ``paths``
    and are not serialized.
    """

    model: str
    dist: str
    structure: str | None
    scaling: str | None
    pooling: str
    targeting: bool
    n: int
    r: int
    T: int
    group_sizes: list
    sector_of_group: list
    loglik: float
    p: int
    bic: float
    summary: dict
    params: dict
    converged: bool
    diagnostics: dict
    components: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def neg_loglik(self) -> float:
        return -self.loglik

    @property
    def spec(self) -> BlockSpec:
        return BlockSpec(tuple(self.group_sizes), tuple(self.sector_of_group), self.structure or "unrestricted")

    def to_dict(self) -> dict:
        out = {
            "model": self.model,
            "dist": self.dist,
            "structure": self.structure,
            "scaling": self.scaling,
            "pooling": self.pooling,
            "targeting": self.targeting,
            "n": self.n,
            "r": self.r,
            "T": self.T,
            "group_sizes": list(self.group_sizes),
            "sector_of_group": list(self.sector_of_group),
            "loglik": self.loglik,
            "neg_loglik": -self.loglik,
            "p": self.p,
            "bic": self.bic,
            "summary": self.summary,
            "params": self.params,
            "converged": self.converged,
            "diagnostics": self.diagnostics,
            "components": self.components,
        }
        return _to_list(out)

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        keys = {f for f in cls.__dataclass_fields__ if f != "paths"}
        return cls(**{k: d[k] for k in keys if k in d})


@dataclass
class OosReport:
    """In-sample and holdout log-likelihoods with frozen parameters."""

    model: str
    dist: str
    structure: str | None
    split: int
    T: int
    loglik_in: float
    loglik_out: float
    n_out: int
    split_label: str | None = None

    @property
    def loglik_out_per_obs(self) -> float:
        return self.loglik_out / self.n_out if self.n_out else float("nan")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "dist": self.dist,
            "structure": self.structure,
            "split": self.split,
            "split_label": self.split_label,
            "T": self.T,
            "loglik_in": self.loglik_in,
            "loglik_out": self.loglik_out,
            "loglik_out_per_obs": self.loglik_out_per_obs,
            "n_out": self.n_out,
        }


def _diag(opt: _Opt) -> dict:
    return {
        "message": opt.message,
        "iterations": opt.iterations,
        "evaluations": opt.evaluations,
        "grad_max": opt.grad_norm,
        "trace": opt.trace,
        "starts": opt.start_values,
    }


def _component_summary(mu, beta, alpha, idx) -> dict:
    idx = np.asarray(idx)
    if idx.size == 0:
        return {"mu": None, "beta": None, "alpha": None}
    return {"mu": float(np.mean(mu[idx])), "beta": float(np.mean(beta[idx])), "alpha": float(np.mean(alpha[idx]))}


def _with_burn_in(rep: "FitReport") -> "FitReport":
    # reported for diagnostics only; estimation and BIC use every observation
    ll = np.asarray(rep.paths["loglik_t"])
    rep.diagnostics["loglik_after_burn_in"] = float(np.sum(ll[BURN_IN:])) if ll.size > BURN_IN else None
    rep.diagnostics["burn_in"] = BURN_IN
    return rep


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------
def count_params(
    model: str,
    r: int,
    spec: BlockSpec | None = None,
    dist: str = "gauss",
    scaling: str = "tikhonov",
    pooling: str = "element",
    factor_blocks=None,
) -> int:
    """Number of estimated parameters.

    Every dynamic element has a long-run level; persistence and score
    loadings are per element (``pooling="element"``) or per component.
    Long-run levels count even when they are set by moment targeting.
    The regularized scaling adds one penalty per asset. Degrees of freedom:
    none (gauss), one (mt), one per group (ct) or per asset (ht).

    Parameters
    ----------
    model : {"factor", "joint", "decoupled", "stage2"}

    Examples
    --------
    >>> spec = BlockSpec((3, 3, 3, 3), (0, 0, 1, 1), "dbc")
    >>> count_params("joint", 8, spec, "gauss")
    312
    """
    if pooling not in POOLINGS:
        raise SpecError(f"unknown pooling {pooling!r}")

    def rec(q, ncomp):
        if q == 0:
            return 0
        return q + 2 * (q if pooling == "element" else ncomp)

    if model == "factor":
        blocks = factor_blocks or (r,)
        if dist == "ht":
            blocks = (1,) * r
        return rec(r * (r - 1) // 2, 1) + _nu_count(dist, blocks)
    if spec is None:
        raise SpecError(f"{model} needs a block spec")
    n, q = spec.n, spec.n_eta
    blocks = spec.group_sizes
    if model == "joint":
        return rec(n * r + q, 1 + (q > 0)) + (n if scaling == "tikhonov" else 0) + _nu_count(dist, blocks)
    if model == "stage2":
        return rec(q, 1) + _nu_count(dist, blocks)
    if model == "decoupled":
        # stage 1: loadings of all assets form one component
        per = (1 if scaling == "tikhonov" else 0) + (0 if dist == "gauss" else 1)
        return rec(n * r, 1) + n * per + rec(q, 1) + _nu_count(dist, blocks)
    raise SpecError(f"unknown model {model!r}")


# ---------------------------------------------------------------------------
# static estimates
# ---------------------------------------------------------------------------
def static_block_corr(E: ArrayLike, spec: BlockSpec, floor: float = 1e-6) -> tuple[NDArray, bool]:
    """Method-of-moments block correlation of a residual panel.

    Averages the sample correlation within each cell, zeroes the cells
    excluded by the structure and repairs positive definiteness by flooring
    the canonical eigenvalues.

    Returns
    -------
    C : ndarray
    repaired : bool
    """
    E = np.asarray(E, dtype=float)
    if E.ndim != 2 or E.shape[1] != spec.n:
        raise SpecError(f"panel has shape {E.shape}, spec expects {spec.n} columns")
    if E.shape[0] <= max(spec.group_sizes):
        raise SpecError("need more observations than the largest group size")
    S = np.corrcoef(E, rowvar=False)
    return project_block(S, spec, floor)


def truncate_small(C: ArrayLike, threshold: float = 0.05) -> NDArray:
    """Set off-diagonal entries with ``|c| < threshold`` to zero (display only)."""
    C = np.array(C, dtype=float)
    off = ~np.eye(C.shape[0], dtype=bool)
    C[off & (np.abs(C) < threshold)] = 0.0
    return C


def _static_loadings(Z: NDArray, U: NDArray) -> NDArray:
    B = np.linalg.lstsq(U, Z, rcond=None)[0].T
    nrm = np.linalg.norm(B, axis=1)
    scale = np.where(nrm > RHO_CAP, RHO_CAP / np.maximum(nrm, 1e-300), 1.0)
    return B * scale[:, None]


def _static_targets(Z: NDArray, U: NDArray, spec: BlockSpec):
    rho = _static_loadings(Z, U)
    om = np.sqrt(1 - np.sum(rho**2, axis=1))
    E = (Z - U @ rho.T) / om
    C, repaired = static_block_corr(E, spec)
    return rho, E, eta_of_block(C, spec), repaired


def _check_panel(Z, U=None):
    Z = np.ascontiguousarray(Z, dtype=float)
    if Z.ndim != 2:
        raise SpecError("panel must be two-dimensional (T x n)")
    if not np.all(np.isfinite(Z)):
        raise DomainError("panel contains non-finite values")
    if U is None:
        return Z
    U = np.ascontiguousarray(U, dtype=float)
    if U.ndim != 2 or U.shape[0] != Z.shape[0]:
        raise SpecError(f"factor panel has shape {U.shape}, expected {Z.shape[0]} rows")
    if not np.all(np.isfinite(U)):
        raise DomainError("factor panel contains non-finite values")
    return Z, U


# ---------------------------------------------------------------------------
# factor model
# ---------------------------------------------------------------------------
def fit_factor_model(
    F: ArrayLike,
    dist: str = "gauss",
    pooling: str = "component",
    targeting: bool = True,
    blocks=None,
    maxiter: int = 500,
) -> FitReport:
    """Fit the score-driven model for the factor correlation matrix.

    Parameters
    ----------
    F : array_like (T, r)
        Standardized factors.
    dist : {"gauss", "mt", "ct", "ht"}
    blocks : sequence of int, optional
        Factor partition for ``ct`` (default: one block).

    Returns
    -------
    FitReport
        ``paths["U"]`` holds the orthogonalized factors and ``paths["gamma"]``
        the filtered log-correlation parameter.
    """
    F = _check_panel(F)
    T, r = F.shape
    blocks = tuple(blocks) if blocks is not None else ((1,) * r if dist == "ht" else (r,))
    q = r * (r - 1) // 2
    target = gamma_of_corr(np.corrcoef(F, rowvar=False)) if q else np.zeros(0)
    vec = _Vector()
    rec = _Recursion(target, np.zeros(q, dtype=np.int64), pooling, targeting, "", vec, 0.95, 0.02)
    if dist != "gauss":
        vec.add("nu", np.full(_nu_count(dist, blocks), math.log(8.0)), NU_X)

    def unpack(x):
        mu, beta, alpha = rec.unpack(x, vec)
        return ScoreParams(mu, beta, alpha), _make_dist(dist, blocks, _nu_of(x, vec))

    def ll(x):
        sp, d = unpack(x)
        return filter_factor_corr(F, sp, d).loglik

    opt = _optimize(ll, vec, T, maxiter)
    sp, d = unpack(opt.x)
    res = filter_factor_corr(F, sp, d)
    p = count_params("factor", r, dist=dist, pooling=pooling, factor_blocks=blocks)
    nu = list(d.nu) if dist != "gauss" else []
    summary = {
        "mu": float(np.mean(sp.mu_bar)) if q else None,
        "beta": float(np.mean(sp.beta)) if q else None,
        "alpha": float(np.mean(sp.alpha)) if q else None,
        "nu_mean": _finite_or_none(np.mean(nu)) if nu else None,
    }
    rep = FitReport(
        model="factor", dist=dist, structure=None, scaling=None, pooling=pooling, targeting=targeting,
        n=r, r=r, T=T, group_sizes=[1] * r, sector_of_group=[0] * r,
        loglik=res.loglik, p=p, bic=bic(res.loglik, p, T), summary=summary,
        params=_to_list({"mu_bar": sp.mu_bar, "beta": sp.beta, "alpha": sp.alpha, "nu": nu, "blocks": list(blocks)}),
        converged=opt.converged, diagnostics=_diag(opt),
    )
    rep.paths = {"gamma": res.path, "U": res.extra["U"], "loglik_t": res.loglik_t}
    return _with_burn_in(rep)


# ---------------------------------------------------------------------------
# joint model
# ---------------------------------------------------------------------------
def _core_setup(Z, U, spec, dist):
    Z, U = _check_panel(Z, U)
    if Z.shape[1] != spec.n:
        raise SpecError(f"panel has {Z.shape[1]} columns, block spec has {spec.n} assets")
    if dist not in KINDS:
        raise SpecError(f"unknown distribution {dist!r}")
    return Z, U


def fit_core_joint(
    Z: ArrayLike,
    U: ArrayLike,
    spec: BlockSpec,
    dist: str = "ct",
    scaling: str = "tikhonov",
    pooling: str = "component",
    targeting: bool = True,
    maxiter: int = 500,
    lam0: float = 1.0,
) -> FitReport:
    """Joint estimation of the loading and idiosyncratic correlation dynamics.

    Components for ``pooling="component"`` are the loadings (all assets and
    factors) and the idiosyncratic correlation.

    Raises
    ------
    SpecError
        If ``n > 30``; the dense joint score is impractical there and the
        decoupled pipeline should be used instead.
    """
    if spec.n > MAX_JOINT_N:
        raise SpecError(f"joint estimation is limited to n <= {MAX_JOINT_N} (got n = {spec.n}); use the decoupled method")
    if scaling not in SCALINGS:
        raise SpecError(f"unknown scaling {scaling!r}")
    Z, U = _core_setup(Z, U, spec, dist)
    T, n = Z.shape
    r = U.shape[1]
    rho0, _, eta0, repaired = _static_targets(Z, U, spec)
    tau0 = np.vstack([tau_of_rho(x) for x in rho0])
    target = np.concatenate([tau0.ravel(), eta0])
    comp = np.r_[np.zeros(n * r, dtype=np.int64), np.ones(spec.n_eta, dtype=np.int64)]
    vec = _Vector()
    rec = _Recursion(target, comp, pooling, targeting, "", vec, 0.95, 0.02)
    if scaling == "tikhonov":
        vec.add("loglam", np.full(n, math.log(lam0)), LAM_X)
    if dist != "gauss":
        vec.add("nu", np.full(_nu_count(dist, spec.group_sizes), math.log(8.0)), NU_X)

    def unpack(x):
        mu, beta, alpha = rec.unpack(x, vec)
        lam = np.exp(vec.get(x, "loglam")) if scaling == "tikhonov" else None
        return ScoreParams(mu, beta, alpha, lam, scaling), _make_dist(dist, spec.group_sizes, _nu_of(x, vec))

    def ll(x):
        sp, d = unpack(x)
        return filter_core_joint(Z, U, sp, spec, d).loglik

    opt = _optimize(ll, vec, T, maxiter)
    sp, d = unpack(opt.x)
    res = filter_core_joint(Z, U, sp, spec, d)
    p = count_params("joint", r, spec, dist, scaling, pooling)
    nu = list(d.nu) if dist != "gauss" else []
    log_lam = np.log(sp.lam).tolist() if sp.lam is not None else []
    q = spec.n_eta
    summary = {
        "tau": _component_summary(sp.mu_bar, sp.beta, sp.alpha, np.arange(n * r)),
        "eta": _component_summary(sp.mu_bar, sp.beta, sp.alpha, np.arange(n * r, n * r + q)),
        "beta_mean": float(np.mean(sp.beta)),
        "alpha_mean": float(np.mean(sp.alpha)),
        "nu_mean": float(np.mean(nu)) if nu else None,
        "log_lam_mean": float(np.mean(log_lam)) if log_lam else None,
    }
    params = {
        "mu_bar": sp.mu_bar, "beta": sp.beta, "alpha": sp.alpha,
        "lam": sp.lam if sp.lam is not None else [], "nu": nu,
    }
    rep = FitReport(
        model="joint", dist=dist, structure=spec.structure, scaling=scaling, pooling=pooling, targeting=targeting,
        n=n, r=r, T=T, group_sizes=list(spec.group_sizes), sector_of_group=list(spec.sector_of_group),
        loglik=res.loglik, p=p, bic=bic(res.loglik, p, T), summary=summary, params=_to_list(params),
        converged=opt.converged, diagnostics=dict(_diag(opt), static_repaired=repaired),
    )
    rep.paths = _joint_paths(res, n, r, spec)
    return _with_burn_in(rep)


def _joint_paths(res: FilterResult, n, r, spec):
    T = res.path.shape[0]
    tau = res.path[:, : n * r].reshape(T, n, r)
    rho = np.empty_like(tau)
    for t in range(T):
        for i in range(n):
            rho[t, i] = rho_of_tau_nb(np.ascontiguousarray(tau[t, i]))
    return {
        "tau": tau,
        "rho": rho,
        "omega": np.sqrt(1 - np.sum(rho**2, axis=2)),
        "eta": res.path[:, n * r :],
        "e": res.extra["e"],
        "loglik_t": res.loglik_t,
    }


# ---------------------------------------------------------------------------
# decoupled model
# ---------------------------------------------------------------------------
def fit_loading(
    z: ArrayLike,
    U: ArrayLike,
    gauss: bool = False,
    scaling: str = "tikhonov",
    pooling: str = "component",
    targeting: bool = True,
    maxiter: int = 500,
    lam0: float = 1.0,
) -> tuple[dict, FilterResult, _Opt]:
    """Stage-1 fit for one asset with Student t (or Gaussian) residuals.

    Returns
    -------
    params : dict
        Elementwise ``mu_bar, beta, alpha``, ``lam`` and ``nu``.
    result : FilterResult
    opt : optimizer record
    """
    z = np.ascontiguousarray(z, dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    T, r = U.shape
    rho0 = _static_loadings(z[:, None], U)[0]
    vec = _Vector()
    rec = _Recursion(tau_of_rho(rho0), np.zeros(r, dtype=np.int64), pooling, targeting, "", vec, 0.95, 0.02)
    if scaling == "tikhonov":
        vec.add("loglam", [math.log(lam0)], LAM_X)
    if not gauss:
        vec.add("nu", [math.log(8.0)], NU_X)

    def unpack(x):
        mu, beta, alpha = rec.unpack(x, vec)
        lam = np.exp(vec.get(x, "loglam")) if scaling == "tikhonov" else None
        nu = math.inf if gauss else float(_nu_of(x, vec)[0])
        return ScoreParams(mu, beta, alpha, lam, scaling), nu

    def ll(x):
        sp, nu = unpack(x)
        return filter_loading_decoupled(z, U, sp, nu).loglik

    opt = _optimize(ll, vec, T, maxiter)
    sp, nu = unpack(opt.x)
    res = filter_loading_decoupled(z, U, sp, nu)
    params = {
        "mu_bar": sp.mu_bar, "beta": sp.beta, "alpha": sp.alpha,
        "lam": sp.lam if sp.lam is not None else [], "nu": nu,
    }
    return params, res, opt


def _stage2_eval(E, mu, beta, alpha, d: ConvTSpec, spec: BlockSpec):
    """Per-step log-likelihood and full ``eta`` path of the stage-2 model.

    Uses the cheapest exact factorization: independent equicorrelation
    blocks (diagonal structure), independent sectors (sparse structure),
    otherwise the full filter. Multivariate t shocks never factorize.
    """
    T = E.shape[0]
    q = spec.n_eta
    kind = d.kind
    if spec.structure == "dbc" and kind != "mt":
        lls = np.zeros(T)
        path = np.zeros((T, q))
        rows, _ = spec.cells
        off = spec.offsets
        for k, s in enumerate(spec.group_sizes):
            X = E[:, off[k] : off[k + 1]]
            if s == 1:
                nu = d.nu[k] if kind == "ct" else (d.nu[off[k]] if kind == "ht" else math.inf)
                lls += _univariate_ll(X[:, 0], nu)
                continue
            m = int(np.flatnonzero(rows == k)[0])
            sp = ScoreParams(mu[m : m + 1], beta[m : m + 1], alpha[m : m + 1])
            if kind == "ht":
                res = filter_equicorr_ht(X, sp, np.asarray(d.nu[off[k] : off[k + 1]]))
            else:
                res = filter_equicorr_mt(X, sp, d.nu[k] if kind == "ct" else math.inf)
            lls += res.loglik_t
            path[:, m] = res.path[:, 0]
        return lls, path
    sp = ScoreParams(mu, beta, alpha)
    if spec.structure == "sbc" and kind != "mt":
        lls = np.zeros(T)
        path = np.zeros((T, q))
        for j, res in enumerate(filter_sector_block(E, sp, spec, d)):
            lls += res.loglik_t
            path[:, spec.sector_eta(j)] = res.path
        return lls, path
    res = filter_corr(E, sp, spec, d)
    return res.loglik_t, res.path


def _univariate_ll(x, nu):
    if math.isinf(nu):
        return stats.norm.logpdf(x)
    c = math.sqrt(nu / (nu - 2))
    return stats.t.logpdf(x * c, nu) + math.log(c)


def fit_idiosyncratic(
    E: ArrayLike,
    spec: BlockSpec,
    dist: str = "ct",
    pooling: str = "component",
    targeting: bool = True,
    maxiter: int = 500,
) -> FitReport:
    """Stage-2 fit of the block correlation filter on standardized residuals."""
    E = _check_panel(E)
    T, n = E.shape
    if n != spec.n:
        raise SpecError(f"panel has {n} columns, block spec has {spec.n} assets")
    C0, repaired = static_block_corr(E, spec)
    target = eta_of_block(C0, spec)
    q = target.size
    vec = _Vector()
    rec = _Recursion(target, np.zeros(q, dtype=np.int64), pooling, targeting, "", vec, 0.95, 0.02)
    if dist != "gauss":
        vec.add("nu", np.full(_nu_count(dist, spec.group_sizes), math.log(8.0)), NU_X)

    def unpack(x):
        mu, beta, alpha = rec.unpack(x, vec)
        return mu, beta, alpha, _make_dist(dist, spec.group_sizes, _nu_of(x, vec))

    def ll(x):
        mu, beta, alpha, d = unpack(x)
        lls, _ = _stage2_eval(E, mu, beta, alpha, d, spec)
        return float(np.sum(lls))

    opt = _optimize(ll, vec, T, maxiter)
    mu, beta, alpha, d = unpack(opt.x)
    lls, path = _stage2_eval(E, mu, beta, alpha, d, spec)
    loglik = float(np.sum(lls))
    p = count_params("stage2", 0, spec, dist, pooling=pooling)
    nu = list(d.nu) if dist != "gauss" else []
    summary = {
        "eta": _component_summary(mu, beta, alpha, np.arange(q)),
        "nu_mean": float(np.mean(nu)) if nu else None,
    }
    rep = FitReport(
        model="stage2", dist=dist, structure=spec.structure, scaling=None, pooling=pooling, targeting=targeting,
        n=n, r=0, T=T, group_sizes=list(spec.group_sizes), sector_of_group=list(spec.sector_of_group),
        loglik=loglik, p=p, bic=bic(loglik, p, T), summary=summary,
        params=_to_list({"mu_bar": mu, "beta": beta, "alpha": alpha, "nu": nu}),
        converged=opt.converged, diagnostics=dict(_diag(opt), static_repaired=repaired),
    )
    rep.paths = {"eta": path, "loglik_t": lls}
    return _with_burn_in(rep)


def fit_core_decoupled(
    Z: ArrayLike,
    U: ArrayLike,
    spec: BlockSpec,
    dist: str = "ct",
    scaling: str = "tikhonov",
    pooling: str = "component",
    targeting: bool = True,
    maxiter: int = 500,
    stage1: list | None = None,
) -> FitReport:
    """Two-stage estimation: per-asset loadings, then the residual correlation.

    Stage 1 uses Student t residuals with their own degrees of freedom
    (Gaussian residuals when ``dist="gauss"``). Stage 2 is fitted on
    ``e = (Z - rho'U) / omega`` from the stage-1 filters.

    Parameters
    ----------
    stage1 : list of (params, FilterResult, opt), optional
        Reuse stage-1 fits (they depend on ``dist`` only through
        Gaussian vs Student t).

    Returns
    -------
    FitReport
        ``loglik`` is ``l(Z | U) = -sum log omega + l(e)``;
        ``components`` has ``loglik_e``, ``log_det_omega`` and the summed
        stage-1 quasi-likelihood.
    """
    Z, U = _core_setup(Z, U, spec, dist)
    T, n = Z.shape
    r = U.shape[1]
    if stage1 is None:
        stage1 = fit_stage1(Z, U, dist == "gauss", scaling, pooling, targeting, maxiter)
    E = np.column_stack([s[1].extra["e"] for s in stage1])
    tau = np.stack([s[1].path for s in stage1], axis=1)
    rho = np.empty_like(tau)
    for t in range(T):
        for i in range(n):
            rho[t, i] = rho_of_tau_nb(np.ascontiguousarray(tau[t, i]))
    omega = np.sqrt(1 - np.sum(rho**2, axis=2))
    s2 = fit_idiosyncratic(E, spec, dist, pooling, targeting, maxiter)
    logdet_t = np.sum(np.log(omega), axis=1)
    loglik_t = s2.paths["loglik_t"] - logdet_t
    loglik = float(np.sum(loglik_t))
    p = count_params("decoupled", r, spec, dist, scaling, pooling)
    mu1 = np.concatenate([np.asarray(s[0]["mu_bar"]) for s in stage1])
    b1 = np.concatenate([np.asarray(s[0]["beta"]) for s in stage1])
    a1 = np.concatenate([np.asarray(s[0]["alpha"]) for s in stage1])
    mu2, b2, a2 = (np.asarray(s2.params[k], dtype=float) for k in ("mu_bar", "beta", "alpha"))
    nu1 = [s[0]["nu"] for s in stage1]
    log_lam = [float(np.log(s[0]["lam"][0])) for s in stage1 if len(s[0]["lam"])]
    nu2 = s2.params["nu"]
    allb = np.concatenate([b1, b2])
    alla = np.concatenate([a1, a2])
    summary = {
        "tau": _component_summary(mu1, b1, a1, np.arange(mu1.size)),
        "eta": s2.summary["eta"],
        "beta_mean": float(np.mean(allb)),
        "alpha_mean": float(np.mean(alla)),
        "nu_mean": float(np.mean(nu2)) if nu2 else None,
        "nu_star_mean": _finite_or_none(np.mean(nu1)),
        "log_lam_mean": float(np.mean(log_lam)) if log_lam else None,
    }
    params = {
        "stage1": [_to_list({k: s[0][k] for k in ("mu_bar", "beta", "alpha", "lam")}) | {"nu": _finite_or_none(s[0]["nu"])}
                   for s in stage1],
        "stage2": s2.params,
    }
    conv = all(s[2].converged for s in stage1) and s2.converged
    diags = {
        "stage1": [{"message": s[2].message, "iterations": s[2].iterations, "converged": s[2].converged} for s in stage1],
        "stage2": s2.diagnostics,
    }
    rep = FitReport(
        model="decoupled", dist=dist, structure=spec.structure, scaling=scaling, pooling=pooling, targeting=targeting,
        n=n, r=r, T=T, group_sizes=list(spec.group_sizes), sector_of_group=list(spec.sector_of_group),
        loglik=loglik, p=p, bic=bic(loglik, p, T), summary=summary, params=params, converged=conv,
        diagnostics=diags,
        components={
            "loglik_e": s2.loglik,
            "log_det_omega": float(np.sum(logdet_t)),
            "loglik_stage1": float(sum(s[1].loglik for s in stage1)),
        },
    )
    rep.paths = {
        "tau": tau, "rho": rho, "omega": omega, "eta": s2.paths["eta"], "e": E,
        "loglik_t": loglik_t, "loglik_e_t": s2.paths["loglik_t"],
    }
    return _with_burn_in(rep)


def fit_stage1(Z, U, gauss=False, scaling="tikhonov", pooling="component", targeting=True, maxiter=500,
               lam0: float = 1.0) -> list:
    """Stage-1 fits of all assets.

    With ``pooling="element"`` every asset is a separate problem. With
    ``pooling="component"`` the loading filters stay separate but share one
    persistence and one score loading, so the objective is the sum of the
    per-asset likelihoods; penalties and degrees of freedom remain per asset.

    Returns
    -------
    list of (params, FilterResult, opt)
    """
    Z, U = _check_panel(Z, U)
    T, n = Z.shape
    r = U.shape[1]
    if pooling == "element":
        return [fit_loading(Z[:, i], U, gauss, scaling, pooling, targeting, maxiter, lam0) for i in range(n)]
    rho0 = _static_loadings(Z, U)
    tau0 = np.vstack([tau_of_rho(x) for x in rho0])
    vec = _Vector()
    rec = _Recursion(tau0.ravel(), np.zeros(n * r, dtype=np.int64), pooling, targeting, "", vec, 0.95, 0.02)
    if scaling == "tikhonov":
        vec.add("loglam", np.full(n, math.log(lam0)), LAM_X)
    if not gauss:
        vec.add("nu", np.full(n, math.log(8.0)), NU_X)

    def unpack(x):
        mu, beta, alpha = rec.unpack(x, vec)
        lam = np.exp(vec.get(x, "loglam")) if scaling == "tikhonov" else None
        nu = np.full(n, math.inf) if gauss else _nu_of(x, vec)
        out = []
        for i in range(n):
            sl = slice(i * r, (i + 1) * r)
            li = None if lam is None else lam[i : i + 1]
            out.append((ScoreParams(mu[sl], beta[sl], alpha[sl], li, scaling), float(nu[i])))
        return out

    def parts(x):
        return np.array([filter_loading_decoupled(Z[:, i], U, sp, nu).loglik for i, (sp, nu) in enumerate(unpack(x))])

    def part(x, i):
        sp, nu = unpack(x)[i]
        return filter_loading_decoupled(Z[:, i], U, sp, nu).loglik

    def ll(x):
        return float(np.sum(parts(x)))

    # per-asset coordinates: the penalties, the degrees of freedom and (without
    # targeting) the long-run loadings
    owner = np.full(vec.size, -1)
    for name, unit in (("loglam", np.arange(n)), ("nu", np.arange(n)), ("mu", np.repeat(np.arange(n), r))):
        sl = vec.slices.get(name)
        if sl is not None:
            owner[sl] = unit
    opt = _optimize(ll, vec, T, maxiter, separable=(parts, part, owner))
    fits = []
    for i, (sp, nu) in enumerate(unpack(opt.x)):
        res = filter_loading_decoupled(Z[:, i], U, sp, nu)
        params = {
            "mu_bar": sp.mu_bar, "beta": sp.beta, "alpha": sp.alpha,
            "lam": sp.lam if sp.lam is not None else [], "nu": nu,
        }
        fits.append((params, res, opt))
    return fits


# ---------------------------------------------------------------------------
# refiltering and out-of-sample evaluation
# ---------------------------------------------------------------------------
def _arr(v):
    return np.asarray(v, dtype=float)


def _nu_list(v):
    return [math.inf if x is None else float(x) for x in v]


def filter_fitted(report: FitReport, Z: ArrayLike, U: ArrayLike | None = None) -> dict:
    """Rerun the filters of a fitted model on new data with frozen parameters.

    For the factor model pass the factor panel as ``Z``.

    Returns
    -------
    dict
        ``loglik_t`` (per-step ``l(Z | U)`` or ``l(F)``) plus model paths.
    """
    P = report.params
    if report.model == "factor":
        F = _check_panel(Z)
        blocks = tuple(P["blocks"])
        d = _make_dist(report.dist, blocks, _nu_list(P["nu"]))
        res = filter_factor_corr(F, ScoreParams(_arr(P["mu_bar"]), _arr(P["beta"]), _arr(P["alpha"])), d)
        return {"loglik_t": res.loglik_t, "gamma": res.path, "U": res.extra["U"]}
    spec = report.spec
    Z, U = _core_setup(Z, U, spec, report.dist)
    d = _make_dist(report.dist, spec.group_sizes, _nu_list(P.get("nu", P.get("stage2", {}).get("nu", []))))
    if report.model == "joint":
        lam = _arr(P["lam"]) if len(P["lam"]) else None
        sp = ScoreParams(_arr(P["mu_bar"]), _arr(P["beta"]), _arr(P["alpha"]), lam, report.scaling)
        res = filter_core_joint(Z, U, sp, spec, d)
        return _joint_paths(res, Z.shape[1], U.shape[1], spec)
    if report.model == "stage2":
        lls, path = _stage2_eval(Z, _arr(P["mu_bar"]), _arr(P["beta"]), _arr(P["alpha"]), d, spec)
        return {"loglik_t": lls, "eta": path}
    if report.model != "decoupled":
        raise SpecError(f"unknown model {report.model!r}")
    E, taus = [], []
    for i, p1 in enumerate(P["stage1"]):
        lam = _arr(p1["lam"]) if len(p1["lam"]) else None
        sp = ScoreParams(_arr(p1["mu_bar"]), _arr(p1["beta"]), _arr(p1["alpha"]), lam, report.scaling)
        nu = math.inf if p1["nu"] is None else float(p1["nu"])
        res = filter_loading_decoupled(Z[:, i], U, sp, nu)
        E.append(res.extra["e"])
        taus.append(res.path)
    E = np.column_stack(E)
    tau = np.stack(taus, axis=1)
    T, n, r = tau.shape
    rho = np.empty_like(tau)
    for t in range(T):
        for i in range(n):
            rho[t, i] = rho_of_tau_nb(np.ascontiguousarray(tau[t, i]))
    omega = np.sqrt(1 - np.sum(rho**2, axis=2))
    s2 = P["stage2"]
    lle, path = _stage2_eval(E, _arr(s2["mu_bar"]), _arr(s2["beta"]), _arr(s2["alpha"]), d, spec)
    return {
        "loglik_t": lle - np.sum(np.log(omega), axis=1),
        "loglik_e_t": lle,
        "tau": tau, "rho": rho, "omega": omega, "eta": path, "e": E,
    }


def evaluate_oos(report: FitReport, Z: ArrayLike, U: ArrayLike | None = None, split: int | None = None,
                 split_label: str | None = None) -> OosReport:
    """Split the log-likelihood of a frozen-parameter filter at ``split``.

    The filter runs through the whole sample, so the holdout starts from
    the last in-sample state. ``report`` should be fitted on ``Z[:split]``.

    Examples
    --------
    A split at the sample end gives an empty holdout with ``loglik_out = 0``.
    """
    Z = np.asarray(Z, dtype=float)
    T = Z.shape[0]
    split = T if split is None else int(split)
    if not 0 < split <= T:
        raise SpecError(f"split {split} must lie in (0, {T}]")
    lls = filter_fitted(report, Z, U)["loglik_t"]
    return OosReport(
        model=report.model, dist=report.dist, structure=report.structure, split=split, T=T,
        loglik_in=float(np.sum(lls[:split])), loglik_out=float(np.sum(lls[split:])), n_out=T - split,
        split_label=split_label,
    )


def loading_path_correlation(a: dict, b: dict) -> float:
    """Average over assets and factors of the correlation between two loading paths."""
    ra = np.asarray(a["rho"])
    rb = np.asarray(b["rho"])
    T, n, r = ra.shape
    vals = []
    for i in range(n):
        for k in range(r):
            x, y = ra[:, i, k], rb[:, i, k]
            if np.std(x) > 0 and np.std(y) > 0:
                vals.append(np.corrcoef(x, y)[0, 1])
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------
def simulate_factors(T: int, params: ScoreParams, dist: ConvTSpec, seed=None) -> dict:
    """Draw factors from the score-driven correlation model.

    Returns
    -------
    dict
        ``F`` (T, r), orthogonalized ``U`` (T, r) and the ``gamma`` path.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = dist.n
    spec = BlockSpec((1,) * r, structure="unrestricted")
    rr, cc = spec.cells
    g, nu, m, consts, phi, psi, c1, c2 = _dist_arrays(dist)
    V = _standard_draws(dist, T, rng)
    F = np.empty((T, r))
    path = np.empty((T, rr.size))
    u = np.zeros(r)
    eta = params.mu_bar.copy()
    for t in range(T):
        path[t] = eta
        if eta.size:
            _, S, _, _, _, _, _ = _canon.canon_state(eta, rr, cc, spec.canon_sizes, spec.canon_group, u, False)
        else:
            S = np.eye(r)
        F[t] = S @ V[t]
        if eta.size:
            _, _, eps, _, _, u, resid = corr_step(F[t], eta, rr, cc, spec.canon_sizes, spec.canon_group, g, nu, m,
                                                  consts, phi, c1, c2, u)
            eta = params.kappa + params.beta * eta + params.alpha * eps
    return {"F": F, "U": V.copy(), "gamma": path}


def simulate_core(U: ArrayLike, params: ScoreParams, spec: BlockSpec, dist: ConvTSpec, seed=None) -> dict:
    """Draw standardized returns from the joint loading and block correlation model.

    ``params`` follows the layout of :func:`filter_core_joint`
    (``tau_1..tau_n`` then ``eta``).

    Returns
    -------
    dict
        ``Z`` (T, n), shocks ``e``, ``tau`` (T, n, r), ``rho``, ``eta`` path.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U = np.ascontiguousarray(U, dtype=float)
    T, r = U.shape
    n = spec.n
    if params.mu_bar.size != n * r + spec.n_eta:
        raise SpecError("parameter size does not match n * r + number of cells")
    rr, cc = spec.cells
    g, nu, m, consts, phi, psi, c1, c2 = _dist_arrays(dist)
    lam = np.zeros(n) if params.lam is None else np.ascontiguousarray(np.broadcast_to(params.lam, (n,)), dtype=float)
    sc = SCALINGS[params.scaling]
    V = _standard_draws(dist, T, rng)
    Z = np.empty((T, n))
    E = np.empty((T, n))
    path = np.empty((T, params.mu_bar.size))
    u = np.zeros(spec.canon_sizes.size)
    zeta = params.mu_bar.copy()
    for t in range(T):
        path[t] = zeta
        rho = np.vstack([rho_of_tau_nb(zeta[i * r : (i + 1) * r]) for i in range(n)])
        om = np.sqrt(1 - np.sum(rho**2, axis=1))
        _, S, _, _, _, _, _ = _canon.canon_state(zeta[n * r :].copy(), rr, cc, spec.canon_sizes, spec.canon_group, u,
                                                 False)
        E[t] = S @ V[t]
        Z[t] = rho @ U[t] + om * E[t]
        _, _, eps, _, _, _, u, status = joint_step(Z[t], U[t], zeta, n, r, lam, sc, rr, cc, spec.canon_sizes,
                                                   spec.canon_group, g, nu, m, consts, phi, psi, c1, c2, u)
        if status != 0 or not np.all(np.isfinite(eps)):
            raise FilterDivergenceError(f"simulated path left the parameter domain at step {t}", step=t)
        zeta = params.kappa + params.beta * zeta + params.alpha * eps
    tau = path[:, : n * r].reshape(T, n, r)
    rho = np.empty_like(tau)
    for t in range(T):
        for i in range(n):
            rho[t, i] = rho_of_tau_nb(np.ascontiguousarray(tau[t, i]))
    return {"Z": Z, "e": E, "tau": tau, "rho": rho, "eta": path[:, n * r :]}
