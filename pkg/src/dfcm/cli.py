"""
Command-line interface.

    dfcm standardize PANEL --out DIR
    dfcm fit PANEL --config CFG --out DIR [--method ...] [--dist ...] [--structure ...] [--scaling ...]
    dfcm simulate --config CFG --params PARAMS --T N --seed S --out DIR
    dfcm evaluate PANEL --config CFG --split DATE --out DIR [--report FIT]

Panels are CSV files with an ISO-8601 date column followed by one column
per series. Reports are JSON documents validated against the schemas in
``dfcm/schemas``. Exit codes: 0 success, 2 invalid input, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from . import _canon, egarch
from . import estimate as est
from .blockcorr import BlockSpec
from .convt import ConvTSpec
from .exceptions import (
    ConditioningError,
    ConvergenceError,
    DomainError,
    FilterDivergenceError,
    SpecError,
    StructureError,
)
from .scoredriven import ScoreParams

log = logging.getLogger("dfcm")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
MIN_ROWS = 100
SIM_START = "2000-01-03"

DEFAULTS = {
    "structure": "fbc",
    "distribution": "ct",
    "factor_distribution": "gauss",
    "method": "decoupled",
    "scaling": "tikhonov",
    "pooling": "component",
    "targeting": True,
    "seed": 0,
    "maxiter": 500,
}


class InputError(ValueError):
    """Malformed files, configs or command-line arguments."""


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------
def load_schema(name: str) -> dict:
    return json.loads(resources.files("dfcm").joinpath("schemas", name).read_text())


def validate(doc: dict, schema: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"{schema}: {where}: {exc.message}") from None


def _clean(obj):
    # JSON has no inf/nan
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _clean(obj.item())
    return obj


def write_json(doc: dict, path: Path, schema: str | None = None) -> None:
    doc = _clean(doc)
    if schema:
        validate(doc, schema)
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def read_panel(path: str | Path, min_rows: int = MIN_ROWS) -> pd.DataFrame:
    """Read a balanced panel of daily returns.

    Raises
    ------
    InputError
        For unparseable dates (with the 1-based data row), non-increasing
        dates, missing or non-numeric cells, or fewer than ``min_rows`` rows.
    """
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    except pd.errors.EmptyDataError:
        raise InputError(f"{path}: empty file") from None
    if raw.shape[1] < 2:
        raise InputError(f"{path}: need a date column and at least one series")
    dates = []
    for k, s in enumerate(raw.iloc[:, 0], start=1):
        try:
            dates.append(dt.date.fromisoformat(s.strip()))
        except ValueError:
            raise InputError(f"{path}: row {k} (line {k + 1}): malformed date {s!r} (expected YYYY-MM-DD)") from None
    for k in range(1, len(dates)):
        if dates[k] <= dates[k - 1]:
            raise InputError(f"{path}: row {k + 1} (line {k + 2}): dates must be strictly increasing")
    cols = list(raw.columns[1:])
    if len(set(cols)) != len(cols):
        raise InputError(f"{path}: duplicate column names")
    vals = raw.iloc[:, 1:].apply(pd.to_numeric, errors="coerce")
    bad = ~np.isfinite(vals.to_numpy(dtype=float))
    if bad.any():
        k, j = np.argwhere(bad)[0]
        raise InputError(f"{path}: row {k + 1} (line {k + 2}), column {cols[j]!r}: missing or non-numeric value")
    if len(dates) < min_rows:
        raise InputError(f"{path}: {len(dates)} rows, need at least {min_rows}")
    vals.index = pd.Index([d.isoformat() for d in dates], name="date")
    return vals.astype(float)


def write_panel(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index_label="date", float_format="%.12g")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
def load_config(path: str | None, args: argparse.Namespace) -> dict:
    if path is None:
        raise InputError("--config is required")
    cfg = read_json(path)
    validate(cfg, "config.schema.json")
    out = dict(DEFAULTS)
    out.update(cfg)
    for flag, key in (("method", "method"), ("dist", "distribution"), ("structure", "structure"),
                      ("scaling", "scaling"), ("seed", "seed"), ("split", "split")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def block_spec(cfg: dict, structure: str | None = None) -> BlockSpec:
    sizes = [len(g) for g in cfg["groups"]]
    sectors = cfg.get("sectors")
    if sectors is not None and len(sectors) != len(sizes):
        raise InputError(f"config has {len(sectors)} sector labels for {len(sizes)} groups")
    try:
        return BlockSpec(tuple(sizes), None if sectors is None else tuple(sectors), structure or cfg["structure"])
    except StructureError as exc:
        raise InputError(f"config: {exc}") from None


def column_layout(cfg: dict, panel_cols: list[str]) -> dict:
    """Asset order implied by the groups and its position in the input panel."""
    assets = [c for g in cfg["groups"] for c in g]
    factors = list(cfg["factors"])
    dup = {c for c in assets + factors if (assets + factors).count(c) > 1}
    if dup:
        raise InputError(f"config lists columns more than once: {sorted(dup)}")
    missing = [c for c in assets + factors if c not in panel_cols]
    if missing:
        raise InputError(f"config columns not in panel: {missing}; panel has {panel_cols}")
    perm = [panel_cols.index(c) for c in assets]
    return {
        "input_order": list(panel_cols),
        "asset_order": assets,
        "factor_order": factors,
        "asset_permutation": perm,
        "reordered": perm != sorted(perm),
    }


def _group_names(cfg):
    names = cfg.get("group_names")
    if names is None:
        return [f"g{k + 1}" for k in range(len(cfg["groups"]))]
    if len(names) != len(cfg["groups"]):
        raise InputError("group_names must have one entry per group")
    return list(names)


def _split_index(index: pd.Index, split: str | None) -> int:
    if split is None:
        raise InputError("--split is required")
    try:
        d = dt.date.fromisoformat(split).isoformat()
    except ValueError:
        raise InputError(f"malformed split date {split!r} (expected YYYY-MM-DD)") from None
    k = int(np.searchsorted(np.asarray(index, dtype=str), d, side="left"))
    if k < 1:
        raise InputError(f"split {d} leaves no in-sample observations")
    return k


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_standardize(args) -> int:
    panel = read_panel(args.panel)
    out = _outdir(args.out)
    Z = {}
    series = []
    for name in panel.columns:
        f = egarch.fit(panel[name].to_numpy())
        Z[name] = f.Z
        series.append({"name": name, **f.summary()})
        log.info("standardized %s (grad %.2e)", name, f.grad_norm)
    zdf = pd.DataFrame(Z, index=panel.index)[list(panel.columns)]
    write_panel(zdf, out / "standardized.csv")
    rep = {"T": len(panel), "start": panel.index[0], "end": panel.index[-1], "series": series}
    write_json(rep, out / "egarch.json", "egarch_report.schema.json")
    return EXIT_OK


def _fit_all(panel: pd.DataFrame, cfg: dict, layout: dict, method: str, dist: str, structure: str):
    F = panel[layout["factor_order"]].to_numpy()
    Z = panel[layout["asset_order"]].to_numpy()
    fac = est.fit_factor_model(F, cfg["factor_distribution"], cfg["pooling"], cfg["targeting"], maxiter=cfg["maxiter"])
    core = _fit_core(Z, fac.paths["U"], cfg, method, dist, structure)
    return fac, core


def _fit_core(Z, U, cfg, method, dist, structure):
    spec = block_spec(cfg, structure)
    kw = dict(dist=dist, scaling=cfg["scaling"], pooling=cfg["pooling"], targeting=cfg["targeting"], maxiter=cfg["maxiter"])
    if method == "joint":
        return est.fit_core_joint(Z, U, spec, **kw)
    return est.fit_core_decoupled(Z, U, spec, **kw)


def _cell_corr_path(eta: np.ndarray, spec: BlockSpec) -> tuple[np.ndarray, list]:
    """Within/between-group correlations (T, K(K+1)/2) along an ``eta`` path."""
    r, c = spec.cells
    K = spec.K
    cells = [(k, l) for l in range(K) for k in range(l, K)]
    out = np.zeros((eta.shape[0], len(cells)))
    off = spec.offsets
    u = np.zeros(spec.canon_sizes.size)
    for t in range(eta.shape[0]):
        C, u, _ = _canon.canon_corr(np.ascontiguousarray(eta[t]), r, c, spec.canon_sizes, spec.canon_group, u)
        for m, (k, l) in enumerate(cells):
            blk = C[off[k] : off[k + 1], off[l] : off[l + 1]]
            if k == l:
                s = blk.shape[0]
                out[t, m] = blk[~np.eye(s, dtype=bool)].mean() if s > 1 else 1.0
            else:
                out[t, m] = blk.mean()
    return out, cells


def _write_paths(out: Path, index, fac, core, layout, cfg, spec):
    fr = layout["factor_order"]
    r = len(fr)
    gnames = [f"{fr[i]}|{fr[j]}" for j in range(r) for i in range(j + 1, r)]
    write_panel(pd.DataFrame(fac.paths["gamma"], index=index, columns=gnames), out / "factor_gamma.csv")
    assets = layout["asset_order"]
    cols = [f"{a}|{f}" for a in assets for f in fr]
    T = len(index)
    write_panel(pd.DataFrame(core.paths["tau"].reshape(T, -1), index=index, columns=cols), out / "loading_tau.csv")
    write_panel(pd.DataFrame(core.paths["rho"].reshape(T, -1), index=index, columns=cols), out / "loading_rho.csv")
    gn = _group_names(cfg)
    if spec.structure == "unrestricted":
        rr, cc = spec.cells
        ecols = [f"{assets[i]}|{assets[j]}" for i, j in zip(rr, cc)]
    else:
        rr, cc = spec.cells
        ecols = [f"{gn[i]}|{gn[j]}" for i, j in zip(rr, cc)]
    write_panel(pd.DataFrame(core.paths["eta"], index=index, columns=ecols), out / "eta.csv")
    if spec.structure != "unrestricted":
        vals, cells = _cell_corr_path(core.paths["eta"], spec)
        write_panel(pd.DataFrame(vals, index=index, columns=[f"{gn[k]}|{gn[l]}" for k, l in cells]),
                    out / "block_corr.csv")


def cmd_fit(args) -> int:
    cfg = load_config(args.config, args)
    panel = read_panel(args.panel)
    layout = column_layout(cfg, list(panel.columns))
    spec = block_spec(cfg)
    out = _outdir(args.out)
    fac, core = _fit_all(panel, cfg, layout, cfg["method"], cfg["distribution"], cfg["structure"])
    doc = {"config": cfg, "columns": layout, "factor": fac.to_dict(), "core": core.to_dict()}
    write_json(doc, out / "fit.json", "fit_report.schema.json")
    _write_paths(out, panel.index, fac, core, layout, cfg, spec)
    return EXIT_OK


def _params_from_doc(doc: dict, cfg: dict):
    validate(doc, "params.schema.json")
    f = doc["factor"]
    fp = f["params"]
    r = len(cfg["factors"])
    blocks = tuple(fp.get("blocks") or ((1,) * r if f["dist"] == "ht" else (r,)))
    fdist = est._make_dist(f["dist"], blocks, fp["nu"])
    fsp = ScoreParams(np.asarray(fp["mu_bar"], float), np.asarray(fp["beta"], float), np.asarray(fp["alpha"], float))
    if fsp.mu_bar.size != r * (r - 1) // 2 or fdist.n != r:
        raise InputError(f"factor parameters do not match the {r} configured factors")
    c = doc["core"]
    cp = c["params"]
    spec = BlockSpec(tuple(c["group_sizes"]), tuple(c["sector_of_group"]), c["structure"])
    sizes = [len(g) for g in cfg["groups"]]
    if list(spec.group_sizes) != sizes:
        raise InputError(f"core parameters have group sizes {list(spec.group_sizes)}, config has {sizes}")
    cdist = est._make_dist(c["dist"], spec.group_sizes, cp["nu"])
    lam = np.asarray(cp["lam"], float) if cp["lam"] else None
    csp = ScoreParams(np.asarray(cp["mu_bar"], float), np.asarray(cp["beta"], float), np.asarray(cp["alpha"], float),
                      lam, c["scaling"])
    eg = {}
    for s in (doc.get("egarch") or {}).get("series", []):
        eg[s["name"]] = egarch.EgarchParams(*(float(s[k]) for k in ("a0", "a1", "b0", "b1", "b2", "b3")))
    return fsp, fdist, csp, spec, cdist, eg


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args)
    if args.params is None:
        raise InputError("--params is required")
    if args.T is None or args.T < 0:
        raise InputError("--T must be a non-negative integer")
    doc = read_json(args.params)
    fsp, fdist, csp, spec, cdist, eg = _params_from_doc(doc, cfg)
    out = _outdir(args.out)
    assets = [c for g in cfg["groups"] for c in g]
    factors = list(cfg["factors"])
    T = int(args.T)
    index = pd.Index([d.date().isoformat() for d in pd.bdate_range(SIM_START, periods=T)], name="date")
    if T == 0:
        write_panel(pd.DataFrame(columns=factors + assets, index=index, dtype=float), out / "panel.csv")
        return EXIT_OK
    rng = np.random.default_rng(int(cfg["seed"]))
    fs = est.simulate_factors(T, fsp, fdist, rng)
    sim = est.simulate_core(fs["U"], csp, spec, cdist, rng)
    data = dict(zip(factors, fs["F"].T))
    data.update(zip(assets, sim["Z"].T))
    for name, p in eg.items():
        if name in data:
            data[name] = egarch.simulate(p, T, innovations=data[name])[0]
    write_panel(pd.DataFrame(data, index=index)[factors + assets], out / "panel.csv")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args)
    panel = read_panel(args.panel)
    layout = column_layout(cfg, list(panel.columns))
    k = _split_index(panel.index, cfg.get("split"))
    out = _outdir(args.out)
    T = len(panel)
    F = panel[layout["factor_order"]].to_numpy()
    Z = panel[layout["asset_order"]].to_numpy()
    results = []
    if args.report is not None:
        doc = read_json(args.report)
        validate(doc, "fit_report.schema.json")
        fac = est.FitReport.from_dict(doc["factor"])
        core = est.FitReport.from_dict(doc["core"])
        U = est.filter_fitted(fac, F)["U"]
        o = est.evaluate_oos(core, Z, U, k, cfg.get("split"))
        results.append(_oos_row(o, core))
        source = "report"
    else:
        if k < MIN_ROWS:
            raise InputError(f"split leaves {k} in-sample rows, need at least {MIN_ROWS}")
        grid = cfg.get("grid", {})
        fac = est.fit_factor_model(F[:k], cfg["factor_distribution"], cfg["pooling"], cfg["targeting"],
                                   maxiter=cfg["maxiter"])
        U = est.filter_fitted(fac, F)["U"]
        for method in grid.get("method", [cfg["method"]]):
            for dist in grid.get("distribution", [cfg["distribution"]]):
                for structure in grid.get("structure", [cfg["structure"]]):
                    core = _fit_core(Z[:k], U[:k], cfg, method, dist, structure)
                    o = est.evaluate_oos(core, Z, U, k, cfg.get("split"))
                    results.append(_oos_row(o, core))
                    log.info("%s %s %s: out-of-sample %.3f", method, dist, structure, o.loglik_out)
        source = "grid"
    best = int(np.argmax([r["loglik_out"] for r in results]))
    for i, r in enumerate(results):
        r["best"] = i == best
    doc = {"split": cfg["split"], "split_index": k, "T": T, "source": source, "results": results, "best": best}
    write_json(doc, out / "oos.json", "oos_report.schema.json")
    return EXIT_OK


def _oos_row(o: est.OosReport, core: est.FitReport) -> dict:
    row = o.to_dict()
    row.pop("model")
    row.update(method=core.model, p=core.p, bic_in=core.bic, converged=core.converged)
    return row


def _outdir(path: str | None) -> Path:
    if path is None:
        raise InputError("--out is required")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfcm", description="Dynamic factor correlation models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, panel=True):
        if panel:
            p.add_argument("panel", help="CSV panel (date column, then one column per series)")
        p.add_argument("--config", help="JSON model configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="random seed (non-negative)")

    def model_flags(p):
        p.add_argument("--method", choices=["joint", "decoupled"])
        p.add_argument("--dist", choices=["gauss", "mt", "ct", "ht"])
        p.add_argument("--structure", choices=["unrestricted", "fbc", "sbc", "dbc"])
        p.add_argument("--scaling", choices=["identity", "mp", "tikhonov"])

    p = sub.add_parser("standardize", help="AR(1)-EGARCH standardization of every series")
    common(p)
    p.set_defaults(func=cmd_standardize)

    p = sub.add_parser("fit", help="fit the factor model and the core model")
    common(p)
    model_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="draw a panel from fitted or given parameters")
    common(p, panel=False)
    model_flags(p)
    p.add_argument("--params", help="JSON parameters (e.g. fit.json of a joint fit)")
    p.add_argument("--T", type=int, help="number of observations")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="out-of-sample log-likelihood at a split date")
    common(p)
    model_flags(p)
    p.add_argument("--split", help="first out-of-sample date (YYYY-MM-DD)")
    p.add_argument("--report", help="fit.json with frozen parameters (otherwise fit the configured grid)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, SpecError, StructureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DomainError, ConvergenceError, FilterDivergenceError, ConditioningError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
