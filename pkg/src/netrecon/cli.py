"""Command-line pipelines: CSV ingestion, estimation, bootstrap, comparison and reports.

File schemas (UTF-8, header row, '.' decimal, fixed column order)::

    edges.csv         t,i,j,value
    margins.csv       t,node,row_sum,col_sum
    nodal.csv         t,node,name,value
    dyadic.csv        t,i,j,name,value
    fits.csv          t,i,j,mu_hat,ci_lo,ci_hi,pi_lo,pi_hi
    coefficients.csv  t,name,estimate
    metrics.csv       method,t,l1,l2   (plus overall/average/se rows)

Edges absent from ``edges.csv`` are unknown, not zero; they only matter for
evaluation. Every run writes ``manifest.json`` with the configuration, seeds,
package versions, input digests and per-period diagnostics.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import sys
import urllib.request
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import scipy

from netrecon import baselines, simlab
from netrecon.core import (
    FlowMatrix,
    InfeasibleMarginsError,
    MarginSystem,
    NodeSet,
    ReducedProblem,
    build_routing_matrix,
    reduce_problem,
    summarize_errors,
)
from netrecon.ipfp import FitResult, IpfpConfig, fit_ipfp
from netrecon.raneff import fit_random_effects
from netrecon.regression import AugLagState, Covariate, ModelSpec, build_design, fit_constrained_ml
from netrecon.uncertainty import IntervalSet, bootstrap, intervals

log = logging.getLogger("netrecon")

METHODS = ("ipfp", "regression", "raneff", "gravity", "tomogravity", "nnlasso",
           "ecological", "hierarchical")
EXIT_CODES = {"usage": 2, "schema": 3, "data": 4, "estimator": 5, "network": 6, "io": 7}
CACHE_ENV = "NETRECON_CACHE"


class CliError(Exception):
    """Failure with a machine-readable category (see ``EXIT_CODES``)."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category

    @property
    def code(self) -> int:
        return EXIT_CODES[self.category]


# --------------------------------------------------------------------------
# CSV primitives


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if np.isnan(v) else repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _rows(path, header: Sequence[str]):
    """Yield ``(line_number, record)`` after checking the exact header."""
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise CliError("io", f"{path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got is None or [h.strip() for h in got] != list(header):
            raise CliError("schema", f"{path}:1: expected header {','.join(header)}, got "
                                     f"{','.join(got or [])}")
        for rec in reader:
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise CliError("schema", f"{path}:{reader.line_num}: expected {len(header)} "
                                         f"fields, got {len(rec)}")
            yield reader.line_num, [c.strip() for c in rec]


def _num(text: str, path, line: int, what: str, *, allow_empty=False) -> float:
    if allow_empty and text == "":
        return float("nan")
    try:
        v = float(text)
    except ValueError:
        raise CliError("schema", f"{path}:{line}: {what} {text!r} is not a number") from None
    if not allow_empty and not np.isfinite(v):
        raise CliError("schema", f"{path}:{line}: {what} must be finite")
    return v


def _nonneg(v: float, path, line: int, what: str) -> float:
    if v < 0:
        raise CliError("data", f"{path}:{line}: negative {what} {v!r}")
    return v


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True, eq=False)
class Dataset:
    """Margins, optional true flows and covariates per period.

    ``nodal[t][name]`` maps node labels to values, ``dyadic[t][name]`` maps
    ``(i, j)`` label pairs. ``truth[t]`` holds only the observed edges.
    """

    nodes: NodeSet
    periods: tuple[str, ...]
    margins: dict[str, MarginSystem]
    truth: dict[str, FlowMatrix] = field(default_factory=dict)
    nodal: dict = field(default_factory=dict)
    dyadic: dict = field(default_factory=dict)
    problems: dict[str, ReducedProblem] = field(default_factory=dict)
    reduction_errors: dict[str, str] = field(default_factory=dict)

    def covariates(self, t: str) -> dict:
        return {**self.nodal.get(t, {}), **self.dyadic.get(t, {})}


def _read_edges(path):
    out: dict[str, dict[tuple[str, str], float]] = {}
    for line, (t, i, j, v) in _rows(path, ("t", "i", "j", "value")):
        if i == j:
            raise CliError("data", f"{path}:{line}: self-loop ({t},{i},{j})")
        cell = out.setdefault(t, {})
        if (i, j) in cell:
            raise CliError("data", f"{path}:{line}: duplicate edge ({t},{i},{j})")
        cell[(i, j)] = _nonneg(_num(v, path, line, "value"), path, line, "value")
    return out


def _read_margins(path):
    out: dict[str, dict[str, tuple[float, float]]] = {}
    for line, (t, node, r, c) in _rows(path, ("t", "node", "row_sum", "col_sum")):
        per = out.setdefault(t, {})
        if node in per:
            raise CliError("data", f"{path}:{line}: duplicate node ({t},{node})")
        per[node] = (_nonneg(_num(r, path, line, "row_sum"), path, line, "row_sum"),
                     _nonneg(_num(c, path, line, "col_sum"), path, line, "col_sum"))
    return out


def _read_nodal(path):
    out: dict = {}
    for line, (t, node, name, v) in _rows(path, ("t", "node", "name", "value")):
        tab = out.setdefault(t, {}).setdefault(name, {})
        if node in tab:
            raise CliError("data", f"{path}:{line}: duplicate nodal value ({t},{node},{name})")
        tab[node] = _num(v, path, line, "value")
    return out


def _read_dyadic(path):
    out: dict = {}
    for line, (t, i, j, name, v) in _rows(path, ("t", "i", "j", "name", "value")):
        tab = out.setdefault(t, {}).setdefault(name, {})
        if (i, j) in tab:
            raise CliError("data", f"{path}:{line}: duplicate dyadic value ({t},{i},{j},{name})")
        tab[(i, j)] = _num(v, path, line, "value")
    return out


def _complete(edges: Mapping, n: int) -> bool:
    return len(edges) == n * (n - 1)


def load_dataset(margins=None, edges=None, nodal=None, dyadic=None, *,
                 lag: str | None = None, rtol: float = 1e-8) -> Dataset:
    """Read and validate the CSV inputs.

    At least one of ``margins`` and ``edges`` is required; without margins
    they are derived from the edges. When both are given, complete periods
    must reproduce the margins and incomplete ones may not exceed them.
    ``lag`` names a dyadic covariate holding the previous period's edges.
    """
    if margins is None and edges is None:
        raise CliError("usage", "need margins.csv or edges.csv")
    E = _read_edges(edges) if edges is not None else {}
    M = _read_margins(margins) if margins is not None else {}
    periods = list(M) if M else list(E)
    extra = [t for t in E if t not in periods]
    if extra:
        raise CliError("data", f"{edges}: periods {extra} have no margins")

    labels: dict[str, None] = {}
    for t in periods:
        for node in M.get(t, {}):
            labels.setdefault(node)
        for i, j in E.get(t, {}):
            labels.setdefault(i)
            labels.setdefault(j)
    if len(labels) < 2:
        raise CliError("data", "a dataset needs at least two nodes")
    nodes = NodeSet(tuple(labels))
    n = nodes.n
    rt = build_routing_matrix(nodes)

    ms, truth = {}, {}
    for t in periods:
        e = E.get(t, {})
        if e:
            s = [nodes.index(i) for i, _ in e]
            r = [nodes.index(j) for _, j in e]
            truth[t] = FlowMatrix(nodes, s, r, list(e.values()), t)
            rs = np.bincount(s, weights=list(e.values()), minlength=n)
            cs = np.bincount(r, weights=list(e.values()), minlength=n)
        if t in M:
            rows = np.zeros(n)
            cols = np.zeros(n)
            for node, (a, b) in M[t].items():
                rows[nodes.index(node)], cols[nodes.index(node)] = a, b
            if e:
                tol = rtol * max(1.0, rows.sum())
                if _complete(e, n):
                    bad = np.flatnonzero((np.abs(rs - rows) > tol) | (np.abs(cs - cols) > tol))
                else:
                    bad = np.flatnonzero((rs - rows > tol) | (cs - cols > tol))
                if len(bad):
                    raise CliError("data", f"period {t}: edges disagree with margins at node "
                                           f"{nodes.labels[bad[0]]}")
        else:
            rows, cols = rs, cs
        try:
            ms[t] = MarginSystem(rt, np.concatenate([rows, cols]))
        except ValueError as exc:
            raise CliError("data", f"period {t}: {exc}") from None

    def check_nodes(tab, path, what):
        for t, names in tab.items():
            if t not in ms:
                raise CliError("data", f"{path}: {what} for unknown period {t}")
            for name, vals in names.items():
                for key in vals:
                    for lab in (key if isinstance(key, tuple) else (key,)):
                        if lab not in labels:
                            raise CliError("data", f"{path}: {what} {name!r} names unknown "
                                                   f"node {lab} in period {t}")

    nod = _read_nodal(nodal) if nodal is not None else {}
    dya = _read_dyadic(dyadic) if dyadic is not None else {}
    check_nodes(nod, nodal, "nodal covariate")
    check_nodes(dya, dyadic, "dyadic covariate")
    if lag:
        if not E:
            raise CliError("usage", "the lag transform needs edges.csv")
        for prev, t in zip(periods, periods[1:]):
            dya.setdefault(t, {})[lag] = dict(E.get(prev, {}))

    problems, failed = {}, {}
    for t in periods:
        try:
            problems[t] = reduce_problem(ms[t])
        except InfeasibleMarginsError as exc:
            failed[t] = str(exc)
    for t, names in dya.items():
        if t not in problems:
            continue
        p = problems[t]
        for name, tab in names.items():
            for a, b in zip(p.senders, p.receivers):
                key = (nodes.labels[a], nodes.labels[b])
                if key not in tab:
                    where = dyadic if name != lag else edges
                    raise CliError("data", f"{where}: dyadic covariate {name!r} has no value "
                                           f"for active cell ({t},{key[0]},{key[1]})")
    return Dataset(nodes, tuple(periods), ms, truth, nod, dya, problems, failed)


def write_dataset(ds: Dataset, out_dir) -> dict[str, Path]:
    """Write ``margins``, ``edges``, ``nodal`` and ``dyadic`` CSVs (non-empty ones)."""
    out = Path(out_dir)
    lab = ds.nodes.labels
    paths = {"margins": write_csv(out / "margins.csv", ("t", "node", "row_sum", "col_sum"), [
        (t, lab[k], ds.margins[t].row_sums[k], ds.margins[t].col_sums[k])
        for t in ds.periods for k in range(ds.nodes.n)])}
    if ds.truth:
        paths["edges"] = write_csv(out / "edges.csv", ("t", "i", "j", "value"), [
            (t, a, b, v) for t in ds.periods if t in ds.truth
            for (a, b), v in zip(ds.truth[t].cells, ds.truth[t].values)])
    if ds.nodal:
        paths["nodal"] = write_csv(out / "nodal.csv", ("t", "node", "name", "value"), [
            (t, node, name, v) for t in ds.periods for name, tab in ds.nodal.get(t, {}).items()
            for node, v in tab.items()])
    if ds.dyadic:
        paths["dyadic"] = write_csv(out / "dyadic.csv", ("t", "i", "j", "name", "value"), [
            (t, i, j, name, v) for t in ds.periods for name, tab in ds.dyadic.get(t, {}).items()
            for (i, j), v in tab.items()])
    return paths


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on besides the data; echoed in the manifest."""

    method: str = "ipfp"
    covariates: tuple[tuple[str, str, str], ...] = ()
    seed: int = 0
    bootstrap_B: int = 0
    level: float = 0.95
    workers: int = 1
    ipfp: dict = field(default_factory=dict)
    auglag: dict = field(default_factory=dict)
    tomogravity: dict = field(default_factory=dict)
    nnlasso: dict = field(default_factory=dict)
    hierarchical: dict = field(default_factory=dict)
    ecological: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise CliError("usage", f"unknown method {self.method!r}; choose from {METHODS}")
        covs = tuple(tuple(c) if not isinstance(c, Mapping) else
                     (c["name"], c["kind"], c.get("transform", "identity"))
                     for c in self.covariates)
        object.__setattr__(self, "covariates", covs)
        if self.method == "hierarchical" and "target_density" not in self.hierarchical \
                and "p" not in self.hierarchical and "alpha" not in self.hierarchical:
            raise CliError("usage", "method hierarchical needs hierarchical.target_density")
        if self.bootstrap_B < 0 or self.workers < 1:
            raise CliError("usage", "bootstrap_B must be >= 0 and workers >= 1")
        try:
            self.spec()
            self.solver(self.method)
        except (TypeError, ValueError) as exc:
            raise CliError("usage", f"invalid configuration: {exc}") from None

    @classmethod
    def from_mapping(cls, data: Mapping) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise CliError("usage", f"unknown configuration keys {unknown}")
        return cls(**data)

    def spec(self) -> ModelSpec:
        return ModelSpec(tuple(Covariate(*c) for c in self.covariates),
                         random_effects=self.method == "raneff")

    def solver(self, method: str):
        if method == "ipfp":
            return IpfpConfig(**self.ipfp)
        if method in ("regression", "raneff"):
            return AugLagState(**self.auglag)
        if method == "tomogravity":
            return baselines.TomogravityConfig(**self.tomogravity)
        if method == "nnlasso":
            return baselines.LassoConfig(**self.nnlasso)
        if method == "hierarchical":
            return baselines.HierarchicalConfig(**{"seed": self.seed, **self.hierarchical})
        return None

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["covariates"] = [list(c) for c in self.covariates]
        return d


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise CliError("io", f"{path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError("schema", f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise CliError("schema", f"{path}: configuration must be a JSON object")
    return data


# --------------------------------------------------------------------------
# estimation


@dataclass(frozen=True, eq=False)
class PeriodResult:
    t: str
    method: str
    estimate: FlowMatrix | None = None
    fit: FitResult | None = None
    bands: IntervalSet | None = None
    problem: ReducedProblem | None = None
    error: str | None = None


def period_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def estimator(method: str, config: RunConfig, ds: Dataset, t: str) -> Callable:
    """``problem -> FitResult`` for one period."""
    solver = config.solver(method)
    if method == "ipfp":
        return lambda p: fit_ipfp(p, solver)
    if method in ("regression", "raneff"):
        fit = fit_constrained_ml if method == "regression" else fit_random_effects
        data = ds.covariates(t)
        spec = config.spec()

        def run(p):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                design = build_design(p, spec, data)
            return fit(p, design, solver)
        return run
    if method == "gravity":
        return baselines.gravity
    if method == "tomogravity":
        return lambda p: baselines.tomogravity(p, solver)
    if method == "nnlasso":
        return lambda p: baselines.nn_lasso(p, solver)
    if method == "hierarchical":
        k = ds.periods.index(t)
        cfg = dataclasses.replace(solver, seed=period_seed(config.seed, k))
        return lambda p: baselines.hierarchical_sample(p, cfg)
    raise CliError("usage", f"method {method!r} is not estimated per period")


def _run_period(method: str, config: RunConfig, ds: Dataset, t: str) -> PeriodResult:
    if t in ds.reduction_errors:
        return PeriodResult(t, method, error=ds.reduction_errors[t])
    prob = ds.problems[t]
    try:
        est = estimator(method, config, ds, t)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = est(prob)
            bands = None
            if config.bootstrap_B:
                boot = bootstrap(fit, prob, B=config.bootstrap_B,
                                 seed=period_seed(config.seed, ds.periods.index(t)),
                                 estimator=est)
                bands = intervals(boot, fit, config.level)
    except CliError:
        raise
    except (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return PeriodResult(t, method, problem=prob, error=f"{type(exc).__name__}: {exc}")
    return PeriodResult(t, method, prob.recompose(fit.mu, t), fit, bands, prob)


def _run_ecological(config: RunConfig, ds: Dataset) -> list[PeriodResult]:
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            shares, preds = baselines.ecological_regression(
                [ds.margins[t] for t in ds.periods], **config.ecological)
        for w in caught:
            log.warning("ecological: %s", w.message)
    except ValueError as exc:
        return [PeriodResult(t, "ecological", error=str(exc)) for t in ds.periods]
    return [PeriodResult(t, "ecological", p.with_values(p.values, t), problem=ds.problems.get(t))
            for t, p in zip(ds.periods, preds)]


def run_method(method: str, config: RunConfig, ds: Dataset) -> list[PeriodResult]:
    """Fit every period; failures are recorded, not raised. Output is in period order."""
    if method == "ecological":
        return _run_ecological(config, ds)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as ex:
            return list(ex.map(lambda t: _run_period(method, config, ds, t), ds.periods))
    return [_run_period(method, config, ds, t) for t in ds.periods]


def _on_cells(est: FlowMatrix, truth: FlowMatrix) -> FlowMatrix:
    pos = {k: q for q, k in enumerate(est.cell_keys())}
    vals = [est.values[pos[k]] if k in pos else 0.0 for k in truth.cell_keys()]
    return truth.with_values(vals)


def metric_rows(method: str, results: Sequence[PeriodResult], ds: Dataset) -> list[tuple]:
    """Per-period L1/L2 on the observed edges plus overall, average and SE rows."""
    per = []
    for r in results:
        tru = ds.truth.get(r.t)
        if r.estimate is None or tru is None:
            continue
        d = _on_cells(r.estimate, tru).values - tru.values
        per.append((r.t, float(np.abs(d).sum()), float(np.sqrt(d @ d))))
    if not per:
        return []
    rep = summarize_errors(per)
    return ([(method, t, a, b) for t, a, b in per]
            + [(method, "overall", rep.overall_l1, rep.overall_l2),
               (method, "average", rep.average_l1, rep.average_l2),
               (method, "se", rep.se_l1, rep.se_l2)])


def fit_rows(results: Sequence[PeriodResult]) -> list[tuple]:
    rows = []
    for r in results:
        if r.estimate is None:
            continue
        est = r.estimate
        nan = np.full(est.N, np.nan)
        lo_c, hi_c, lo_p, hi_p = nan, nan, nan, nan
        if r.bands is not None and r.problem is not None:
            lo_c, hi_c, lo_p, hi_p = (np.zeros(est.N) for _ in range(4))
            m = r.problem.cell_map
            lo_c[m], hi_c[m] = r.bands.ci_lo, r.bands.ci_hi
            lo_p[m], hi_p[m] = r.bands.pi_lo, r.bands.pi_hi
        for q, (a, b) in enumerate(est.cells):
            rows.append((r.t, a, b, est.values[q], lo_c[q], hi_c[q], lo_p[q], hi_p[q]))
    return rows


def coefficient_rows(results: Sequence[PeriodResult], ds: Dataset) -> list[tuple]:
    rows = []
    for r in results:
        th = r.fit.theta if r.fit is not None else None
        if th is None:
            continue
        rows.append((r.t, "intercept", th.intercept))
        rows += [(r.t, f"delta:{lab}", v) for lab, v in zip(ds.nodes.labels, th.delta)]
        rows += [(r.t, f"gamma:{lab}", v) for lab, v in zip(ds.nodes.labels, th.gamma)]
        rows += [(r.t, f"beta:{name}", v) for name, v in zip(th.names, th.beta)]
        vc = r.fit.vartheta
        if vc is not None:
            rows += [(r.t, "sigma2_delta", vc.sigma2_delta), (r.t, "sigma2_gamma", vc.sigma2_gamma),
                     (r.t, "sigma_dg", vc.sigma_dg)]
    return rows


def coverage_rows(results: Sequence[PeriodResult], ds: Dataset) -> list[tuple]:
    """Share of observed edges inside their prediction interval, per period."""
    out = []
    for r in results:
        tru = ds.truth.get(r.t)
        if r.bands is None or tru is None:
            continue
        lo = np.zeros(r.estimate.N)
        hi = np.zeros(r.estimate.N)
        lo[r.problem.cell_map], hi[r.problem.cell_map] = r.bands.pi_lo, r.bands.pi_hi
        lo = _on_cells(r.estimate.with_values(lo), tru).values
        hi = _on_cells(r.estimate.with_values(hi), tru).values
        out.append((r.t, float(np.mean((tru.values >= lo) & (tru.values <= hi)))))
    return out


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    from netrecon import __version__

    return {"netrecon": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _diag(r: PeriodResult) -> dict:
    d: dict[str, Any] = {"t": r.t, "ok": r.error is None}
    if r.error is not None:
        d["error"] = r.error
    if r.fit is not None:
        d.update(converged=bool(r.fit.converged), iterations=int(r.fit.iterations),
                 residual=float(r.fit.residual))
    return d


def write_manifest(path, command: str, config: RunConfig, inputs: Mapping, outputs: Sequence,
                   diagnostics: Mapping | None = None, extra: Mapping | None = None) -> Path:
    data = {
        "command": command,
        "config": config.as_dict(),
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in inputs.items()
                   if v is not None},
        "outputs": sorted(Path(p).name for p in outputs),
        "versions": _versions(),
        "diagnostics": dict(diagnostics or {}),
        **dict(extra or {}),
    }
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def run_pipeline(ds: Dataset, config: RunConfig, out_dir, *, methods: Sequence[str] | None = None,
                 command: str = "reconstruct", inputs: Mapping | None = None) -> dict[str, Path]:
    """Fit, evaluate against any supplied truth and write the report files.

    A single method writes ``fits.csv``; several write ``fits_<method>.csv``.
    Estimator failures are listed in the manifest and leave other periods
    intact; only a run in which every period fails raises.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = list(methods or [config.method])
    for m in methods:
        if m not in METHODS:
            raise CliError("usage", f"unknown method {m!r}")
    written: dict[str, Path] = {}
    metrics, diags, coverage = [], {}, {}
    for m in methods:
        res = run_method(m, config, ds)
        name = "fits.csv" if len(methods) == 1 else f"fits_{m}.csv"
        written[name] = write_csv(out / name, FITS_HEADER, fit_rows(res))
        coef = coefficient_rows(res, ds)
        if coef:
            cname = "coefficients.csv" if len(methods) == 1 else f"coefficients_{m}.csv"
            written[cname] = write_csv(out / cname, ("t", "name", "estimate"), coef)
        metrics += metric_rows(m, res, ds)
        diags[m] = [_diag(r) for r in res]
        cov = coverage_rows(res, ds)
        if cov:
            coverage[m] = dict(cov)
        for r in res:
            if r.error:
                log.warning("%s failed in period %s: %s", m, r.t, r.error)
    if metrics:
        written["metrics.csv"] = write_csv(out / "metrics.csv", METRICS_HEADER, metrics)
    extra = {"methods": methods, "periods": list(ds.periods),
             "period_seeds": {t: period_seed(config.seed, k) for k, t in enumerate(ds.periods)}}
    if coverage:
        extra["pi_coverage"] = coverage
    written["manifest.json"] = write_manifest(out / "manifest.json", command, config,
                                              inputs or {}, list(written.values()), diags, extra)
    if all(not d["ok"] for per in diags.values() for d in per):
        raise CliError("estimator", "every period failed; see manifest.json")
    return written


FITS_HEADER = ("t", "i", "j", "mu_hat", "ci_lo", "ci_hi", "pi_lo", "pi_hi")
METRICS_HEADER = ("method", "t", "l1", "l2")


def read_fits(path) -> list[tuple]:
    out = []
    for line, (t, i, j, *vals) in _rows(path, FITS_HEADER):
        out.append((t, i, j, *(_num(v, path, line, "value", allow_empty=True) for v in vals)))
    return out


def read_metrics(path) -> list[tuple]:
    return [(m, t, _num(a, path, ln, "l1", allow_empty=True), _num(b, path, ln, "l2", allow_empty=True))
            for ln, (m, t, a, b) in _rows(path, METRICS_HEADER)]


def read_coefficients(path) -> list[tuple]:
    return [(t, name, _num(v, path, ln, "estimate"))
            for ln, (t, name, v) in _rows(path, ("t", "name", "estimate"))]


# --------------------------------------------------------------------------
# simulation output


def simulate_dataset(n: int, periods: int, beta: float, seed: int) -> Dataset:
    """Synthetic panel: independent instances per period with covariate ``z``."""
    nodes = NodeSet.of_size(n)
    rt = build_routing_matrix(nodes)
    ts = tuple(f"{k + 1}" for k in range(periods))
    ms, truth, dya, probs = {}, {}, {}, {}
    for k, t in enumerate(ts):
        inst = simlab.run_dgp(n, beta, seed, k)
        x = FlowMatrix.from_dense(nodes, inst.x, period=t)
        truth[t] = x
        ms[t] = MarginSystem(rt, rt.matrix @ x.values)
        probs[t] = reduce_problem(ms[t])
        dya[t] = {"z": {(a, b): float(inst.ztilde[nodes.index(a), nodes.index(b)])
                        for a, b in nodes.off_diagonal()}}
    return Dataset(nodes, ts, ms, truth, {}, dya, probs, {})


# --------------------------------------------------------------------------
# remote data


def _adapt_bis_lbs(text: str) -> dict[str, str]:
    """Locational banking statistics, long format, to ``edges.csv``."""
    rdr = csv.DictReader(io.StringIO(text))
    need = {"L_REP_CTY", "L_CP_COUNTRY", "TIME_PERIOD", "OBS_VALUE"}
    if not need <= set(rdr.fieldnames or ()):
        raise CliError("schema", f"bis-lbs input lacks columns {sorted(need - set(rdr.fieldnames or ()))}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("t", "i", "j", "value"))
    for rec in rdr:
        if rec["L_REP_CTY"] == rec["L_CP_COUNTRY"] or rec["OBS_VALUE"] in ("", "NaN"):
            continue
        w.writerow((rec["TIME_PERIOD"], rec["L_REP_CTY"], rec["L_CP_COUNTRY"],
                    repr(float(rec["OBS_VALUE"]))))
    return {"edges.csv": buf.getvalue()}


def _adapt_dyadic(name: str):
    def adapt(text: str) -> dict[str, str]:
        rdr = csv.DictReader(io.StringIO(text))
        need = {"period", "reporter", "partner", "value"}
        if not need <= set(rdr.fieldnames or ()):
            raise CliError("schema", f"{name} input needs columns {sorted(need)}")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "i", "j", "name", "value"))
        for rec in rdr:
            if rec["reporter"] != rec["partner"] and rec["value"] != "":
                w.writerow((rec["period"], rec["reporter"], rec["partner"], name,
                            repr(float(rec["value"]))))
        return {"dyadic.csv": buf.getvalue()}
    return adapt


def _adapt_nodal(text: str) -> dict[str, str]:
    rdr = csv.DictReader(io.StringIO(text))
    need = {"period", "country", "gdp"}
    if not need <= set(rdr.fieldnames or ()):
        raise CliError("schema", f"gdp input needs columns {sorted(need)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("t", "node", "name", "value"))
    for rec in rdr:
        if rec["gdp"] != "":
            w.writerow((rec["period"], rec["country"], "gdp", repr(float(rec["gdp"]))))
    return {"nodal.csv": buf.getvalue()}


ADAPTERS: dict[str, Callable[[str], dict[str, str]]] = {
    "bis-lbs": _adapt_bis_lbs,
    "trade": _adapt_dyadic("trade"),
    "distance": _adapt_dyadic("distance"),
    "gdp": _adapt_nodal,
}


def bundled_sample(fmt: str = "bis-lbs") -> str:
    if fmt != "bis-lbs":
        raise CliError("usage", f"no bundled sample for format {fmt!r}")
    return resources.files("netrecon").joinpath("data/bis_lbs_sample.csv").read_text("utf-8")


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "netrecon")


def fetch_remote(url: str, fmt: str, dest, *, allow_network: bool = False,
                 cache: Path | None = None, opener: Callable | None = None) -> dict[str, Path]:
    """Download ``url`` (or reuse the cached copy) and convert it with the adapter for ``fmt``.

    The network is touched only with ``allow_network`` and no cached copy.
    """
    if fmt not in ADAPTERS:
        raise CliError("usage", f"unknown format {fmt!r}; choose from {sorted(ADAPTERS)}")
    cache = Path(cache) if cache is not None else cache_dir()
    key = hashlib.sha256(f"{fmt}\n{url}".encode()).hexdigest()[:32]
    raw = cache / f"{key}.raw"
    if raw.exists():
        log.info("cache hit for %s", url)
        text = raw.read_text("utf-8")
    else:
        if not allow_network:
            raise CliError("network", "network access not permitted; pass --allow-network")
        try:
            with (opener or urllib.request.urlopen)(url) as resp:
                text = resp.read().decode("utf-8")
        except OSError as exc:
            raise CliError("network", f"{url}: {exc}") from None
        cache.mkdir(parents=True, exist_ok=True)
        raw.write_text(text, "utf-8")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, body in ADAPTERS[fmt](text).items():
        (dest / name).write_text(body, "utf-8")
        out[name] = dest / name
    return out


# --------------------------------------------------------------------------
# report


def summary_table(metrics: Sequence[tuple]) -> str:
    """Fixed-width table of the overall, average and SE rows per method."""
    lines = [f"{'method':<14}{'row':<10}{'L1':>18}{'L2':>18}"]
    for m, t, a, b in metrics:
        if t in ("overall", "average", "se"):
            lines.append(f"{m:<14}{t:<10}{a:>18.6f}{b:>18.6f}")
    return "\n".join(lines) + "\n"


def series_rows(ds: Dataset) -> list[tuple]:
    """Tidy per-period series: volume, zero margins, observed density."""
    rows = []
    for t in ds.periods:
        ms = ds.margins[t]
        rows.append((t, "volume", float(ms.row_sums.sum())))
        rows.append((t, "zero_margins", int(np.sum(ms.y == 0))))
        if t in ds.truth:
            n = ds.nodes.n
            rows.append((t, "density", float(np.sum(ds.truth[t].values > 0)) / (n * (n - 1))))
    return rows


# --------------------------------------------------------------------------
# command line


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netrecon", description="Reconstruct flow matrices from margins.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def shared(sp, data=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir", required=True)
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--workers", type=int)
        if data:
            sp.add_argument("--margins")
            sp.add_argument("--edges")
            sp.add_argument("--nodal")
            sp.add_argument("--dyadic")
            sp.add_argument("--lag", help="name of a dyadic covariate holding lagged edges")
            sp.add_argument("--covariate", action="append", default=[], metavar="NAME:KIND[:TRANSFORM]")

    shared(sub.add_parser("reconstruct", help="fit one estimator per period"))
    b = sub.add_parser("bootstrap", help="fit with bootstrap intervals")
    shared(b)
    b.add_argument("--B", type=int, default=None)
    b.add_argument("--level", type=float, default=None)
    c = sub.add_parser("compare", help="fit several estimators and tabulate errors")
    shared(c)
    c.add_argument("--methods", nargs="+", choices=METHODS, required=True)
    s = sub.add_parser("simulate", help="simulation studies and synthetic data")
    shared(s, data=False)
    s.add_argument("--study", choices=("rss", "bias", "dataset"), required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--S", type=int, default=200)
    s.add_argument("--beta", type=float, nargs="+")
    s.add_argument("--periods", type=int, default=4)
    r = sub.add_parser("report", help="summarise an output directory")
    r.add_argument("--input-dir", required=True)
    r.add_argument("--output-dir")
    r.add_argument("--margins")
    r.add_argument("--edges")
    f = sub.add_parser("fetch", help="download public data and convert it")
    f.add_argument("--url")
    f.add_argument("--format", required=True)
    f.add_argument("--output-dir", required=True)
    f.add_argument("--allow-network", action="store_true")
    f.add_argument("--sample", action="store_true", help="convert the bundled offline sample")
    return p


def _covariate_arg(text: str) -> tuple[str, str, str]:
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise CliError("usage", f"covariate {text!r} must be NAME:KIND[:TRANSFORM]")
    return (parts[0], parts[1], parts[2] if len(parts) == 3 else "identity")


def _config(args) -> RunConfig:
    data = load_config(args.config) if getattr(args, "config", None) else {}
    for key, attr in (("seed", "seed"), ("method", "method"), ("workers", "workers"),
                      ("bootstrap_B", "B"), ("level", "level")):
        v = getattr(args, attr, None)
        if v is not None:
            data[key] = v
    if getattr(args, "covariate", None):
        data["covariates"] = [_covariate_arg(c) for c in args.covariate]
    if args.command == "compare":
        data.setdefault("method", args.methods[0])
    if args.command == "bootstrap" and not data.get("bootstrap_B"):
        data["bootstrap_B"] = 100
    return RunConfig.from_mapping(data)


def _cmd_data(args, config: RunConfig) -> dict[str, Path]:
    ds = load_dataset(args.margins, args.edges, args.nodal, args.dyadic, lag=args.lag)
    inputs = {k: getattr(args, k) for k in ("margins", "edges", "nodal", "dyadic")}
    methods = args.methods if args.command == "compare" else None
    return run_pipeline(ds, config, args.output_dir, methods=methods, command=args.command,
                        inputs=inputs)


def _cmd_simulate(args, config: RunConfig) -> dict[str, Path]:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    auglag = AugLagState(**config.auglag) if config.auglag else None
    extra: dict[str, Any] = {"study": args.study, "n": args.n, "S": args.S}
    if args.study == "rss":
        grid = args.beta or list(simlab.BETA_GRID)
        tab = simlab.rss_study(args.n, grid, args.S, config.seed, config=auglag,
                               workers=config.workers)
        written["rss.csv"] = write_csv(out / "rss.csv", ("beta", "s", "rss"), tab.rows)
        written["rss_summary.csv"] = write_csv(
            out / "rss_summary.csv", ("beta", "median", "mean", "failures"),
            [(b, med, mean, tab.failures[b]) for b, med, mean in tab.summaries()])
        extra.update(beta=grid, failures={repr(k): v for k, v in tab.failures.items()})
    elif args.study == "bias":
        beta = (args.beta or [-1.0])[0]
        tab = simlab.bias_study(args.n, beta, args.S, config.seed, config=auglag,
                                workers=config.workers)
        written["bias.csv"] = write_csv(out / "bias.csv", ("i", "j", "estimator", "s", "delta"),
                                        ((i, j, e, s, d) for (i, j), e, s, d in tab.rows()))
        summ = []
        for e in tab.delta:
            med = tab.median(e) if len(tab.delta[e]) else np.full(len(tab.cells), np.nan)
            summ += [(i, j, e, med[q], int(tab.degenerate[q])) for q, (i, j) in enumerate(tab.cells)]
        written["bias_summary.csv"] = write_csv(
            out / "bias_summary.csv", ("i", "j", "estimator", "median_delta", "degenerate"), summ)
        extra.update(beta=beta, failures=tab.failures,
                     biased_share={e: tab.biased_share(e) for e in tab.delta if len(tab.delta[e])})
    else:
        beta = (args.beta or [1.0])[0]
        ds = simulate_dataset(args.n, args.periods, beta, config.seed)
        written.update({f"{k}.csv": v for k, v in write_dataset(ds, out).items()})
        extra.update(beta=beta, periods=args.periods)
    written["manifest.json"] = write_manifest(out / "manifest.json", "simulate", config, {},
                                              list(written.values()), extra=extra)
    return written


def _cmd_report(args) -> dict[str, Path]:
    src = Path(args.input_dir)
    out = Path(args.output_dir) if args.output_dir else src
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    mpath = src / "metrics.csv"
    text = summary_table(read_metrics(mpath)) if mpath.exists() else "no metrics.csv\n"
    written["report.txt"] = out / "report.txt"
    written["report.txt"].write_text(text, "utf-8")
    sys.stdout.write(text)
    if args.margins or args.edges:
        ds = load_dataset(args.margins, args.edges)
        rows = series_rows(ds)
        man = src / "manifest.json"
        if man.exists():
            cov = json.loads(man.read_text("utf-8")).get("pi_coverage", {})
            rows += [(t, f"pi_coverage:{m}", v) for m, per in sorted(cov.items())
                     for t, v in per.items()]
        written["series.csv"] = write_csv(out / "series.csv", ("t", "metric", "value"), rows)
    return written


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            _cmd_report(args)
        elif args.command == "fetch":
            dest = Path(args.output_dir)
            if args.sample:
                dest.mkdir(parents=True, exist_ok=True)
                for name, body in ADAPTERS[args.format](bundled_sample(args.format)).items():
                    (dest / name).write_text(body, "utf-8")
            else:
                if not args.url:
                    raise CliError("usage", "fetch needs --url or --sample")
                fetch_remote(args.url, args.format, dest, allow_network=args.allow_network)
        else:
            config = _config(args)
            if args.command == "simulate":
                _cmd_simulate(args, config)
            else:
                _cmd_data(args, config)
    except CliError as exc:
        sys.stderr.write(json.dumps({"error": exc.category, "message": str(exc)}) + "\n")
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
