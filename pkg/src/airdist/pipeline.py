"""End-to-end runs: ingest, the three model fits, indicators and consensus.

Each stage is a plain function so the CLI subcommands and :func:`run` share
the same code.  Smoothing weights in the configuration are given for a domain
rescaled to unit area; they are multiplied by the mesh area here, which keeps
their meaning independent of the coordinate units.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy
import shapely
from shapely.ops import unary_union
from threadpoolctl import threadpool_limits

from . import __version__, frk, ingest, indicators, mqsr, sde
from .config import ConfigError, RunConfig
from .geom import ilr, ilr_inverse_above, unit_grid, zero_replace
from .mesh import FemOperators, TriangularMesh, assemble, build_mesh

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """An error raised inside a pipeline stage, tagged with the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, tp, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


# ---------------------------------------------------------------------------
# shared inputs
# ---------------------------------------------------------------------------

@dataclass
class Context:
    cfg: RunConfig
    boundary: shapely.Geometry
    mesh: TriangularMesh
    ops: FemOperators
    altitude: ingest.AsciiGrid | None = None
    muni_ids: list = field(default_factory=list)
    muni_polys: list = field(default_factory=list)
    muni_features: list = field(default_factory=list)
    muni_popdensity: np.ndarray | None = None

    @property
    def area(self) -> float:
        return self.mesh.area


def read_boundary(path) -> shapely.Geometry:
    _, geoms, _, _ = ingest.read_geojson_polygons(path, id_key="name")
    return unary_union(geoms) if len(geoms) > 1 else geoms[0]


def load_mesh(cfg: RunConfig, boundary) -> TriangularMesh:
    if cfg.mesh_stem and Path(cfg.mesh_stem + ".node").exists():
        return TriangularMesh.read(cfg.mesh_stem)
    return build_mesh(boundary, cfg.mesh_edge_m)


def load_context(cfg: RunConfig) -> Context:
    with _stage("inputs"):
        if not cfg.boundary_geojson:
            raise ConfigError("boundary_geojson is required")
        boundary = read_boundary(cfg.boundary_geojson)
        mesh = load_mesh(cfg, boundary)
        ctx = Context(cfg, boundary, mesh, assemble(mesh))
        if cfg.altitude_asc:
            ctx.altitude = ingest.AsciiGrid.read(cfg.altitude_asc)
        if cfg.municipalities_geojson:
            ids, polys, _, feats = ingest.read_geojson_polygons(cfg.municipalities_geojson)
            ctx.muni_ids, ctx.muni_polys, ctx.muni_features = ids, polys, feats
            if all("popdensity" in f["properties"] for f in feats):
                ctx.muni_popdensity = np.array([float(f["properties"]["popdensity"]) for f in feats])
    return ctx


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

@dataclass
class IngestResult:
    series: list
    report: ingest.IngestReport
    covariates: ingest.CovariateModel
    trim_fields: mqsr.QuantileFieldSet


def stack_fields(parts) -> mqsr.QuantileFieldSet:
    """Single-level field sets combined into one (no crossing penalty between them)."""
    p0 = parts[0]
    return mqsr.QuantileFieldSet(
        np.concatenate([p.alphas for p in parts]),
        np.vstack([p.betas for p in parts]),
        np.vstack([p.coefs for p in parts]),
        np.concatenate([p.lambdas for p in parts]),
        p0.gamma, p0.eps, p0.mesh,
        n_iter=max(p.n_iter for p in parts),
        converged=all(p.converged for p in parts),
    )


def fit_trim_fields(series, ctx: Context, lam: float | None = None, **kw) -> mqsr.QuantileFieldSet:
    """Q1 and Q99 fields, each an independent single-level quantile fit."""
    lam = (ctx.cfg.trim_lambda if lam is None else lam) * ctx.area
    data = mqsr.StationData.from_series(series)
    parts = [mqsr.fit(data, [a], ctx.ops, lam, eps=ctx.cfg.mqsr_eps_ug_m3, tol=ctx.cfg.mqsr_tol,
                      max_iter=ctx.cfg.mqsr_max_iter, **kw) for a in (0.01, 0.99)]
    return stack_fields(parts)


def ingest_stage(ctx: Context) -> IngestResult:
    cfg = ctx.cfg
    with _stage("ingest"):
        if ctx.altitude is None or ctx.muni_popdensity is None:
            raise ConfigError("ingest needs an altitude grid and municipalities with a popdensity property")
        report = ingest.IngestReport()
        raw = ingest.read_measurements(cfg.measurements_csv, report)
        rows = ingest.daily_average(raw, cfg.min_hourly_readings, report=report)
        daily = ingest.deduplicate_sensors(rows, report)
        registry = ingest.read_registry(cfg.registry_csv)
        series = ingest.build_series(daily, registry, 0, report)
        loc = np.array([s.location for s in series])
        inside = shapely.contains_xy(ctx.boundary.buffer(1e-6), loc[:, 0], loc[:, 1])
        if not inside.all():
            raise ingest.IngestError(f"station {series[int(np.argmin(inside))].station_id} lies outside the domain")
        series, covmodel = ingest.attach_covariates(
            series, ctx.altitude, ctx.muni_polys, ctx.muni_popdensity, ctx.mesh,
            lam=cfg.popdensity_lambda * ctx.area, ops=ctx.ops)
        trim = fit_trim_fields(series, ctx)
        out = []
        for s in series:
            bounds = trim.evaluate(s.location[None], s.covariates[None], check=False)[:, 0]
            t = ingest.trim_series(s, bounds[0], bounds[1], report, ingest.record_weights(daily, s))
            w = ingest.record_weights(daily, t)
            if t.n < cfg.min_series_length:
                report.remove("short_series", s.station_id, int(w.sum()))
                continue
            report.n_retained += int(w.sum())
            out.append(t)
        if not out:
            raise ingest.IngestError("no station series survives ingestion")
        if not report.balanced:
            raise ingest.IngestError("ingestion report does not conserve the record count")
    return IngestResult(out, report, covmodel, trim)


def save_covariates(model: ingest.CovariateModel, path):
    Path(path).write_text(json.dumps({
        **model.standardization(),
        "pop_coefficients": model.pop_coefficients.tolist(),
        "mesh_checksum": model.mesh.checksum(),
    }))


def load_covariates(path, ctx: Context) -> ingest.CovariateModel:
    d = json.loads(Path(path).read_text())
    if d["mesh_checksum"] != ctx.mesh.checksum():
        raise ConfigError("covariate model was built on a different mesh")
    if ctx.altitude is None:
        raise ConfigError("altitude grid required to evaluate covariates")
    return ingest.CovariateModel(ctx.altitude, ctx.mesh, np.asarray(d["pop_coefficients"]),
                                 np.asarray(d["mean"]), np.asarray(d["std"]), tuple(d["names"]))


# ---------------------------------------------------------------------------
# model stages
# ---------------------------------------------------------------------------

def station_arrays(series):
    loc = np.array([s.location for s in series])
    cov = None if series[0].covariates is None else np.array([s.covariates for s in series])
    return loc, cov


def compositions(series, threshold: float) -> np.ndarray:
    """ilr of the zero-replaced (below, above) threshold counts per station."""
    above = np.array([int(np.sum(s.values > threshold)) for s in series])
    below = np.array([s.n for s in series]) - above
    return np.array([ilr(zero_replace(int(b), int(a))) for b, a in zip(below, above)])


@dataclass
class Spatial:
    grid: frk.BauGrid
    basis: frk.BasisSet
    weights: tuple


def spatial_support(ctx: Context, covmodel) -> Spatial:
    cfg = ctx.cfg
    grid = frk.BauGrid.from_polygon(ctx.boundary, cfg.bau_cell_m, covariate_fn=covmodel)
    basis = frk.make_basis(grid, tuple(cfg.frk_basis_counts), seed=cfg.seeds()["frk_basis"])
    return Spatial(grid, basis, frk.polygon_weights(grid, ctx.muni_polys))


def fit_cfrk(series, basis: frk.BasisSet, cfg: RunConfig) -> frk.FrkModel:
    loc, cov = station_arrays(series)
    z = compositions(series, cfg.threshold_ug_m3)
    return frk.fit_em(loc, cov, z, basis, tol=cfg.frk_tol, max_iter=cfg.frk_max_iter)


_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(40)
_GH_W = _GH_W / _GH_W.sum()


def predict_cfrk(model: frk.FrkModel, sp_: Spatial, polygons, mode: str = "plugin"):
    """Per-polygon aggregated ilr and exceedance probability.

    ``plugin`` inverts the area-averaged ilr prediction.  ``predictive``
    averages the exceedance part over the Gaussian predictive law of each BAU
    before aggregating probabilities.
    """
    mean, var = frk.predict(model, sp_.grid)
    z, empty = frk.aggregate_to_polygons(mean, sp_.grid, polygons, sp_.weights)
    if mode == "plugin":
        p = ilr_inverse_above(z)
    else:
        zz = mean[:, None] + np.sqrt(var)[:, None] * _GH_X[None, :]
        p_bau = ilr_inverse_above(zz) @ _GH_W
        p, _ = frk.aggregate_to_polygons(p_bau, sp_.grid, polygons, sp_.weights)
    p = np.where(empty, np.nan, p)
    return z, p


def support_field(trim: mqsr.QuantileFieldSet, polygons, covmodel, spacing) -> sde.SupportField:
    return sde.predict_support(trim, polygons, covmodel, spacing)


def fit_quantiles(series, ctx: Context) -> mqsr.QuantileFieldSet:
    cfg = ctx.cfg
    data = mqsr.StationData.from_series(series)
    alphas = cfg.levels()
    grid = np.asarray(cfg.mqsr_lambda_grid, float) * ctx.area
    kw = dict(gamma=cfg.mqsr_gamma, eps=cfg.mqsr_eps_ug_m3, tol=cfg.mqsr_tol, max_iter=cfg.mqsr_max_iter)
    lambdas = mqsr.select_lambda(data, alphas, ctx.ops, grid, folds=cfg.cv_folds,
                                 seed=cfg.seeds()["mqsr_cv"], **kw)
    return mqsr.fit(data, alphas, ctx.ops, lambdas, **kw)


def municipal_quantiles(fields: mqsr.QuantileFieldSet, polygons, covmodel, spacing) -> np.ndarray:
    """(n_polygons, r) area-averaged quantile fields."""
    def ev(pts):
        return fields.evaluate(pts, covmodel(pts) if fields.betas.shape[1] else None, check=False)

    q, _ = sde.polygon_average(ev, polygons, spacing)
    return q


def quantile_cdfs(alphas, q, support: sde.SupportField) -> list:
    out = []
    for i in range(len(q)):
        qi = np.asarray(q[i], float)
        if np.any(np.diff(qi) < 0):
            log.info("rearranging crossed municipal quantiles in row %d", i)
            qi = np.sort(qi)
        out.append(indicators.cdf_from_quantiles(alphas, qi, (support.q1[i], support.q99[i])))
    return out


@dataclass
class SdeFit:
    fpca: sde.FpcaBasis
    scores: np.ndarray
    locations: np.ndarray
    covariates: np.ndarray | None
    station_ids: list

    def to_json(self) -> str:
        return json.dumps({
            "mean": self.fpca.mean.tolist(), "components": self.fpca.components.tolist(),
            "eigenvalues": self.fpca.eigenvalues.tolist(), "weights": self.fpca.weights.tolist(),
            "scores": self.scores.tolist(), "locations": self.locations.tolist(),
            "covariates": None if self.covariates is None else self.covariates.tolist(),
            "station_ids": self.station_ids,
        })

    @classmethod
    def from_json(cls, text: str) -> "SdeFit":
        d = json.loads(text)
        k = len(d["components"])
        mean = np.asarray(d["mean"], float)
        basis = sde.FpcaBasis(mean, np.asarray(d["components"], float).reshape(k, len(mean)),
                              np.asarray(d["eigenvalues"]), np.asarray(d["weights"]))
        cov = None if d["covariates"] is None else np.asarray(d["covariates"])
        return cls(basis, np.asarray(d["scores"], float).reshape(len(d["station_ids"]), k), np.asarray(d["locations"]), cov,
                   d["station_ids"])


def fit_densities(series, cfg: RunConfig) -> SdeFit:
    dens = []
    for s in series:
        if s.trim_bounds is None:
            raise sde.SdeError(f"station {s.station_id} has no trim bounds")
        x = sde.align(s.values, *s.trim_bounds)
        dens.append(sde.estimate_density(x, s.station_id, cfg.sde_bins, cfg.sde_knots, cfg.sde_smoothing))
    basis, scores = sde.fpca(dens, variance_target=cfg.sde_variance_target)
    loc, cov = station_arrays(series)
    return SdeFit(basis, scores, loc, cov, [s.station_id for s in series])


def predict_densities(fit: SdeFit, sp_: Spatial, polygons, support: sde.SupportField, cfg: RunConfig):
    scores = sde.krige_scores(fit.scores, fit.locations, fit.covariates, sp_.grid, polygons, sp_.basis,
                              sp_.weights, tol=cfg.frk_tol, max_iter=cfg.frk_max_iter)
    return sde.reconstruct_all(scores, fit.fpca, support)


# ---------------------------------------------------------------------------
# file formats for municipal representations
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def write_cfrk_csv(path, ids, z, p):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["municipality_id", "ilr", "p"])
        for row in zip(ids, z, p):
            w.writerow([row[0], _fmt(row[1]), _fmt(row[2])])


def read_cfrk_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["municipality_id"] for r in rows]
    return ids, np.array([float(r["ilr"]) for r in rows]), np.array([float(r["p"]) for r in rows])


def write_quantile_csv(path, ids, alphas, q, support: sde.SupportField):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["municipality_id", "Q1", "Q99", *(f"q{a:g}" for a in alphas)])
        for i, mid in enumerate(ids):
            w.writerow([mid, _fmt(support.q1[i]), _fmt(support.q99[i]), *(_fmt(v) for v in q[i])])


def read_quantile_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    alphas = np.array([float(h[1:]) for h in header[3:]])
    ids = [r[0] for r in rows]
    vals = np.array([[float(v) for v in r[1:]] for r in rows])
    support = sde.SupportField(vals[:, 0], vals[:, 1], np.zeros(len(rows), bool))
    return ids, alphas, vals[:, 2:], support


def write_density_csv(path, ids, densities):
    """One row per municipality: id, Q1, Q99, then density values on the common grid."""
    m = len(unit_grid())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["municipality_id", "Q1", "Q99", *(f"f{k}" for k in range(m))])
        for mid, d in zip(ids, densities):
            w.writerow([mid, _fmt(d.q1), _fmt(d.q99), *(_fmt(v) for v in d.values)])


def read_density_csv(path):
    from .geom import clr
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    ids, out = [], []
    for r in rows:
        q1, q99 = float(r[1]), float(r[2])
        f = np.array([float(v) for v in r[3:]]) * (q99 - q1)  # back to the unit interval
        ids.append(r[0])
        out.append(sde.UnscaledDensity(clr(f), q1, q99))
    return ids, out


# ---------------------------------------------------------------------------
# indicators
# ---------------------------------------------------------------------------

def cfrk_indicators(ids, p):
    return [indicators.MunicipalIndicator.build(m, "CFRK", v) for m, v in zip(ids, p)]


def mqsr_indicators(ids, cdfs, threshold):
    return [indicators.MunicipalIndicator.build(m, "MQSR", c.exceedance(threshold), c.quantile(0.95))
            for m, c in zip(ids, cdfs)]


def sde_indicators(ids, densities, threshold):
    return [indicators.MunicipalIndicator.build(m, "SDE", indicators.exceedance_from_density(d, threshold),
                                                indicators.quantile_lookup(d, 0.95))
            for m, d in zip(ids, densities)]


def consensus_classes(rows_by_method: dict, day_limit) -> dict:
    by_id = {}
    for method in indicators.METHODS:
        if method not in rows_by_method:
            raise ValueError(f"consensus needs indicators from {method}")
        for r in rows_by_method[method]:
            by_id.setdefault(r.municipality_id, {})[method] = indicators.flag_35(r.p, day_limit)
    return {mid: indicators.consensus([f.get(m) for m in indicators.METHODS], mid) for mid, f in by_id.items()}


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    return {"airdist": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "shapely": shapely.__version__}


@dataclass
class RunResult:
    out_dir: Path
    indicators: dict
    classes: dict | None
    manifest: dict


def run(cfg: RunConfig) -> RunResult:
    """Execute the configured pipeline and write every artifact to ``cfg.output_dir``."""
    with threadpool_limits(limits=cfg.threads or None):
        return _run(cfg)


def _run(cfg: RunConfig) -> RunResult:
    cfg.validate()
    cfg.require_inputs()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = load_context(cfg)
    if not ctx.muni_ids:
        raise StageError("inputs", ConfigError("no municipalities found"))
    ctx.mesh.write(out / "mesh")
    ing = ingest_stage(ctx)
    ing.report.write(out / "ingest_report.json")
    ingest.write_series_csv(out / "series.csv", ing.series)
    save_covariates(ing.covariates, out / "covariates.json")
    (out / "trim_fields.json").write_text(ing.trim_fields.to_json())

    t = cfg.threshold_ug_m3
    rows = {}
    need_spatial = {"CFRK", "SDE"} & set(cfg.methods)
    with _stage("bau"):
        sp_ = spatial_support(ctx, ing.covariates) if need_spatial else None
    if {"MQSR", "SDE"} & set(cfg.methods):
        with _stage("support"):
            support = support_field(ing.trim_fields, ctx.muni_polys, ing.covariates, cfg.support_spacing_m)
    if "CFRK" in cfg.methods:
        with _stage("cfrk"):
            model = fit_cfrk(ing.series, sp_.basis, cfg)
            (out / "cfrk_model.json").write_text(model.to_json())
            z, p = predict_cfrk(model, sp_, ctx.muni_polys, cfg.cfrk_mode)
            write_cfrk_csv(out / "cfrk_municipal.csv", ctx.muni_ids, z, p)
            rows["CFRK"] = cfrk_indicators(ctx.muni_ids, p)
    if "MQSR" in cfg.methods:
        with _stage("mqsr"):
            fields_ = fit_quantiles(ing.series, ctx)
            (out / "mqsr_fields.json").write_text(fields_.to_json())
            q = municipal_quantiles(fields_, ctx.muni_polys, ing.covariates, cfg.support_spacing_m)
            write_quantile_csv(out / "mqsr_municipal.csv", ctx.muni_ids, fields_.alphas, q, support)
            rows["MQSR"] = mqsr_indicators(ctx.muni_ids, quantile_cdfs(fields_.alphas, q, support), t)
    if "SDE" in cfg.methods:
        with _stage("sde"):
            fit = fit_densities(ing.series, cfg)
            (out / "sde_model.json").write_text(fit.to_json())
            dens = predict_densities(fit, sp_, ctx.muni_polys, support, cfg)
            write_density_csv(out / "sde_densities.csv", ctx.muni_ids, dens)
            rows["SDE"] = sde_indicators(ctx.muni_ids, dens, t)
    with _stage("indicators"):
        for method, r in rows.items():
            indicators.write_indicator_csv(out / f"indicators_{method}.csv", r)
    classes = None
    if cfg.consensus:
        with _stage("consensus"):
            classes = consensus_classes(rows, cfg.day_limit_days)
            indicators.write_consensus_geojson(out / "consensus.geojson", ctx.muni_features, classes)

    outputs = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config": asdict(cfg),
        "config_sha256": cfg.digest(),
        "seeds": {"root": cfg.seed, **cfg.seeds()},
        "versions": versions(),
        "inputs": {k: _sha256(getattr(cfg, k)) for k in
                   ("measurements_csv", "registry_csv", "boundary_geojson", "municipalities_geojson", "altitude_asc")},
        "outputs": {name: _sha256(out / name) for name in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return RunResult(out, rows, classes, manifest)


def config_from_manifest(path) -> RunConfig:
    from .config import from_dict
    return from_dict(json.loads(Path(path).read_text())["config"])
