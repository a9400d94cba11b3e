"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, frk, indicators, ingest, mqsr, pipeline, sde, synth
from .config import ConfigError, RunConfig, dump, load
from .geom import CompositionError
from .mesh import MeshError, build_mesh

log = logging.getLogger("airdist")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
VALIDATION_ERRORS = (ConfigError, ingest.IngestError, CompositionError, MeshError, sde.SdeError,
                     indicators.UnsupportedMethodError, FileNotFoundError, KeyError, ValueError)
NUMERICAL_ERRORS = (np.linalg.LinAlgError, frk.FrkError, mqsr.MqsrError, FloatingPointError, ArithmeticError)


def exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, pipeline.StageError) else exc
    if isinstance(cause, NUMERICAL_ERRORS):
        return EXIT_NUMERICAL
    if isinstance(cause, VALIDATION_ERRORS):
        return EXIT_VALIDATION
    return EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

# flag name -> config key
FLAG_KEYS = {
    "measurements": "measurements_csv",
    "registry": "registry_csv",
    "boundary": "boundary_geojson",
    "municipalities": "municipalities_geojson",
    "altitude": "altitude_asc",
    "mesh": "mesh_stem",
    "out_dir": "output_dir",
    "grid_cell": "bau_cell_m",
    "alphas": "mqsr_alphas",
    "gamma": "mqsr_gamma",
    "eps": "mqsr_eps_ug_m3",
    "variance_target": "sde_variance_target",
    "threshold": "threshold_ug_m3",
    "day_limit": "day_limit_days",
    "seed": "seed",
    "threads": "threads",
    "edge_length": "mesh_edge_m",
}


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def make_config(args) -> RunConfig:
    cfg = load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items() if getattr(args, flag, None) is not None}
    if getattr(args, "basis", None) is not None:
        over["frk_basis_counts"] = _ints(args.basis)
    if getattr(args, "lambda_grid", None) is not None:
        over["mqsr_lambda_grid"] = _floats(args.lambda_grid)
    if getattr(args, "methods", None) is not None:
        over["methods"] = [m.strip().upper() for m in args.methods.split(",")]
    if getattr(args, "no_consensus", False):
        over["consensus"] = False
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            over[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            over[k.strip()] = v
    return cfg.with_overrides(**over).validate()


def _common(p, *flags):
    p.add_argument("--config", help="run configuration file (key = JSON value per line)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any configuration key")
    for f in flags:
        p.add_argument(f"--{f.replace('_', '-')}", dest=f, default=None,
                       type=float if f in ("grid_cell", "gamma", "eps", "variance_target", "threshold",
                                           "edge_length") else int if f in ("seed", "day_limit", "threads") else str)


def _covariates(args, ctx):
    path = args.covariates
    return pipeline.load_covariates(path, ctx) if path else None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    scen = synth.SyntheticScenario(
        n_stations=args.stations, n_samples=args.samples, seed=args.seed, side_m=args.side,
        a=args.a, b=args.b, lo=tuple(_floats(args.lo)), width=tuple(_floats(args.width)),
        n_municipalities=tuple(_ints(args.municipalities)),
    )
    paths = synth.write_scenario(scen, args.out, args.threshold)
    cfg = RunConfig(
        measurements_csv=paths["measurements"], registry_csv=paths["registry"],
        boundary_geojson=paths["boundary"], municipalities_geojson=paths["municipalities"],
        altitude_asc=paths["altitude"], output_dir=str(Path(args.out) / "run"), threshold_ug_m3=args.threshold,
    )
    dump(cfg, Path(args.out) / "run.cfg")
    print(json.dumps({**paths, "config": str(Path(args.out) / "run.cfg")}, indent=2))


def cmd_mesh_build(args):
    cfg = make_config(args)
    boundary = pipeline.read_boundary(cfg.boundary_geojson)
    mesh = build_mesh(boundary, cfg.mesh_edge_m)
    mesh.write(args.out)
    print(f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles -> {args.out}.node/.ele")


def cmd_ingest(args):
    cfg = make_config(args)
    ctx = pipeline.load_context(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.mesh_stem:
        ctx.mesh.write(out / "mesh")
    res = pipeline.ingest_stage(ctx)
    ingest.write_series_csv(out / "series.csv", res.series)
    res.report.write(out / "ingest_report.json")
    pipeline.save_covariates(res.covariates, out / "covariates.json")
    (out / "trim_fields.json").write_text(res.trim_fields.to_json())
    print(f"{len(res.series)} stations retained; outputs in {out}")


def cmd_frk_fit(args):
    cfg = make_config(args)
    series = ingest.read_series_csv(args.input)
    boundary = pipeline.read_boundary(cfg.boundary_geojson)
    grid = frk.BauGrid.from_polygon(boundary, cfg.bau_cell_m)
    basis = frk.make_basis(grid, tuple(cfg.frk_basis_counts), seed=cfg.seeds()["frk_basis"])
    model = pipeline.fit_cfrk(series, basis, cfg)
    Path(args.out).write_text(model.to_json())
    print(f"EM {'converged' if model.converged else 'stopped'} after {model.n_iter} iterations -> {args.out}")


def cmd_frk_predict(args):
    cfg = make_config(args)
    ctx = pipeline.load_context(cfg)
    model = frk.FrkModel.from_json(Path(args.model).read_text())
    cov = _covariates(args, ctx)
    grid = frk.BauGrid.from_polygon(ctx.boundary, cfg.bau_cell_m, covariate_fn=cov)
    sp_ = pipeline.Spatial(grid, model.basis, frk.polygon_weights(grid, ctx.muni_polys))
    z, p = pipeline.predict_cfrk(model, sp_, ctx.muni_polys, cfg.cfrk_mode)
    pipeline.write_cfrk_csv(args.out, ctx.muni_ids, z, p)
    print(f"{len(z)} municipalities -> {args.out}")


def cmd_mqsr_fit(args):
    cfg = make_config(args)
    ctx = pipeline.load_context(cfg)
    series = ingest.read_series_csv(args.input)
    fields = pipeline.fit_quantiles(series, ctx)
    Path(args.out).write_text(fields.to_json())
    print(f"{fields.r} levels, {fields.n_iter} MM iterations -> {args.out}")


def cmd_mqsr_evaluate(args):
    cfg = make_config(args)
    ctx = pipeline.load_context(cfg)
    fields = mqsr.QuantileFieldSet.from_json(Path(args.fields).read_text(), ctx.mesh)
    cov = _covariates(args, ctx)
    if args.points:
        with open(args.points, newline="") as fh:
            pts = np.array([[float(r["x"]), float(r["y"])] for r in csv.DictReader(fh)])
        q = fields.evaluate(pts, cov(pts) if fields.betas.shape[1] else None)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", *(f"q{a:g}" for a in fields.alphas)])
            for i, (x, y) in enumerate(pts):
                w.writerow([repr(float(x)), repr(float(y)), *(repr(float(v)) for v in q[:, i])])
    else:
        if not args.trim_fields:
            raise ConfigError("municipal evaluation needs --trim-fields for the support")
        trim = mqsr.QuantileFieldSet.from_json(Path(args.trim_fields).read_text(), ctx.mesh)
        support = pipeline.support_field(trim, ctx.muni_polys, cov, cfg.support_spacing_m)
        q = pipeline.municipal_quantiles(fields, ctx.muni_polys, cov, cfg.support_spacing_m)
        pipeline.write_quantile_csv(args.out, ctx.muni_ids, fields.alphas, q, support)
    print(f"quantiles -> {args.out}")


def cmd_sde_fit(args):
    cfg = make_config(args)
    series = ingest.read_series_csv(args.input)
    fit = pipeline.fit_densities(series, cfg)
    Path(args.out).write_text(fit.to_json())
    print(f"{fit.fpca.k} components explain {fit.fpca.explained[:fit.fpca.k].sum():.3f} -> {args.out}")


def cmd_sde_predict(args):
    cfg = make_config(args)
    ctx = pipeline.load_context(cfg)
    fit = pipeline.SdeFit.from_json(Path(args.model).read_text())
    cov = _covariates(args, ctx)
    trim = mqsr.QuantileFieldSet.from_json(Path(args.trim_fields).read_text(), ctx.mesh)
    support = pipeline.support_field(trim, ctx.muni_polys, cov, cfg.support_spacing_m)
    sp_ = pipeline.spatial_support(ctx, cov)
    dens = pipeline.predict_densities(fit, sp_, ctx.muni_polys, support, cfg)
    pipeline.write_density_csv(args.out, ctx.muni_ids, dens)
    print(f"{len(dens)} municipal densities -> {args.out}")


def cmd_indicators(args):
    cfg = make_config(args)
    t = cfg.threshold_ug_m3
    method = args.method.upper()
    if method == "CFRK":
        ids, _, p = pipeline.read_cfrk_csv(args.input)
        rows = pipeline.cfrk_indicators(ids, p)
    elif method == "MQSR":
        ids, alphas, q, support = pipeline.read_quantile_csv(args.input)
        rows = pipeline.mqsr_indicators(ids, pipeline.quantile_cdfs(alphas, q, support), t)
    elif method == "SDE":
        ids, dens = pipeline.read_density_csv(args.input)
        rows = pipeline.sde_indicators(ids, dens, t)
    else:
        raise ConfigError(f"unknown method {args.method!r}")
    indicators.write_indicator_csv(args.out, rows)
    print(f"{len(rows)} rows -> {args.out}")


def cmd_consensus(args):
    cfg = make_config(args)
    rows = {}
    for path in args.indicators:
        for r in indicators.read_indicator_csv(path):
            rows.setdefault(r.method, []).append(r)
    classes = pipeline.consensus_classes(rows, cfg.day_limit_days)
    if not cfg.municipalities_geojson:
        raise ConfigError("consensus needs --municipalities")
    _, _, _, feats = ingest.read_geojson_polygons(cfg.municipalities_geojson)
    indicators.write_consensus_geojson(args.out, feats, classes)
    counts = {c: sum(v.label == c for v in classes.values()) for c in indicators.CLASSES}
    print(json.dumps(counts))


def cmd_run(args):
    cfg = pipeline.config_from_manifest(args.manifest) if args.manifest else None
    if cfg is not None:
        args.config = None
        cfg = cfg.with_overrides(output_dir=args.out_dir) if args.out_dir else cfg
    else:
        cfg = make_config(args)
    res = pipeline.run(cfg)
    print(f"outputs in {res.out_dir}; config sha256 {res.manifest['config_sha256'][:12]}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="airdist", description="Spatial PM10 distribution estimation and indicators")
    ap.add_argument("--version", action="version", version=f"airdist {__version__}")
    ap.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scenario and its truth table")
    p.add_argument("--out", required=True)
    p.add_argument("--stations", type=int, default=100)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=float, default=100_000.0, help="square domain side in meters")
    p.add_argument("--a", type=float, default=2.0)
    p.add_argument("--b", type=float, default=5.0)
    p.add_argument("--lo", default="5,10,0", help="lower-bound field: intercept,x slope,y slope")
    p.add_argument("--width", default="80,0,40", help="width field: intercept,x slope,y slope")
    p.add_argument("--municipalities", default="6,6", help="municipality grid columns,rows")
    p.add_argument("--threshold", type=float, default=indicators.THRESHOLD)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mesh", help="mesh operations")
    msub = p.add_subparsers(dest="mesh_command", required=True)
    q = msub.add_parser("build", help="triangulate a boundary polygon")
    _common(q, "boundary", "edge_length")
    q.add_argument("--out", required=True, help="output stem for .node/.ele files")
    q.set_defaults(func=cmd_mesh_build)

    p = sub.add_parser("ingest", help="daily means, deduplication, covariates, trimming")
    _common(p, "measurements", "registry", "boundary", "municipalities", "altitude", "mesh", "out_dir")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("frk", help="compositional fixed rank kriging")
    fsub = p.add_subparsers(dest="frk_command", required=True)
    q = fsub.add_parser("fit")
    _common(q, "boundary", "grid_cell", "seed", "threshold")
    q.add_argument("--input", required=True, help="trimmed series CSV")
    q.add_argument("--basis", help="basis centres per level, e.g. 334,134,34")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_frk_fit)
    q = fsub.add_parser("predict")
    _common(q, "boundary", "municipalities", "altitude", "mesh", "grid_cell")
    q.add_argument("--model", required=True)
    q.add_argument("--covariates", help="covariate model JSON written by ingest")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_frk_predict)

    p = sub.add_parser("mqsr", help="non-crossing quantile fields")
    qsub = p.add_subparsers(dest="mqsr_command", required=True)
    q = qsub.add_parser("fit")
    _common(q, "boundary", "mesh", "alphas", "gamma", "eps", "seed")
    q.add_argument("--input", required=True)
    q.add_argument("--lambda-grid", dest="lambda_grid", help="comma-separated smoothing weights")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_mqsr_fit)
    q = qsub.add_parser("evaluate")
    _common(q, "boundary", "mesh", "municipalities", "altitude")
    q.add_argument("--fields", required=True)
    q.add_argument("--points", help="CSV with x,y columns; default evaluates municipal averages")
    q.add_argument("--trim-fields", dest="trim_fields")
    q.add_argument("--covariates")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_mqsr_evaluate)

    p = sub.add_parser("sde", help="Bayes-space density estimation")
    ssub = p.add_subparsers(dest="sde_command", required=True)
    q = ssub.add_parser("fit")
    _common(q, "variance_target")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_sde_fit)
    q = ssub.add_parser("predict")
    _common(q, "boundary", "municipalities", "altitude", "mesh", "grid_cell", "seed")
    q.add_argument("--model", required=True)
    q.add_argument("--trim-fields", dest="trim_fields", required=True)
    q.add_argument("--covariates")
    q.add_argument("--basis")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_sde_predict)

    p = sub.add_parser("indicators", help="per-method municipal indicators")
    _common(p, "threshold")
    p.add_argument("--method", required=True, choices=["CFRK", "MQSR", "SDE", "cfrk", "mqsr", "sde"])
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_indicators)

    p = sub.add_parser("consensus", help="consensus classes from three indicator files")
    _common(p, "municipalities", "day_limit")
    p.add_argument("--indicators", nargs=3, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("run", help="full pipeline from a configuration")
    _common(p, "measurements", "registry", "boundary", "municipalities", "altitude", "mesh", "out_dir",
            "grid_cell", "alphas", "variance_target", "threshold", "day_limit", "seed", "edge_length")
    p.add_argument("--basis")
    p.add_argument("--lambda-grid", dest="lambda_grid")
    p.add_argument("--methods", help="comma-separated subset of CFRK,MQSR,SDE")
    p.add_argument("--no-consensus", action="store_true")
    p.add_argument("--manifest", help="re-run exactly from a manifest.json")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            with threadpool_limits(limits=args.threads):
                args.func(args)
        else:
            args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = exit_code(exc)
        print(f"airdist {args.command}: {'numerical failure' if code == EXIT_NUMERICAL else 'error'}: {exc}",
              file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
