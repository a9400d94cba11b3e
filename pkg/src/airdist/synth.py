"""Synthetic scenarios with a known, spatially varying concentration law.

At location ``s`` daily values are ``lo(s) + width(s) * B`` with
``B ~ Beta(a, b)``, where ``lo`` and ``width`` are affine in the normalised
coordinates.  Everything the pipeline reads is written to disk: a boundary,
a municipality grid with population densities, an altitude raster, a station
registry and a measurement CSV, together with a truth table per municipality.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import shapely
from scipy import stats
from shapely.geometry import Polygon, box, mapping

from .ingest import AsciiGrid, RawMeasurement, write_measurements
from .sde import polygon_points


@dataclass(frozen=True)
class SyntheticScenario:
    n_stations: int = 100
    n_samples: int = 2000
    seed: int = 0
    side_m: float = 100_000.0
    a: float = 2.0
    b: float = 5.0
    lo: tuple = (5.0, 10.0, 0.0)  # intercept, x slope, y slope (over the unit square)
    width: tuple = (80.0, 0.0, 40.0)
    n_municipalities: tuple = (6, 6)
    start: str = "2018-01-01"

    def __post_init__(self):
        if self.n_stations < 1:
            raise ValueError("a scenario needs at least one station")
        if self.n_samples < 1:
            raise ValueError("a scenario needs at least one sample per station")
        if self.a <= 0 or self.b <= 0:
            raise ValueError("Beta shape parameters must be positive")

    @property
    def domain(self) -> Polygon:
        return box(0.0, 0.0, self.side_m, self.side_m)

    def _affine(self, coef, points):
        p = np.atleast_2d(np.asarray(points, float)) / self.side_m
        return coef[0] + coef[1] * p[:, 0] + coef[2] * p[:, 1]

    def lower(self, points) -> np.ndarray:
        return self._affine(self.lo, points)

    def span(self, points) -> np.ndarray:
        w = self._affine(self.width, points)
        if np.any(w <= 0):
            raise ValueError("width field must stay positive on the domain")
        return w

    def exceedance(self, points, threshold: float) -> np.ndarray:
        z = (threshold - self.lower(points)) / self.span(points)
        return stats.beta.sf(z, self.a, self.b)

    def quantile(self, points, alpha: float) -> np.ndarray:
        return self.lower(points) + self.span(points) * stats.beta.ppf(alpha, self.a, self.b)

    def sample(self, points, n: int, rng) -> np.ndarray:
        lo, w = self.lower(points), self.span(points)
        return lo[:, None] + w[:, None] * rng.beta(self.a, self.b, size=(len(lo), n))

    def station_locations(self, rng) -> np.ndarray:
        poly = self.domain
        minx, miny, maxx, maxy = poly.bounds
        out = np.zeros((0, 2))
        while len(out) < self.n_stations:
            p = rng.uniform([minx, miny], [maxx, maxy], size=(2 * self.n_stations, 2))
            p = p[shapely.contains_xy(poly, p[:, 0], p[:, 1])]
            out = np.vstack([out, p])
        return out[: self.n_stations]

    def municipalities(self) -> list[tuple[str, Polygon]]:
        nx, ny = self.n_municipalities
        dx, dy = self.side_m / nx, self.side_m / ny
        out = []
        for j in range(ny):
            for i in range(nx):
                out.append((f"M{j * nx + i:03d}", box(i * dx, j * dy, (i + 1) * dx, (j + 1) * dy)))
        return out


def altitude_field(points, side_m: float) -> np.ndarray:
    p = np.atleast_2d(points) / side_m
    return 100.0 + 900.0 * p[:, 1] ** 2 + 150.0 * np.sin(3.0 * p[:, 0])


def popdensity(municipality_index: int, rng) -> float:
    return float(np.round(rng.lognormal(np.log(250.0), 0.6), 3))


def truth_table(scenario: SyntheticScenario, threshold: float = 50.0, levels=(0.95,), spacing: float | None = None):
    """Area-averaged true exceedance probability and quantiles per municipality."""
    spacing = spacing or scenario.side_m / 200
    rows = []
    for mid, poly in scenario.municipalities():
        pts = polygon_points(poly, spacing)
        row = {"municipality_id": mid, "p": float(scenario.exceedance(pts, threshold).mean())}
        for a in levels:
            row[f"q{round(100 * a)}"] = float(scenario.quantile(pts, a).mean())
        rows.append(row)
    return rows


def write_scenario(scenario: SyntheticScenario, out_dir, threshold: float = 50.0) -> dict:
    """Write every input file of the pipeline plus the truth table; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(scenario.seed)
    loc = scenario.station_locations(rng)
    values = scenario.sample(loc, scenario.n_samples, rng)
    ids = [f"S{i:04d}" for i in range(scenario.n_stations)]
    day0 = date.fromisoformat(scenario.start)
    days = [(day0 + timedelta(days=k)).isoformat() for k in range(scenario.n_samples)]

    paths = {k: out / v for k, v in {
        "measurements": "measurements.csv", "registry": "stations.csv", "boundary": "boundary.geojson",
        "municipalities": "municipalities.geojson", "altitude": "altitude.asc", "truth": "truth.csv",
        "scenario": "scenario.json",
    }.items()}

    rows = (RawMeasurement(sid, f"{sid}-1", "beta-radiation", d, v)
            for sid, vals in zip(ids, values) for d, v in zip(days, vals))
    write_measurements(paths["measurements"], rows)
    with open(paths["registry"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "x", "y"])
        for sid, (x, y) in zip(ids, loc):
            w.writerow([sid, repr(float(x)), repr(float(y))])

    boundary = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "geometry": mapping(scenario.domain), "properties": {"name": "domain"}}]}
    paths["boundary"].write_text(json.dumps(boundary))
    feats = [{"type": "Feature", "geometry": mapping(poly),
              "properties": {"municipality_id": mid, "popdensity": popdensity(k, rng)}}
             for k, (mid, poly) in enumerate(scenario.municipalities())]
    paths["municipalities"].write_text(json.dumps({"type": "FeatureCollection", "features": feats}))

    n_cells = 100
    cs = scenario.side_m / n_cells
    cx = (np.arange(n_cells) + 0.5) * cs
    X, Y = np.meshgrid(cx, cx[::-1])
    alt = altitude_field(np.column_stack([X.ravel(), Y.ravel()]), scenario.side_m).reshape(n_cells, n_cells)
    AsciiGrid(0.0, 0.0, cs, np.round(alt, 3)).write(paths["altitude"])

    table = truth_table(scenario, threshold)
    with open(paths["truth"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    paths["scenario"].write_text(json.dumps(asdict(scenario), indent=2))
    return {k: str(v) for k, v in paths.items()}
