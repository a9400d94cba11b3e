"""From raw per-sensor measurement tables to trimmed station series.

Every input record ends up in exactly one bucket of the :class:`IngestReport`:
rejected (unparseable or invalid), removed (incomplete day, superseded daily
row, duplicate sensor, trimmed) or retained in an output daily mean.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import shape

from .mesh import TriangularMesh, assemble, smooth_covariate

log = logging.getLogger(__name__)

EQUIPMENT = ("beta-radiation", "gravimetry", "OPC", "nephelometry", "TEOM")
MIN_HOURLY = 18
MIN_SERIES_LENGTH = 100
COVARIATE_NAMES = ("altitude_m", "popdensity_km2")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class RawMeasurement:
    station_id: str
    sensor_id: str
    equipment: str
    timestamp: str
    value: float
    n_records: int = 1  # raw records folded into this row


@dataclass
class StationSeries:
    station_id: str
    location: np.ndarray
    values: np.ndarray
    covariates: np.ndarray | None = None
    trim_bounds: tuple[float, float] | None = None
    dates: tuple = ()

    def __post_init__(self):
        self.location = np.asarray(self.location, float).reshape(2)
        self.values = np.asarray(self.values, float).ravel()
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, float).ravel()

    @property
    def n(self) -> int:
        return len(self.values)


@dataclass
class IngestReport:
    n_input: int = 0
    rejected: dict = field(default_factory=lambda: defaultdict(int))
    removed: dict = field(default_factory=lambda: defaultdict(int))
    per_station: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))
    decisions: list = field(default_factory=list)
    n_retained: int = 0

    def reject(self, reason: str, n: int = 1):
        self.rejected[reason] += n

    def remove(self, stage: str, station_id: str, n: int):
        if n:
            self.removed[stage] += n
            self.per_station[station_id][stage] += n

    @property
    def balanced(self) -> bool:
        return self.n_retained + sum(self.rejected.values()) + sum(self.removed.values()) == self.n_input

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_retained": self.n_retained,
            "rejected": dict(sorted(self.rejected.items())),
            "removed": dict(sorted(self.removed.items())),
            "per_station": {k: dict(sorted(v.items())) for k, v in sorted(self.per_station.items())},
            "decisions": self.decisions,
            "balanced": self.balanced,
        }

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# ---------------------------------------------------------------------------
# daily averaging
# ---------------------------------------------------------------------------

def parse_timestamp(ts: str) -> tuple[date, int | None]:
    """Return ``(day, hour)``; hour is None for date-only timestamps."""
    s = str(ts).strip()
    if len(s) == 10:
        return date.fromisoformat(s), None
    if len(s) == 13:  # "YYYY-MM-DD HH"
        s += ":00"
    t = datetime.fromisoformat(s)
    return t.date(), t.hour


def daily_average(raw, min_hourly: int = MIN_HOURLY, window=None, report: IngestReport | None = None):
    """Collapse raw rows to one row per (sensor, date).

    Hourly rows are averaged and kept only when at least ``min_hourly``
    distinct hours are present.  Daily rows pass through.  When a sensor has
    both granularities on the same day the hourly rows win.
    """
    report = report if report is not None else IngestReport()
    raw = list(raw)
    report.n_input += sum(r.n_records for r in raw)
    hourly = defaultdict(list)
    daily = defaultdict(list)
    meta = {}
    for r in raw:
        try:
            day, hour = parse_timestamp(r.timestamp)
        except (TypeError, ValueError):
            report.reject("bad_timestamp", r.n_records)
            continue
        v = float(r.value)
        if not np.isfinite(v) or v < 0:
            report.reject("invalid_value", r.n_records)
            continue
        if window is not None and not (window[0] <= day <= window[1]):
            report.reject("outside_window", r.n_records)
            continue
        key = (r.station_id, r.sensor_id, day)
        meta[key] = r.equipment
        (daily if hour is None else hourly)[key].append((hour, v, r.n_records))

    out = []
    for key in sorted(set(hourly) | set(daily)):
        sid, sensor, day = key
        if key in hourly:
            rows = hourly[key]
            if key in daily:
                n_sup = sum(n for *_, n in daily[key])
                report.remove("superseded_daily", sid, n_sup)
                report.decisions.append(f"{sensor} {day}: hourly rows used, daily row dropped")
            n = sum(n for *_, n in rows)
            if len({h for h, _, _ in rows}) < min_hourly:
                report.remove("incomplete_day", sid, n)
                continue
            value = float(np.mean([v for _, v, _ in rows]))
        else:
            rows = daily[key]
            n = sum(n for *_, n in rows)
            value = float(np.mean([v for _, v, _ in rows]))
        out.append(RawMeasurement(sid, sensor, meta[key], day.isoformat(), value, n))
    return out


# ---------------------------------------------------------------------------
# sensor deduplication
# ---------------------------------------------------------------------------

def _sensor_rank(equip: set, sensor_id: str):
    return (len(equip), "beta-radiation" not in equip, sensor_id)


def _choose_subset(sensors: dict, days: dict):
    """Sensors covering every day with the fewest distinct equipment types."""
    names = sorted(sensors)
    all_days = set().union(*days.values())
    if len(names) > 12:
        # too many for enumeration, use every sensor
        return names
    best, best_key = None, None
    for k in range(1, len(names) + 1):
        for sub in itertools.combinations(names, k):
            if set().union(*(days[s] for s in sub)) != all_days:
                continue
            equip = set().union(*(sensors[s] for s in sub))
            key = (len(equip), "beta-radiation" not in equip, k, sub)
            if best_key is None or key < best_key:
                best, best_key = list(sub), key
    return best


def deduplicate_sensors(rows, report: IngestReport | None = None) -> dict:
    """One daily series per station as ``{station_id: [(date, value, n_records), ...]}``.

    The retained sensors are the covering subset with the fewest distinct
    equipment types (beta-radiation preferred, then sensor ids).  On days
    with several retained sensors the row of the best ranked sensor is kept,
    ranking by the sensor's own equipment count, beta-radiation, sensor id.
    """
    report = report if report is not None else IngestReport()
    by_station = defaultdict(list)
    for r in rows:
        by_station[r.station_id].append(r)
    out = {}
    for sid in sorted(by_station):
        rs = by_station[sid]
        sensors = defaultdict(set)
        days = defaultdict(set)
        for r in rs:
            sensors[r.sensor_id].add(r.equipment)
            days[r.sensor_id].add(r.timestamp)
        keep = set(_choose_subset(sensors, days))
        rank = {s: _sensor_rank(sensors[s], s) for s in keep}
        chosen = {}
        for r in rs:
            if r.sensor_id not in keep:
                report.remove("dropped_sensor", sid, r.n_records)
                continue
            cur = chosen.get(r.timestamp)
            if cur is None:
                chosen[r.timestamp] = r
            elif rank[r.sensor_id] < rank[cur.sensor_id]:
                report.remove("duplicate_day", sid, cur.n_records)
                chosen[r.timestamp] = r
            else:
                report.remove("duplicate_day", sid, r.n_records)
        out[sid] = [(d, chosen[d].value, chosen[d].n_records) for d in sorted(chosen)]
    return out


# ---------------------------------------------------------------------------
# trimming
# ---------------------------------------------------------------------------

def _field_value(f, location) -> float:
    if callable(f):
        return float(np.ravel(f(np.atleast_2d(location)))[0])
    return float(f)


def trim_series(series: StationSeries, q1_field, q99_field, report: IngestReport | None = None,
                weights=None) -> StationSeries:
    """Drop values outside the closed interval ``[Q1(s), Q99(s)]``.

    The fields may be constants or callables mapping an (m, 2) point array
    to m values.  ``weights`` optionally gives the raw-record count behind
    each value, for the ingestion report.
    """
    q1 = _field_value(q1_field, series.location)
    q99 = _field_value(q99_field, series.location)
    if not q1 < q99:
        raise IngestError(f"station {series.station_id}: degenerate trim interval Q1={q1} >= Q99={q99}")
    keep = (series.values >= q1) & (series.values <= q99)
    if report is not None:
        w = np.ones(series.n, int) if weights is None else np.asarray(weights)
        report.remove("trimmed", series.station_id, int(w[~keep].sum()))
    dates = tuple(d for d, k in zip(series.dates, keep) if k) if series.dates else ()
    return replace(series, values=series.values[keep], trim_bounds=(q1, q99), dates=dates)


# ---------------------------------------------------------------------------
# covariates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AsciiGrid:
    """ESRI-style ASCII raster; row 0 is the northern edge."""

    xllcorner: float
    yllcorner: float
    cellsize: float
    values: np.ndarray
    nodata: float = -9999.0

    @classmethod
    def read(cls, path) -> "AsciiGrid":
        header = {}
        with open(path) as fh:
            lines = fh.read().split("\n")
        i = 0
        while i < len(lines) and lines[i].strip() and lines[i].split()[0][0].isalpha():
            k, v = lines[i].split()[:2]
            header[k.lower()] = float(v)
            i += 1
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        vals = np.array(" ".join(lines[i:]).split(), float)
        if vals.size != ncols * nrows:
            raise IngestError(f"ascii grid {path}: expected {ncols * nrows} values, found {vals.size}")
        x0 = header.get("xllcorner", header.get("xllcenter", 0.0) - header["cellsize"] / 2)
        y0 = header.get("yllcorner", header.get("yllcenter", 0.0) - header["cellsize"] / 2)
        return cls(x0, y0, header["cellsize"], vals.reshape(nrows, ncols), header.get("nodata_value", -9999.0))

    def write(self, path):
        nrows, ncols = self.values.shape
        with open(path, "w") as fh:
            fh.write(f"ncols {ncols}\nnrows {nrows}\nxllcorner {self.xllcorner!r}\n"
                     f"yllcorner {self.yllcorner!r}\ncellsize {self.cellsize!r}\nNODATA_value {self.nodata!r}\n")
            for row in self.values:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    def lookup(self, points) -> np.ndarray:
        """Nearest-cell values; NaN outside the raster or on nodata."""
        p = np.atleast_2d(np.asarray(points, float))
        nrows, ncols = self.values.shape
        col = np.floor((p[:, 0] - self.xllcorner) / self.cellsize).astype(int)
        row = nrows - 1 - np.floor((p[:, 1] - self.yllcorner) / self.cellsize).astype(int)
        ok = (col >= 0) & (col < ncols) & (row >= 0) & (row < nrows)
        out = np.full(len(p), np.nan)
        out[ok] = self.values[row[ok], col[ok]]
        out[out == self.nodata] = np.nan
        return out


def polygon_lookup(polygons, values, points) -> np.ndarray:
    """Value of the polygon containing each point, NaN where none does."""
    tree = shapely.STRtree(list(polygons))
    p = np.atleast_2d(np.asarray(points, float))
    pt_idx, poly_idx = tree.query(shapely.points(p), predicate="intersects")
    out = np.full(len(p), np.nan)
    # first hit wins for points on shared edges
    order = np.lexsort((poly_idx, pt_idx))
    pt_idx, poly_idx = pt_idx[order], poly_idx[order]
    first = np.r_[True, pt_idx[1:] != pt_idx[:-1]] if len(pt_idx) else np.zeros(0, bool)
    out[pt_idx[first]] = np.asarray(values, float)[poly_idx[first]]
    return out


@dataclass
class CovariateModel:
    """Standardized (altitude, smoothed population density) at arbitrary points."""

    altitude: AsciiGrid
    mesh: TriangularMesh
    pop_coefficients: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    names: tuple = COVARIATE_NAMES

    def raw(self, points, labels=None) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, float))
        alt = self.altitude.lookup(p)
        bad = np.flatnonzero(np.isnan(alt))
        if bad.size:
            who = labels[bad[0]] if labels is not None else f"point {p[bad[0]].tolist()}"
            raise IngestError(f"{who}: location outside altitude coverage")
        pop = self.mesh.evaluate(self.pop_coefficients, p)
        return np.column_stack([alt, pop])

    def __call__(self, points) -> np.ndarray:
        return (self.raw(points) - self.mean) / self.std

    def standardization(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}


def standardize(X, names=COVARIATE_NAMES):
    X = np.asarray(X, float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    zero = np.flatnonzero(std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if zero.size:
        raise IngestError(f"zero-variance covariate: {names[zero[0]] if zero[0] < len(names) else zero[0]}")
    return (X - mean) / std, mean, std


def smooth_popdensity(mesh: TriangularMesh, polygons, densities, lam: float = 1e-6, ops=None) -> np.ndarray:
    """FEM coefficients of the smoothed population density.

    Each mesh vertex takes the density of its containing polygon; the
    vertex data are then smoothed with the squared-Laplacian penalty.
    """
    v = polygon_lookup(polygons, densities, mesh.vertices)
    ok = ~np.isnan(v)
    if not ok.any():
        raise IngestError("population polygons do not overlap the mesh")
    return smooth_covariate(ops if ops is not None else assemble(mesh), mesh.vertices[ok], v[ok], lam)


def attach_covariates(series, altitude: AsciiGrid, polygons, densities, mesh: TriangularMesh,
                      lam: float = 1e-6, ops=None):
    """Populate standardized covariates; returns ``(series, CovariateModel)``."""
    series = list(series)
    loc = np.array([s.location for s in series])
    ids = [s.station_id for s in series]
    pop_direct = polygon_lookup(polygons, densities, loc)
    missing = np.flatnonzero(np.isnan(pop_direct))
    if missing.size:
        raise IngestError(f"station {ids[missing[0]]}: location outside population polygons")
    coef = smooth_popdensity(mesh, polygons, densities, lam, ops)
    model = CovariateModel(altitude, mesh, coef, np.zeros(2), np.ones(2))
    raw = model.raw(loc, labels=[f"station {i}" for i in ids])
    Z, mean, std = standardize(raw)
    model.mean, model.std = mean, std
    return [replace(s, covariates=z) for s, z in zip(series, Z)], model


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

MEASUREMENT_HEADER = ["station_id", "sensor_id", "equipment", "timestamp", "value"]


def read_measurements(path, report: IngestReport | None = None) -> list[RawMeasurement]:
    """Measurement CSV; rows with a non-numeric value are rejected."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MEASUREMENT_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise IngestError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                value = float(row["value"])
            except (TypeError, ValueError):
                if report is not None:
                    report.n_input += 1
                    report.reject("bad_value")
                continue
            out.append(RawMeasurement(row["station_id"], row["sensor_id"], row["equipment"],
                                      row["timestamp"], value))
    return out


def write_measurements(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_HEADER)
        for r in rows:
            w.writerow([r.station_id, r.sensor_id, r.equipment, r.timestamp, repr(float(r.value))])


def read_registry(path) -> dict:
    with open(path, newline="") as fh:
        return {r["station_id"]: np.array([float(r["x"]), float(r["y"])]) for r in csv.DictReader(fh)}


def read_geojson_polygons(path, id_key: str = "municipality_id", value_key: str | None = None):
    """``(ids, shapely geometries, values or None, features)`` from a FeatureCollection."""
    doc = json.loads(Path(path).read_text())
    feats = doc["features"]
    ids = [str(f["properties"].get(id_key, i)) for i, f in enumerate(feats)]
    geoms = [shape(f["geometry"]) for f in feats]
    values = None if value_key is None else np.array([float(f["properties"][value_key]) for f in feats])
    return ids, geoms, values, feats


def write_series_csv(path, series, covariate_names=COVARIATE_NAMES):
    """Long-format trimmed series: one row per daily value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        q = 0 if not series or series[0].covariates is None else len(series[0].covariates)
        names = list(covariate_names[:q]) + [f"cov{j}" for j in range(len(covariate_names), q)]
        w.writerow(["station_id", "x", "y", *names, "q1", "q99", "value"])
        for s in series:
            cov = [] if s.covariates is None else [repr(float(c)) for c in s.covariates]
            tb = s.trim_bounds or ("", "")
            head = [s.station_id, repr(float(s.location[0])), repr(float(s.location[1])), *cov,
                    *(repr(float(b)) if b != "" else "" for b in tb)]
            for v in s.values:
                w.writerow([*head, repr(float(v))])


def read_series_csv(path) -> list[StationSeries]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cov_cols = header[3:-3]
        groups = {}
        for row in reader:
            g = groups.setdefault(row[0], {"row": row, "values": []})
            g["values"].append(float(row[-1]))
    out = []
    for sid, g in groups.items():
        row = g["row"]
        cov = np.array([float(c) for c in row[3:3 + len(cov_cols)]]) if cov_cols else None
        tb = (float(row[-3]), float(row[-2])) if row[-3] else None
        out.append(StationSeries(sid, [float(row[1]), float(row[2])], g["values"], cov, tb))
    return out


def build_series(daily: dict, registry: dict, min_length: int = 0, report: IngestReport | None = None):
    """Attach locations to deduplicated daily series.

    Stations missing from the registry are an error; series shorter than
    ``min_length`` are dropped and reported.
    """
    out = []
    for sid, rows in daily.items():
        if sid not in registry:
            raise IngestError(f"station {sid} missing from the registry")
        if len(rows) < min_length:
            if report is not None:
                report.remove("short_series", sid, sum(n for *_, n in rows))
            continue
        out.append(StationSeries(sid, registry[sid], [v for _, v, _ in rows], dates=tuple(d for d, _, _ in rows)))
    return out


def record_weights(daily: dict, series: StationSeries) -> np.ndarray:
    """Raw-record count behind each value of ``series``."""
    by_date = {d: n for d, _, n in daily[series.station_id]}
    return np.array([by_date[d] for d in series.dates], int)
