from datetime import date, timedelta

import numpy as np
import pytest
from shapely.geometry import box

from airdist.ingest import (
    AsciiGrid,
    IngestError,
    IngestReport,
    RawMeasurement,
    StationSeries,
    attach_covariates,
    build_series,
    daily_average,
    deduplicate_sensors,
    read_measurements,
    read_series_csv,
    record_weights,
    standardize,
    trim_series,
    write_measurements,
    write_series_csv,
)
from airdist.mesh import build_mesh


def hourly(values, day="2019-03-01", station="S", sensor="S-1", equipment="beta-radiation"):
    return [RawMeasurement(station, sensor, equipment, f"{day} {h:02d}:00", v) for h, v in enumerate(values)]


def days(n, start=date(2019, 1, 1)):
    return [(start + timedelta(d)).isoformat() for d in range(n)]


def test_daily_average_examples():
    out = daily_average(hourly([30.0] * 24))
    assert len(out) == 1 and out[0].value == 30.0 and out[0].timestamp == "2019-03-01"
    out = daily_average(hourly([10.0 * (k + 1) for k in range(24)]))
    assert out[0].value == pytest.approx(125.0, abs=1e-12)
    out = daily_average([RawMeasurement("S", "S-1", "TEOM", "2019-03-01", 42.0)])
    assert [(r.timestamp, r.value) for r in out] == [("2019-03-01", 42.0)]


def test_daily_average_completeness_and_rejections():
    rep = IngestReport()
    raw = hourly([20.0] * 17, day="2019-03-01") + hourly([20.0] * 18, day="2019-03-02")
    raw += [RawMeasurement("S", "S-1", "beta-radiation", "not a date", 5.0),
            RawMeasurement("S", "S-1", "beta-radiation", "2019-03-03", -1.0),
            RawMeasurement("S", "S-1", "beta-radiation", "2030-01-01", 5.0)]
    out = daily_average(raw, window=(date(2018, 1, 1), date(2022, 12, 31)), report=rep)
    assert [r.timestamp for r in out] == ["2019-03-02"]
    assert rep.removed["incomplete_day"] == 17
    assert rep.rejected == {"bad_timestamp": 1, "invalid_value": 1, "outside_window": 1}


def test_hourly_wins_over_daily():
    rep = IngestReport()
    raw = hourly([40.0] * 24) + [RawMeasurement("S", "S-1", "beta-radiation", "2019-03-01", 99.0)]
    out = daily_average(raw, report=rep)
    assert len(out) == 1 and out[0].value == 40.0
    assert rep.removed["superseded_daily"] == 1 and rep.decisions


def test_daily_rows_unique_per_sensor_and_date():
    rng = np.random.default_rng(0)
    raw = []
    for sensor in ("A", "B"):
        for d in days(5):
            raw += hourly(rng.uniform(0, 80, 24), day=d, sensor=sensor)
    out = daily_average(raw)
    keys = [(r.sensor_id, r.timestamp) for r in out]
    assert len(keys) == len(set(keys)) == 10


def daily_rows(sensor, equipment, dates, value, station="S"):
    return [RawMeasurement(station, sensor, equipment, d, value) for d in dates]


def test_dedup_single_sensor_identity():
    rows = daily_rows("S-1", "OPC", days(4), 12.0)
    out = deduplicate_sensors(rows)
    assert out == {"S": [(d, 12.0, 1) for d in days(4)]}


def test_dedup_prefers_single_equipment_sensor():
    d = days(6)
    rows = daily_rows("S-a", "beta-radiation", d, 10.0)
    rows += daily_rows("S-b", "beta-radiation", d[3:], 20.0) + daily_rows("S-b", "TEOM", d[:3], 20.0)
    rep = IngestReport()
    out = deduplicate_sensors(rows, rep)
    assert [v for _, v, _ in out["S"]] == [10.0] * 6
    assert rep.removed["dropped_sensor"] == 6


def test_dedup_lexicographic_tie_break():
    d = days(5)
    rows = daily_rows("S-zz", "gravimetry", d, 1.0) + daily_rows("S-aa", "OPC", d, 2.0)
    out = deduplicate_sensors(rows)
    assert [v for _, v, _ in out["S"]] == [2.0] * 5


def test_dedup_needs_both_sensors_for_coverage():
    d = days(6)
    rows = daily_rows("S-1", "beta-radiation", d[:4], 1.0) + daily_rows("S-2", "beta-radiation", d[2:], 2.0)
    rep = IngestReport()
    out = deduplicate_sensors(rows, rep)
    assert [v for _, v, _ in out["S"]] == [1.0, 1.0, 1.0, 1.0, 2.0, 2.0]
    assert rep.removed["duplicate_day"] == 2


def series(values, sid="S"):
    return StationSeries(sid, [0.0, 0.0], values, dates=tuple(days(len(values))))


def test_trim_examples():
    rep = IngestReport()
    out = trim_series(series([3.0, 50.0, 95.0]), 5.0, 90.0, rep)
    assert out.values.tolist() == [50.0] and out.trim_bounds == (5.0, 90.0)
    assert rep.removed["trimmed"] == 2 and out.dates == (days(3)[1],)
    s = series([6.0, 40.0, 89.0])
    assert trim_series(s, 5.0, 90.0).values.tolist() == s.values.tolist()
    assert trim_series(series([5.0, 90.0]), 5.0, 90.0).n == 2
    with pytest.raises(IngestError, match="degenerate"):
        trim_series(s, 90.0, 90.0)


def test_trim_with_fields_and_idempotence():
    rng = np.random.default_rng(1)
    s = StationSeries("S", [2.0, 3.0], rng.gamma(3, 10, 500))
    lo = lambda p: 1.0 + p[:, 0]  # noqa: E731
    hi = lambda p: 60.0 + p[:, 1]  # noqa: E731
    once = trim_series(s, lo, hi)
    assert once.trim_bounds == (3.0, 63.0)
    assert once.values.min() >= 3.0 and once.values.max() <= 63.0
    rep = IngestReport()
    twice = trim_series(once, lo, hi, rep)
    assert twice.n == once.n and sum(rep.removed.values()) == 0


def test_standardize_oracle():
    Z, mean, std = standardize(np.array([[1.0, 100.0], [2.0, 300.0]]))
    assert Z[:, 1].tolist() == [-1.0, 1.0]
    assert mean[1] == 200.0 and std[1] == 100.0


def covariate_fixture(tmp_path, altitude_values):
    mesh = build_mesh([(0, 0), (10, 0), (10, 10), (0, 10)], 1.0)
    grid = AsciiGrid(0.0, 0.0, 1.0, altitude_values)
    polys = [box(0, 0, 5, 10), box(5, 0, 10, 10)]
    return mesh, grid, polys


def test_attach_covariates(tmp_path):
    alt = np.arange(100, dtype=float).reshape(10, 10)
    mesh, grid, polys = covariate_fixture(tmp_path, alt)
    ss = [StationSeries("A", [2.5, 5.0], [1.0]), StationSeries("B", [7.5, 5.0], [2.0]),
          StationSeries("C", [1.2, 8.7], [3.0])]
    out, model = attach_covariates(ss, grid, polys, [100.0, 300.0], mesh, lam=1e-12)
    raw = model.raw(np.array([s.location for s in ss]))
    assert raw[:, 1] == pytest.approx([100.0, 300.0, 100.0], abs=1e-6)
    # nearest cell: row 0 is the northern edge
    assert raw[2, 0] == alt[1, 1] and raw[0, 0] == alt[4, 2]
    Z = np.array([s.covariates for s in out])
    assert np.allclose(Z.mean(axis=0), 0, atol=1e-12) and np.allclose(Z.std(axis=0), 1, atol=1e-12)
    assert np.allclose(model(np.array([s.location for s in ss])), Z, atol=1e-12)
    with pytest.raises(IngestError, match="station D"):
        attach_covariates([*ss, StationSeries("D", [12.0, 5.0], [1.0])], grid, polys, [100.0, 300.0], mesh)


def test_constant_altitude_is_rejected(tmp_path):
    mesh, grid, polys = covariate_fixture(tmp_path, np.full((10, 10), 250.0))
    ss = [StationSeries("A", [2.5, 5.0], [1.0]), StationSeries("B", [7.5, 5.0], [2.0])]
    with pytest.raises(IngestError, match="zero-variance covariate"):
        attach_covariates(ss, grid, polys, [100.0, 300.0], mesh)


def test_ascii_grid_round_trip(tmp_path):
    g = AsciiGrid(10.0, 20.0, 5.0, np.array([[1.0, 2.0, -9999.0], [4.0, 5.0, 6.0]]))
    g.write(tmp_path / "a.asc")
    back = AsciiGrid.read(tmp_path / "a.asc")
    assert np.array_equal(back.values, g.values) and back.cellsize == 5.0
    v = back.lookup(np.array([[11.0, 21.0], [11.0, 29.0], [21.0, 29.0], [100.0, 0.0]]))
    assert v[0] == 4.0 and v[1] == 1.0 and np.isnan(v[2]) and np.isnan(v[3])


def test_record_conservation(tmp_path):
    rng = np.random.default_rng(2)
    raw = []
    for st in ("S1", "S2", "S3"):
        for k, d in enumerate(days(130)):
            if k % 3 == 0:
                raw += hourly(rng.uniform(0, 90, 20 if k % 2 else 24), day=d, station=st, sensor=f"{st}-h")
            else:
                raw.append(RawMeasurement(st, f"{st}-d", "beta-radiation", d, float(rng.uniform(0, 90))))
            if k % 7 == 0:
                raw.append(RawMeasurement(st, f"{st}-x", "TEOM", d, 1.0))
    raw = raw[: len(raw) - 260]  # leaves S3 too short
    raw.append(RawMeasurement("S1", "S1-d", "beta-radiation", "2019-13-45", 3.0))
    write_measurements(tmp_path / "m.csv", raw)
    with open(tmp_path / "m.csv", "a") as fh:
        fh.write("S1,S1-d,beta-radiation,2019-02-02,n/a\n")
    rep = IngestReport()
    rows = read_measurements(tmp_path / "m.csv", rep)
    daily = deduplicate_sensors(daily_average(rows, report=rep), rep)
    reg = {s: np.array([0.0, 0.0]) for s in ("S1", "S2", "S3")}
    kept = build_series(daily, reg, min_length=100, report=rep)
    assert sorted(s.station_id for s in kept) == ["S1", "S2"]
    final = []
    for s in kept:
        t = trim_series(s, 5.0, 85.0, rep, weights=record_weights(daily, s))
        final.append(t)
        rep.n_retained += int(record_weights(daily, t).sum())
    assert rep.n_input == len(raw) + 1
    assert rep.balanced
    assert rep.to_dict()["per_station"]["S1"]["trimmed"] > 0
    write_series_csv(tmp_path / "s.csv", final)
    back = read_series_csv(tmp_path / "s.csv")
    assert [b.values.tolist() for b in back] == [f.values.tolist() for f in final]
    assert back[0].trim_bounds == (5.0, 85.0)


def test_registry_gap_is_an_error():
    daily = {"S9": [("2019-01-01", 1.0, 1)]}
    with pytest.raises(IngestError, match="S9"):
        build_series(daily, {})
