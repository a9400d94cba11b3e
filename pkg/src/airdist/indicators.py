"""Regulatory indicators from the three distributional representations."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .geom import Composition
from .sde import UnscaledDensity

THRESHOLD = 50.0  # ug/m3, daily limit value
DAY_LIMIT = 35  # tolerated exceedances per calendar year
YEAR_DAYS = 365
METHODS = ("CFRK", "MQSR", "SDE")
CLASSES = ("green", "yellow", "orange", "red")


class UnsupportedMethodError(ValueError):
    pass


# ---------------------------------------------------------------------------
# exceedance probabilities
# ---------------------------------------------------------------------------

def exceedance_from_composition(c: Composition) -> float:
    return float(c.above)


def fritsch_carlson_slopes(x, y) -> np.ndarray:
    """Node derivatives making the cubic Hermite interpolant monotone."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    d = np.diff(y) / np.diff(x)
    if len(d) == 0:
        return np.zeros(1)
    m = np.empty(len(x))
    m[0], m[-1] = d[0], d[-1]
    m[1:-1] = 0.5 * (d[:-1] + d[1:])
    m[1:-1][d[:-1] * d[1:] <= 0] = 0.0
    for k in range(len(d)):
        if d[k] == 0:
            m[k] = m[k + 1] = 0.0
            continue
        a, b = m[k] / d[k], m[k + 1] / d[k]
        s = a * a + b * b
        if s > 9.0:
            tau = 3.0 / np.sqrt(s)
            m[k] = tau * a * d[k]
            m[k + 1] = tau * b * d[k]
    return m


@dataclass(frozen=True)
class QuantileCdf:
    """Monotone CDF through (quantile, level) pairs with linear tails.

    Between the outermost quantiles the CDF is the Fritsch-Carlson monotone
    cubic through ``(Q_j, alpha_j)``; below ``Q_1`` it falls linearly to 0 at
    ``lower`` and above ``Q_r`` it rises linearly to 1 at ``upper``.
    """

    alphas: np.ndarray
    quantiles: np.ndarray
    lower: float
    upper: float
    collapsed: bool = False

    @property
    def _spline(self):
        if len(self.quantiles) < 2:
            return None
        return CubicHermiteSpline(self.quantiles, self.alphas,
                                  fritsch_carlson_slopes(self.quantiles, self.alphas))

    def cdf(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, float))
        a, q = self.alphas, self.quantiles
        out = np.empty_like(y)
        lo = y < q[0]
        hi = y > q[-1]
        mid = ~(lo | hi)
        out[lo] = _ramp(y[lo], self.lower, q[0], 0.0, a[0])
        out[hi] = _ramp(y[hi], q[-1], self.upper, a[-1], 1.0)
        if mid.any():
            sp_ = self._spline
            out[mid] = sp_(y[mid]) if sp_ is not None else a[0]
        return np.clip(out, 0.0, 1.0)

    def pdf(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, float))
        a, q = self.alphas, self.quantiles
        out = np.zeros_like(y)
        lo = (y >= self.lower) & (y < q[0])
        hi = (y > q[-1]) & (y <= self.upper)
        mid = (y >= q[0]) & (y <= q[-1])
        if q[0] > self.lower:
            out[lo] = a[0] / (q[0] - self.lower)
        if self.upper > q[-1]:
            out[hi] = (1.0 - a[-1]) / (self.upper - q[-1])
        sp_ = self._spline
        if sp_ is not None and mid.any():
            out[mid] = sp_.derivative()(y[mid])
        return np.maximum(out, 0.0)

    def exceedance(self, threshold: float) -> float:
        return float(1.0 - self.cdf(threshold)[0])

    def quantile(self, level: float) -> float:
        hit = np.flatnonzero(np.isclose(self.alphas, level, rtol=0, atol=1e-12))
        if hit.size:
            return float(self.quantiles[hit[0]])
        return _bisect(self.cdf, level, self.lower, self.upper)


def _ramp(y, x0, x1, v0, v1):
    if x1 <= x0:
        return np.where(y < x0, v0 if v0 == 0 else v0, v1)
    return v0 + (v1 - v0) * (y - x0) / (x1 - x0)


def cdf_from_quantiles(alphas, quantiles, support=None) -> QuantileCdf:
    """Build a :class:`QuantileCdf` from levels and quantile values at a point.

    ``support`` gives the (lower, upper) points where the CDF reaches 0 and 1;
    by default the first and last segments are extended linearly.  Repeated
    quantile values are merged by averaging their levels (``collapsed`` flag).
    """
    a = np.asarray(alphas, float)
    q = np.asarray(quantiles, float)
    if np.any(np.diff(q) < -1e-9):
        raise ValueError("quantiles must be non-decreasing")
    q = np.maximum.accumulate(q)
    collapsed = False
    uq, inv = np.unique(np.round(q, 12), return_inverse=True)
    if len(uq) < len(q):
        collapsed = True
        a = np.bincount(inv, weights=a) / np.bincount(inv)
        q = np.bincount(inv, weights=q) / np.bincount(inv)
    if support is not None:
        lower, upper = float(support[0]), float(support[1])
    elif len(q) >= 2:
        lower = q[0] - a[0] * (q[1] - q[0]) / (a[1] - a[0])
        upper = q[-1] + (1 - a[-1]) * (q[-1] - q[-2]) / (a[-1] - a[-2])
    else:
        raise ValueError("a single quantile needs an explicit support")
    return QuantileCdf(a, q, min(lower, q[0]), max(upper, q[-1]), collapsed)


def exceedance_from_density(density: UnscaledDensity, threshold: float) -> float:
    if threshold <= density.q1:
        return 1.0
    if threshold >= density.q99:
        return 0.0
    return float(1.0 - density.cdf(threshold)[0])


def expected_days(p) -> np.ndarray | float:
    p = np.asarray(p, float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    days = YEAR_DAYS * p
    return float(days) if days.ndim == 0 else days


def flag_35(p, day_limit: float = DAY_LIMIT):
    """True where expected exceedance days are strictly above the limit."""
    days = np.asarray(expected_days(p))
    out = days > day_limit
    return bool(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# quantiles and consensus
# ---------------------------------------------------------------------------

def _bisect(cdf, level, lo, hi, tol=1e-6):
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if cdf(mid)[0] < level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def quantile_lookup(representation, level: float = 0.95) -> float:
    """Concentration quantile of an MQSR or SDE representation."""
    if isinstance(representation, Composition):
        raise UnsupportedMethodError("quantiles unavailable for two-part compositions")
    if isinstance(representation, QuantileCdf):
        return representation.quantile(level)
    if isinstance(representation, UnscaledDensity):
        return _bisect(representation.cdf, level, representation.q1, representation.q99)
    raise UnsupportedMethodError(f"unsupported representation {type(representation).__name__}")


@dataclass(frozen=True)
class ConsensusClass:
    municipality_id: str
    votes: int
    label: str


def consensus(flags, municipality_id: str = "") -> ConsensusClass:
    flags = list(flags.values()) if isinstance(flags, dict) else list(flags)
    if len(flags) != 3 or any(f is None for f in flags):
        raise ValueError("consensus needs exactly one flag from each of the three methods")
    votes = int(sum(bool(f) for f in flags))
    return ConsensusClass(municipality_id, votes, CLASSES[votes])


@dataclass(frozen=True)
class MunicipalIndicator:
    municipality_id: str
    method: str
    p: float
    expected_days: float
    q95: float | None = None

    @classmethod
    def build(cls, municipality_id, method, p, q95=None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        p = float(np.clip(p, 0.0, 1.0))
        return cls(str(municipality_id), method, p, expected_days(p), None if q95 is None else float(q95))


def write_indicator_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["municipality_id", "method", "p", "expected_days", "q95"])
        for r in rows:
            w.writerow([r.municipality_id, r.method, repr(float(r.p)), repr(float(r.expected_days)),
                        "" if r.q95 is None else repr(float(r.q95))])


def read_indicator_csv(path) -> list[MunicipalIndicator]:
    with open(path) as fh:
        return [
            MunicipalIndicator(r["municipality_id"], r["method"], float(r["p"]), float(r["expected_days"]),
                               float(r["q95"]) if r["q95"] else None)
            for r in csv.DictReader(fh)
        ]


def consensus_geojson(features, classes: dict) -> dict:
    """Copy municipality features and attach ``votes`` and ``class`` properties."""
    out = []
    for f in features:
        mid = str(f["properties"]["municipality_id"])
        c = classes[mid]
        props = dict(f["properties"], votes=c.votes, **{"class": c.label})
        out.append({"type": "Feature", "geometry": f["geometry"], "properties": props})
    return {"type": "FeatureCollection", "features": out}


def write_consensus_geojson(path, features, classes) -> None:
    with open(path, "w") as fh:
        json.dump(consensus_geojson(features, classes), fh)
