"""Spatial density estimation in Bayes space.

Each station's trimmed series is aligned onto [0, 1] by its own trimming
bounds, smoothed into a density with a penalised cubic B-spline fitted in clr
space, and the clr curves are reduced by functional PCA.  Scores are kriged
with the FRK engine and the municipal densities are rebuilt on supports
predicted from the extreme quantile fields.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import shapely
from scipy.interpolate import BSpline

from . import frk
from .geom import GRID_SIZE, DensityOnUnit, clr_inverse, trapezoid_weights, unit_grid

log = logging.getLogger(__name__)

DEFAULT_KNOTS = 9
DEFAULT_BINS = 24
DEFAULT_VARIANCE_TARGET = 0.90
DEFAULT_SMOOTHING = 1e-4
MIN_SAMPLES = 100


class SdeError(ValueError):
    pass


def align(values, q1: float, q99: float) -> np.ndarray:
    """Affine map of ``[q1, q99]`` onto ``[0, 1]``."""
    if not q1 < q99:
        raise SdeError(f"invalid support [{q1}, {q99}]")
    values = np.asarray(values, float)
    if np.any(values < q1) or np.any(values > q99):
        raise SdeError("values outside the trimming bounds; trim the series first")
    return (values - q1) / (q99 - q1)


def unscale(scaled, q1: float, q99: float) -> np.ndarray:
    return q1 + np.asarray(scaled, float) * (q99 - q1)


# ---------------------------------------------------------------------------
# per-station densities
# ---------------------------------------------------------------------------

def spline_knots(n_interior: int = DEFAULT_KNOTS, degree: int = 3) -> np.ndarray:
    inner = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    return np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])


def _second_derivative_gram(knots, degree=3) -> np.ndarray:
    nb = len(knots) - degree - 1
    breaks = np.unique(knots)
    gx, gw = np.polynomial.legendre.leggauss(4)
    pts, wts = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        pts.append(0.5 * (b - a) * gx + 0.5 * (a + b))
        wts.append(0.5 * (b - a) * gw)
    pts, wts = np.concatenate(pts), np.concatenate(wts)
    d2 = np.column_stack([BSpline(knots, np.eye(nb)[i], degree).derivative(2)(pts) for i in range(nb)])
    return d2.T @ (wts[:, None] * d2)


@dataclass(frozen=True)
class ScaledDensityEstimate:
    station_id: str | None
    density: DensityOnUnit
    knots: np.ndarray
    smoothing: float
    n_samples: int

    @property
    def clr_values(self) -> np.ndarray:
        return self.density.clr_values


def estimate_density(
    scaled,
    station_id: str | None = None,
    n_bins: int = DEFAULT_BINS,
    n_knots: int = DEFAULT_KNOTS,
    smoothing: float = DEFAULT_SMOOTHING,
    min_samples: int = MIN_SAMPLES,
    m: int = GRID_SIZE,
) -> ScaledDensityEstimate:
    """Smoothing-spline density of values already aligned onto [0, 1].

    A histogram with +0.5 count smoothing gives bin log-densities; their clr
    is fitted by a cubic B-spline with ``n_knots`` equispaced interior knots
    and a squared second-derivative penalty, evaluated on the common grid and
    re-centred so the clr integrates to zero.
    """
    x = np.asarray(scaled, float).ravel()
    if len(x) < min_samples:
        raise SdeError(f"{len(x)} values, at least {min_samples} required")
    if np.any(x < 0) or np.any(x > 1):
        raise SdeError("scaled values must lie in [0, 1]")
    counts, edges = np.histogram(x, bins=n_bins, range=(0.0, 1.0))
    width = 1.0 / n_bins
    dens = (counts + 0.5) / ((len(x) + 0.5 * n_bins) * width)
    centres = 0.5 * (edges[:-1] + edges[1:])
    target = np.log(dens)
    target -= target.mean()

    knots = spline_knots(n_knots)
    B = BSpline.design_matrix(centres, knots, 3).toarray()
    omega = _second_derivative_gram(knots)
    coef = np.linalg.solve(B.T @ B + smoothing * omega, B.T @ target)
    grid = unit_grid(m)
    g = BSpline(knots, coef, 3)(grid)
    return ScaledDensityEstimate(station_id, clr_inverse(g), knots, smoothing, len(x))


# ---------------------------------------------------------------------------
# simplicial FPCA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FpcaBasis:
    mean: np.ndarray  # clr mean curve on the grid
    components: np.ndarray  # (k, m), orthonormal under the trapezoid rule
    eigenvalues: np.ndarray  # full spectrum, covariance normalised by 1/n
    weights: np.ndarray

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def explained(self) -> np.ndarray:
        tot = self.eigenvalues.sum()
        return self.eigenvalues / tot if tot > 0 else np.zeros_like(self.eigenvalues)

    def scores(self, clr_curves) -> np.ndarray:
        c = np.atleast_2d(clr_curves) - self.mean
        return (c * self.weights) @ self.components.T

    def expand(self, scores) -> np.ndarray:
        s = np.atleast_2d(np.asarray(scores, float))
        if self.k == 0:
            return np.repeat(self.mean[None, :], len(s), axis=0)
        return self.mean + s @ self.components


def _clr_matrix(densities) -> np.ndarray:
    rows = [d.clr_values if hasattr(d, "clr_values") else np.asarray(d, float) for d in densities]
    return np.vstack(rows)


def fpca(densities, k: int | None = None, variance_target: float = DEFAULT_VARIANCE_TARGET,
         max_components: int | None = None):
    """Functional PCA of clr curves on the common grid.

    ``k`` pins the number of components; otherwise the smallest count whose
    cumulative explained variance reaches ``variance_target`` is used.
    Returns ``(basis, scores)``.
    """
    G = _clr_matrix(densities)
    n, m = G.shape
    w = trapezoid_weights(m)
    mean = G.mean(axis=0)
    C = G - mean
    sw = np.sqrt(w)
    # W^1/2 C^T C W^1/2 / n through the thin SVD of C W^1/2
    _, s, vt = np.linalg.svd(C * sw, full_matrices=False)
    eig = s**2 / n
    comps = vt / sw
    total = eig.sum()
    ratios = eig / total if total > 0 else np.zeros_like(eig)
    limit = len(eig) if max_components is None else min(max_components, len(eig))
    if k is None:
        if not 0 < variance_target <= 1:
            raise SdeError("variance target must lie in (0, 1]")
        if n < 2:
            raise SdeError("FPCA needs at least 2 densities")
        cum = np.cumsum(ratios)
        hit = np.flatnonzero(cum >= variance_target - 1e-12)
        if hit.size == 0 or hit[0] + 1 > limit:
            raise SdeError(
                f"variance target {variance_target} not reachable; explained ratios "
                + ", ".join(f"{r:.4f}" for r in ratios[:limit])
            )
        k = int(hit[0]) + 1
    else:
        k = int(k)
        if k < 0 or k > len(eig):
            raise SdeError(f"cannot extract {k} components from {n} densities")
        if k and n < k + 1:
            raise SdeError(f"{k} components need at least {k + 1} densities")
    # deterministic sign: largest-magnitude entry positive
    comps = comps[:k]
    flip = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)]) if k else np.ones(0)
    comps = comps * flip[:, None] if k else np.zeros((0, m))
    basis = FpcaBasis(mean, comps, eig, w)
    return basis, basis.scores(G)


# ---------------------------------------------------------------------------
# spatial prediction and reconstruction
# ---------------------------------------------------------------------------

def krige_scores(scores, locations, covariates, grid: frk.BauGrid, polygons, basis: frk.BasisSet,
                 weights=None, **em_kw) -> np.ndarray:
    """One FRK fit per score dimension, aggregated to polygons.

    Returns an (n_polygons, k) array.
    """
    scores = np.asarray(scores, float)
    if scores.ndim == 1:
        scores = scores[:, None]
    k = scores.shape[1]
    weights = weights if weights is not None else frk.polygon_weights(grid, polygons)
    out = np.zeros((weights[0].shape[0], k))
    for h in range(k):
        model = frk.fit_em(locations, covariates, scores[:, h], basis, **em_kw)
        mean, _ = frk.predict(model, grid)
        out[:, h], _ = frk.aggregate_to_polygons(mean, grid, polygons, weights)
    return out


@dataclass(frozen=True)
class SupportField:
    q1: np.ndarray
    q99: np.ndarray
    fallback: np.ndarray  # polygon used its centroid

    def __post_init__(self):
        if np.any(~(self.q1 < self.q99)):
            raise SdeError("support field has Q1 >= Q99 somewhere")

    def __len__(self):
        return len(self.q1)


def polygon_points(polygon, spacing: float) -> np.ndarray:
    minx, miny, maxx, maxy = polygon.bounds
    xs = np.arange(minx + spacing / 2, maxx, spacing)
    ys = np.arange(miny + spacing / 2, maxy, spacing)
    if len(xs) == 0 or len(ys) == 0:
        return np.zeros((0, 2))
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return pts[shapely.contains_xy(polygon, pts[:, 0], pts[:, 1])]


def polygon_average(evaluate, polygons, spacing: float):
    """Average of ``evaluate(points) -> (k, m)`` over a point grid in each polygon.

    Polygons containing no grid point fall back to their representative point.
    Returns ``(means (n_polygons, k), fallback flags)``.
    """
    means, flags = [], []
    for poly in polygons:
        pts = polygon_points(poly, spacing)
        flag = len(pts) == 0
        if flag:
            rp = poly.representative_point()
            pts = np.array([[rp.x, rp.y]])
        means.append(np.asarray(evaluate(pts)).mean(axis=1))
        flags.append(flag)
    return np.vstack(means), np.asarray(flags)


def predict_support(fields, polygons, covariate_fn=None, spacing: float = 500.0,
                    low: float = 0.01, high: float = 0.99) -> SupportField:
    """Municipal (Q1, Q99) as averages of the extreme quantile fields."""
    jl, jh = fields.level_index(low), fields.level_index(high)
    if jl is None or jh is None:
        raise SdeError(f"quantile fields lack levels {low} and {high}")

    def ev(pts):
        cov = covariate_fn(pts) if covariate_fn is not None else None
        v = fields.evaluate(pts, cov, check=False)
        return v[[jl, jh]]

    m, flags = polygon_average(ev, polygons, spacing)
    return SupportField(m[:, 0], m[:, 1], flags)


@dataclass(frozen=True)
class UnscaledDensity:
    """A density on ``[q1, q99]`` obtained by un-aligning a density on [0, 1]."""

    scaled: DensityOnUnit
    q1: float
    q99: float

    @property
    def width(self) -> float:
        return self.q99 - self.q1

    @property
    def grid(self) -> np.ndarray:
        return unscale(self.scaled.grid, self.q1, self.q99)

    @property
    def values(self) -> np.ndarray:
        return self.scaled.density / self.width

    def pdf(self, y) -> np.ndarray:
        y = np.asarray(y, float)
        inside = (y >= self.q1) & (y <= self.q99)
        v = np.interp(y, self.grid, self.values)
        return np.where(inside, v, 0.0)

    def integral(self) -> float:
        return float(trapezoid_weights(len(self.values), self.width) @ self.values)

    def cdf(self, y) -> np.ndarray:
        """Exact integral of the piecewise-linear density up to ``y``."""
        y = np.atleast_1d(np.asarray(y, float))
        g, f = self.grid, self.values
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(g))])
        yc = np.clip(y, g[0], g[-1])
        i = np.clip(np.searchsorted(g, yc, side="right") - 1, 0, len(g) - 2)
        t = yc - g[i]
        slope = (f[i + 1] - f[i]) / (g[i + 1] - g[i])
        out = cum[i] + f[i] * t + 0.5 * slope * t * t
        out = out / cum[-1]
        return np.clip(out, 0.0, 1.0)


def reconstruct(scores, basis: FpcaBasis, q1: float, q99: float) -> UnscaledDensity:
    """Density on ``[q1, q99]`` from municipal FPCA scores."""
    if not q1 < q99:
        raise SdeError(f"invalid support [{q1}, {q99}]")
    g = basis.expand(np.asarray(scores, float).reshape(1, -1) if basis.k else np.zeros((1, 0)))[0]
    return UnscaledDensity(clr_inverse(g), float(q1), float(q99))


def reconstruct_all(scores, basis: FpcaBasis, support: SupportField) -> list[UnscaledDensity]:
    scores = np.asarray(scores, float).reshape(len(support), -1)
    return [reconstruct(scores[i], basis, support.q1[i], support.q99[i]) for i in range(len(support))]
