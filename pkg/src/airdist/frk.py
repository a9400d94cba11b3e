"""Fixed rank kriging on a grid of basic areal units.

The spatial mixed model is

    y = X beta + Phi eta + xi,   eta ~ N(0, K),   xi ~ N(0, sigma2 I),

with ``Phi`` a multi-resolution set of bisquare basis functions and ``K``
block-diagonal across resolutions, each block ``tau2_l * exp(-d / phi_l)``.
Parameters are estimated by EM; prediction treats ``beta`` with a flat prior
so the joint posterior of ``(beta, eta)`` yields the universal kriging
predictor and its variance.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import shapely
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree
from shapely.geometry import Polygon

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_BASIS_COUNTS = (334, 134, 34)
DEFAULT_CELL_SIZE = 1600.0


class FrkError(RuntimeError):
    pass


@dataclass(eq=False)
class BauGrid:
    """Regular grid of square cells covering a domain's bounding box.

    Only in-domain cells (centroid inside the boundary) are kept in
    ``cells``; ``covariates`` rows follow the same order.
    """

    origin: tuple[float, float]
    cell_size: float
    ncols: int
    nrows: int
    mask: np.ndarray
    covariates: np.ndarray | None = None
    area_weight: np.ndarray | None = None

    @classmethod
    def from_polygon(cls, polygon: Polygon, cell_size: float = DEFAULT_CELL_SIZE, covariate_fn=None):
        minx, miny, maxx, maxy = polygon.bounds
        ncols = max(1, int(np.ceil((maxx - minx) / cell_size - 1e-9)))
        nrows = max(1, int(np.ceil((maxy - miny) / cell_size - 1e-9)))
        grid = cls((minx, miny), float(cell_size), ncols, nrows, np.ones(ncols * nrows, bool))
        c = grid.all_centroids()
        mask = shapely.contains_xy(polygon, c[:, 0], c[:, 1])
        boxes = grid._boxes(np.flatnonzero(mask))
        frac = shapely.area(shapely.intersection(boxes, polygon)) / cell_size**2
        grid = cls(grid.origin, grid.cell_size, ncols, nrows, mask, area_weight=frac)
        if covariate_fn is not None:
            grid.covariates = np.atleast_2d(np.asarray(covariate_fn(grid.centroids), float))
            if grid.covariates.shape[0] != grid.n_cells:
                grid.covariates = grid.covariates.T
        return grid

    @property
    def cells(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def n_cells(self) -> int:
        return int(self.mask.sum())

    def all_centroids(self) -> np.ndarray:
        j, i = np.divmod(np.arange(self.ncols * self.nrows), self.ncols)
        return np.column_stack(
            [self.origin[0] + (i + 0.5) * self.cell_size, self.origin[1] + (j + 0.5) * self.cell_size]
        )

    @property
    def centroids(self) -> np.ndarray:
        return self.all_centroids()[self.mask]

    def _boxes(self, flat_index):
        j, i = np.divmod(np.asarray(flat_index), self.ncols)
        x0 = self.origin[0] + i * self.cell_size
        y0 = self.origin[1] + j * self.cell_size
        return shapely.box(x0, y0, x0 + self.cell_size, y0 + self.cell_size)

    def cell_of(self, points) -> np.ndarray:
        """Index into ``cells`` of the in-domain cell containing each point (-1 if none)."""
        points = np.atleast_2d(points)
        i = np.floor((points[:, 0] - self.origin[0]) / self.cell_size).astype(int)
        j = np.floor((points[:, 1] - self.origin[1]) / self.cell_size).astype(int)
        ok = (i >= 0) & (i < self.ncols) & (j >= 0) & (j < self.nrows)
        flat = np.where(ok, j * self.ncols + i, 0)
        pos = np.full(self.ncols * self.nrows, -1)
        pos[self.cells] = np.arange(self.n_cells)
        return np.where(ok, pos[flat], -1)


@dataclass(eq=False)
class BasisSet:
    centers: np.ndarray
    levels: np.ndarray
    scales: np.ndarray  # one per level

    @property
    def r(self) -> int:
        return len(self.centers)

    @property
    def n_levels(self) -> int:
        return len(self.scales)

    def center_scales(self) -> np.ndarray:
        return self.scales[self.levels]

    def to_dict(self):
        return {"centers": self.centers.tolist(), "levels": self.levels.tolist(), "scales": self.scales.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["centers"], float).reshape(-1, 2),
            np.asarray(d["levels"], int),
            np.asarray(d["scales"], float),
        )

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0))


def make_basis(grid: BauGrid, counts_per_level=DEFAULT_BASIS_COUNTS, seed: int = 0, scale_factor: float = 1.5) -> BasisSet:
    """Sample basis centres from BAU centroids, level by level.

    Scale of level ``l`` is ``scale_factor`` times the median nearest-neighbour
    distance among that level's centres.
    """
    counts = [int(c) for c in counts_per_level]
    if any(c < 2 for c in counts):
        raise FrkError("every resolution level needs at least 2 centres")
    cent = grid.centroids
    if sum(counts) > len(cent):
        raise FrkError(f"{sum(counts)} centres requested but only {len(cent)} in-domain cells")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(cent), size=sum(counts), replace=False)
    centers = cent[pick]
    levels = np.repeat(np.arange(len(counts)), counts)
    scales = np.empty(len(counts))
    for l in range(len(counts)):
        c = centers[levels == l]
        d, _ = cKDTree(c).query(c, k=2)
        scales[l] = scale_factor * np.median(d[:, 1])
    return BasisSet(centers, levels, scales)


def eval_basis(basis: BasisSet, points) -> sp.csr_matrix:
    """Bisquare basis matrix, shape (len(points), r), sparse."""
    points = np.atleast_2d(np.asarray(points, float))
    rows, cols, vals = [], [], []
    tree = cKDTree(points)
    for l, s in enumerate(basis.scales):
        idx = np.flatnonzero(basis.levels == l)
        ctree = cKDTree(basis.centers[idx])
        pairs = ctree.sparse_distance_matrix(tree, s, output_type="ndarray")
        u = pairs["v"] / s
        keep = u < 1.0
        rows.append(pairs["j"][keep])
        cols.append(idx[pairs["i"][keep]])
        vals.append((1.0 - u[keep] ** 2) ** 2)
    if not rows:
        return sp.csr_matrix((len(points), basis.r))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(points), basis.r)
    )


def _level_distances(basis: BasisSet, l: int) -> np.ndarray:
    c = basis.centers[basis.levels == l]
    return np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))


def exp_correlation(D, phi) -> np.ndarray:
    """``exp(-D / phi)`` with entries below ``exp(-40)`` set to zero.

    Those entries are below machine epsilon relative to the unit diagonal.
    Keeping them lets products of small entries underflow to subnormal
    numbers inside the Cholesky factor, which slows LAPACK down tenfold.
    """
    a = np.asarray(D, float) / phi
    return np.where(a < 40.0, np.exp(-np.minimum(a, 40.0)), 0.0)


def covariance_K(basis: BasisSet, tau2, phi) -> np.ndarray:
    K = np.zeros((basis.r, basis.r))
    for l in range(basis.n_levels):
        idx = np.flatnonzero(basis.levels == l)
        K[np.ix_(idx, idx)] = tau2[l] * exp_correlation(_level_distances(basis, l), phi[l])
    return K


@dataclass(eq=False)
class FrkModel:
    beta: np.ndarray
    tau2: np.ndarray
    phi: np.ndarray
    sigma2: float
    basis: BasisSet
    eta_mean: np.ndarray
    eta_cov: np.ndarray
    # joint posterior of (beta, eta) under a flat prior on beta
    theta_mean: np.ndarray | None = None
    theta_cov: np.ndarray | None = None
    loglik_trace: list = field(default_factory=list)
    converged: bool = True
    n_iter: int = 0
    intercept: bool = True

    @property
    def K(self) -> np.ndarray:
        return covariance_K(self.basis, self.tau2, self.phi)

    @property
    def q(self) -> int:
        return len(self.beta)

    def design(self, covariates, n: int) -> np.ndarray:
        return _design(covariates, n, self.intercept)

    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "beta": self.beta.tolist(),
            "tau2": self.tau2.tolist(),
            "phi": self.phi.tolist(),
            "sigma2_xi": self.sigma2,
            "basis": self.basis.to_dict(),
            "eta_mean": self.eta_mean.tolist(),
            "eta_cov": self.eta_cov.tolist(),
            "theta_mean": None if self.theta_mean is None else self.theta_mean.tolist(),
            "theta_cov": None if self.theta_cov is None else self.theta_cov.tolist(),
            "loglik_trace": self.loglik_trace,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "intercept": self.intercept,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "FrkModel":
        d = json.loads(text)
        if d.get("format_version") != FORMAT_VERSION:
            raise FrkError(f"unsupported model format version {d.get('format_version')!r}")
        arr = lambda k: None if d[k] is None else np.asarray(d[k], float)  # noqa: E731
        basis = BasisSet.from_dict(d["basis"])
        return cls(
            beta=arr("beta"),
            tau2=arr("tau2"),
            phi=arr("phi"),
            sigma2=float(d["sigma2_xi"]),
            basis=basis,
            eta_mean=arr("eta_mean"),
            eta_cov=arr("eta_cov").reshape(basis.r, basis.r),
            theta_mean=arr("theta_mean"),
            theta_cov=None if d["theta_cov"] is None else arr("theta_cov").reshape(len(d["theta_mean"]), -1),
            loglik_trace=d["loglik_trace"],
            converged=d["converged"],
            n_iter=d["n_iter"],
            intercept=d["intercept"],
        )


def _design(covariates, n, intercept=True) -> np.ndarray:
    if covariates is None:
        X = np.zeros((n, 0))
    else:
        X = np.asarray(covariates, float).reshape(n, -1)
    if intercept:
        X = np.column_stack([np.ones(n), X])
    return X


def log_likelihood(y, X, beta, Phi, K, sigma2) -> float:
    """Gaussian log-likelihood of ``y`` under covariance ``Phi K Phi^T + sigma2 I``."""
    n = len(y)
    e = y - X @ beta
    if Phi.shape[1] == 0:
        return -0.5 * (n * np.log(2 * np.pi * sigma2) + e @ e / sigma2)
    if n <= Phi.shape[1]:
        # few observations: work with the n x n data covariance directly
        Cc = sla.cho_factor(Phi @ K @ Phi.T + sigma2 * np.eye(n), lower=True)
        quad = e @ sla.cho_solve(Cc, e)
        logdet = 2 * np.log(np.diag(Cc[0])).sum()
        return -0.5 * (n * np.log(2 * np.pi) + logdet + quad)
    Kc = sla.cho_factor(K, lower=True)
    PtP = Phi.T @ Phi
    A = sla.cho_solve(Kc, np.eye(len(K))) + PtP / sigma2
    Ac = sla.cho_factor(A, lower=True)
    Pe = Phi.T @ e
    quad = e @ e / sigma2 - Pe @ sla.cho_solve(Ac, Pe) / sigma2**2
    logdet = (
        2 * np.log(np.diag(Ac[0])).sum() + 2 * np.log(np.diag(Kc[0])).sum() + n * np.log(sigma2)
    )
    return -0.5 * (n * np.log(2 * np.pi) + logdet + quad)


def _eta_posterior(y, X, beta, Phi, K, sigma2):
    e = y - X @ beta
    n, r = Phi.shape
    if n <= r:
        KPt = K @ Phi.T
        Cc = sla.cho_factor(Phi @ KPt + sigma2 * np.eye(n), lower=True)
        S = K - KPt @ sla.cho_solve(Cc, KPt.T)
        mu = KPt @ sla.cho_solve(Cc, e)
    else:
        Kc = sla.cho_factor(K, lower=True)
        A = sla.cho_solve(Kc, np.eye(r)) + Phi.T @ Phi / sigma2
        S = sla.cho_solve(sla.cho_factor(A, lower=True), np.eye(r))
        mu = S @ (Phi.T @ e) / sigma2
    S = 0.5 * (S + S.T)
    return mu, S


def joint_posterior(y, X, Phi, K, sigma2):
    """Posterior of (beta, eta) with a flat prior on beta."""
    q, r = X.shape[1], Phi.shape[1]
    Z = np.hstack([X, Phi])
    prec = Z.T @ Z / sigma2
    if r:
        prec[q:, q:] += sla.cho_solve(sla.cho_factor(K, lower=True), np.eye(r))
    try:
        c = sla.cho_factor(prec, lower=True)
    except np.linalg.LinAlgError:
        raise FrkError("posterior precision is singular (collinear covariates?)") from None
    cov = sla.cho_solve(c, np.eye(q + r))
    cov = 0.5 * (cov + cov.T)
    return cov @ (Z.T @ y) / sigma2, cov


def _profile_level(G, D, phi):
    """Negative profiled Q for one level at range ``phi``; returns (value, tau2).

    ``G`` is a factor with ``G G^T = Omega``, so ``tr(R^-1 Omega)`` is the
    squared Frobenius norm of ``L^-1 G`` for the Cholesky factor ``L`` of R.
    """
    R = exp_correlation(D, phi)
    try:
        Lr = sla.cholesky(R, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return np.inf, np.nan
    m = len(R)
    W = sla.solve_triangular(Lr, G, lower=True, check_finite=False)
    tau2 = float(np.sum(W * W)) / m
    if not tau2 > 0:
        return np.inf, np.nan
    return m * np.log(tau2) + 2 * np.log(np.diag(Lr)).sum(), tau2


def _psd_factor(A):
    """``G`` with ``G G^T = A`` for a symmetric positive semi-definite ``A``."""
    try:
        return sla.cholesky(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(A)
        return V * np.sqrt(np.clip(w, 0.0, None))


def fit_em(
    locations,
    covariates,
    responses,
    basis: BasisSet,
    tol: float = 1e-6,
    max_iter: int = 200,
    intercept: bool = True,
    check_monotone: bool = True,
) -> FrkModel:
    """Estimate the FRK mixed model by EM.

    E-step: Gaussian posterior of ``eta``.  M-step: closed-form ``beta`` and
    ``sigma2``; per resolution level a 1-D search over the exponential range
    with the marginal variance profiled out.
    """
    y = np.asarray(responses, float).ravel()
    n = len(y)
    X = _design(covariates, n, intercept)
    q = X.shape[1]
    L = basis.n_levels
    if not np.all(np.isfinite(y)):
        raise FrkError("non-finite responses make the log-likelihood non-finite")
    if n < q + 2 * L + 1:
        raise FrkError(f"need at least {q + 2 * L + 1} observations, got {n}")
    Phi = eval_basis(basis, locations).toarray() if basis.r else np.zeros((n, 0))

    beta = np.linalg.lstsq(X, y, rcond=None)[0] if q else np.zeros(0)
    resid = y - X @ beta
    vy = float(np.var(y))
    floor = 1e-10 * (vy if vy > 0 else 1.0)
    v = max(float(np.var(resid)), floor * 10)
    sigma2 = max(0.5 * v, floor)
    tau2 = np.full(L, 0.5 * v / max(L, 1))
    phi = basis.scales.copy()
    D = [_level_distances(basis, l) for l in range(L)]
    idx = [np.flatnonzero(basis.levels == l) for l in range(L)]
    nn = [np.sort(d + np.diag(np.full(len(d), np.inf)), axis=1)[:, 0].min() for d in D]
    diam = [d.max() for d in D]

    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        K = covariance_K(basis, tau2, phi)
        ll = log_likelihood(y, X, beta, Phi, K, sigma2) if basis.r else log_likelihood(y, X, beta, Phi, None, sigma2)
        if not np.isfinite(ll):
            raise FrkError("non-finite log-likelihood during EM")
        if trace:
            if check_monotone and ll < trace[-1] - 1e-8 * max(abs(trace[-1]), 1.0):
                log.warning("EM log-likelihood decreased: %.12g -> %.12g", trace[-1], ll)
            if abs(ll - trace[-1]) < tol * max(abs(trace[-1]), 1.0):
                trace.append(ll)
                converged = True
                break
        trace.append(ll)

        # E-step
        if basis.r:
            mu, S = _eta_posterior(y, X, beta, Phi, K, sigma2)
        else:
            mu, S = np.zeros(0), np.zeros((0, 0))
        # M-step
        target = y - Phi @ mu
        if q:
            beta = np.linalg.lstsq(X, target, rcond=None)[0]
        e = target - X @ beta
        sigma2 = max((e @ e + np.sum((Phi @ S) * Phi)) / n, floor)
        Omega = S + np.outer(mu, mu)
        for l in range(L):
            G = _psd_factor(Omega[np.ix_(idx[l], idx[l])])
            cur, cur_tau = _profile_level(G, D[l], phi[l])
            res = minimize_scalar(
                lambda t: _profile_level(G, D[l], np.exp(t))[0],
                bounds=(np.log(0.05 * nn[l]), np.log(2.0 * diam[l])),
                method="bounded",
                options={"xatol": 1e-2},
            )
            if res.fun < cur:
                phi[l] = float(np.exp(res.x))
                tau2[l] = _profile_level(G, D[l], phi[l])[1]
            elif np.isfinite(cur_tau):
                tau2[l] = cur_tau
            tau2[l] = max(tau2[l], floor)

    if not converged:
        log.warning("EM stopped at max_iter=%d without convergence", max_iter)

    K = covariance_K(basis, tau2, phi) if basis.r else np.zeros((0, 0))
    theta, cov = joint_posterior(y, X, Phi, K, sigma2)
    if basis.r:
        mu, S = _eta_posterior(y, X, beta, Phi, K, sigma2)
    else:
        mu, S = np.zeros(0), np.zeros((0, 0))
    return FrkModel(
        beta=beta,
        tau2=tau2,
        phi=phi,
        sigma2=float(sigma2),
        basis=basis,
        eta_mean=mu,
        eta_cov=S,
        theta_mean=theta,
        theta_cov=cov,
        loglik_trace=trace,
        converged=converged,
        n_iter=it,
        intercept=intercept,
    )


def condition(model: FrkModel, locations, covariates, responses) -> FrkModel:
    """Recompute the posterior of a model with fixed parameters on new data."""
    y = np.asarray(responses, float).ravel()
    X = model.design(covariates, len(y))
    Phi = eval_basis(model.basis, locations).toarray()
    K = model.K
    theta, cov = joint_posterior(y, X, Phi, K, model.sigma2)
    mu, S = _eta_posterior(y, X, model.beta, Phi, K, model.sigma2) if model.basis.r else (np.zeros(0), np.zeros((0, 0)))
    return FrkModel(model.beta, model.tau2, model.phi, model.sigma2, model.basis, mu, S, theta, cov,
                    model.loglik_trace, model.converged, model.n_iter, model.intercept)


def prior_model(beta, basis: BasisSet, tau2, phi, sigma2, intercept=True) -> FrkModel:
    """A model with no data: posterior of eta equals its prior."""
    beta = np.asarray(beta, float)
    K = covariance_K(basis, np.asarray(tau2, float), np.asarray(phi, float))
    return FrkModel(beta, np.asarray(tau2, float), np.asarray(phi, float), float(sigma2), basis,
                    np.zeros(basis.r), K, None, None, [], True, 0, intercept)


def predict_points(model: FrkModel, points, covariates):
    """Universal kriging mean and variance of ``x^T beta + Phi(s)^T eta``."""
    points = np.atleast_2d(np.asarray(points, float))
    n = len(points)
    if covariates is None and model.q > int(model.intercept):
        raise FrkError("prediction covariates are missing")
    X = model.design(covariates, n)
    Phi = eval_basis(model.basis, points) if model.basis.r else sp.csr_matrix((n, 0))
    Z = sp.hstack([sp.csr_matrix(X), Phi]).tocsr()
    if model.theta_mean is None:
        mean = X @ model.beta + Phi @ model.eta_mean
        var = np.asarray(Phi.multiply(Phi @ model.eta_cov).sum(axis=1)).ravel() if model.basis.r else np.zeros(n)
    else:
        mean = Z @ model.theta_mean
        var = np.asarray((Z @ model.theta_cov) * Z.toarray()).sum(axis=1) if n * Z.shape[1] < 5e7 else _chunked_var(Z, model.theta_cov)
    return np.asarray(mean).ravel(), np.maximum(np.asarray(var).ravel(), 0.0)


def _chunked_var(Z, C, chunk=5000):
    out = np.empty(Z.shape[0])
    for s in range(0, Z.shape[0], chunk):
        z = Z[s : s + chunk].toarray()
        out[s : s + chunk] = np.einsum("ij,jk,ik->i", z, C, z)
    return out


def predict(model: FrkModel, grid: BauGrid):
    """Per-BAU predictive mean and variance."""
    if grid.covariates is None and model.q > int(model.intercept):
        raise FrkError("BAU covariates are missing")
    return predict_points(model, grid.centroids, grid.covariates)


def polygon_weights(grid: BauGrid, polygons):
    """Row-normalised overlap-area weights (n_polygons, n_cells) and a zero-overlap flag."""
    cells = grid.cells
    boxes = grid._boxes(cells)
    tree = shapely.STRtree(boxes)
    rows, cols, vals = [], [], []
    empty = np.zeros(len(polygons), bool)
    for p, poly in enumerate(polygons):
        cand = tree.query(poly)
        if len(cand) == 0:
            empty[p] = True
            continue
        area = shapely.area(shapely.intersection(boxes[cand], poly))
        keep = area > 0
        if not keep.any():
            empty[p] = True
            continue
        w = area[keep] / area[keep].sum()
        rows.append(np.full(keep.sum(), p))
        cols.append(cand[keep])
        vals.append(w)
    if rows:
        W = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(len(polygons), len(cells)))
    else:
        W = sp.csr_matrix((len(polygons), len(cells)))
    return W, empty


def aggregate_to_polygons(values, grid: BauGrid, polygons, weights=None):
    """Area-weighted mean of per-BAU values over each polygon.

    Returns ``(aggregated, undefined)``; polygons with no overlap get NaN and
    a True flag.  ``values`` may be (n_cells,) or (n_cells, k).
    """
    if weights is None:
        W, empty = polygon_weights(grid, polygons)
    else:
        W, empty = weights
    out = np.asarray(W @ np.asarray(values, float))
    out = out.astype(float)
    out[empty] = np.nan
    return out, empty
