import json

import numpy as np
import pytest
from scipy import stats
from shapely.geometry import Polygon, box

from airdist.frk import (
    BasisSet,
    BauGrid,
    FrkError,
    FrkModel,
    aggregate_to_polygons,
    condition,
    _eta_posterior,
    covariance_K,
    exp_correlation,
    eval_basis,
    fit_em,
    log_likelihood,
    make_basis,
    polygon_weights,
    predict,
    predict_points,
    prior_model,
)


def square_grid(side=10.0, cell=1.0, covariate_fn=None):
    return BauGrid.from_polygon(box(0, 0, side, side), cell, covariate_fn)


def one_center_basis(scale=2.0):
    return BasisSet(np.array([[0.0, 0.0]]), np.array([0]), np.array([scale]))


def test_bisquare_values():
    b = one_center_basis(2.0)
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0], [1.0, 0.0], [0.6, 0.8]])
    v = eval_basis(b, pts).toarray()[:, 0]
    assert v[0] == 1.0
    assert v[1] == 0.0 and v[2] == 0.0
    assert v[3] == pytest.approx(0.5625, abs=1e-15)
    assert v[4] == pytest.approx(0.5625, abs=1e-15)


def test_bau_grid_tiles_bounding_box():
    poly = Polygon([(0, 0), (10, 0), (0, 10)])
    g = BauGrid.from_polygon(poly, 1.0)
    assert (g.ncols, g.nrows) == (10, 10)
    c = g.centroids
    assert np.all(c[:, 0] + c[:, 1] < 10)
    assert g.n_cells == 45
    assert np.all(g.cell_of(c) == np.arange(g.n_cells))
    assert g.cell_of(np.array([[9.5, 9.5]]))[0] == -1


def test_make_basis_exhaustive_and_deterministic():
    g = square_grid(2.0, 1.0)
    b = make_basis(g, (4,), seed=3)
    got = sorted(map(tuple, b.centers))
    assert got == sorted(map(tuple, g.centroids))
    g = square_grid(20.0, 1.0)
    b1 = make_basis(g, (20, 8, 3), seed=11)
    b2 = make_basis(g, (20, 8, 3), seed=11)
    assert np.array_equal(b1.centers, b2.centers) and np.array_equal(b1.scales, b2.scales)
    assert not np.array_equal(make_basis(g, (20, 8, 3), seed=12).centers, b1.centers)


def test_production_basis_size():
    g = BauGrid.from_polygon(box(0, 0, 100e3, 100e3), 1600.0)
    b = make_basis(g, (334, 134, 34), seed=0)
    assert b.r == 502 and b.n_levels == 3
    assert np.all(b.scales > 0)
    assert len({tuple(c) for c in b.centers}) == 502


def test_make_basis_errors():
    g = square_grid(3.0, 1.0)
    with pytest.raises(FrkError):
        make_basis(g, (1,))
    with pytest.raises(FrkError):
        make_basis(g, (8, 4))


def test_em_recovers_ols_without_spatial_signal():
    rng = np.random.default_rng(0)
    g = square_grid(10.0, 1.0)
    basis = make_basis(g, (12, 4), seed=0)
    loc = rng.uniform(0, 10, (500, 2))
    x = rng.normal(size=500)
    y = 2 + x + rng.normal(scale=0.1, size=500)
    m = fit_em(loc, x, y, basis)
    assert np.max(np.abs(m.beta - [2.0, 1.0])) < 0.05
    assert m.sigma2 == pytest.approx(0.01, rel=0.25)
    assert np.all(m.tau2 < 0.1 * m.sigma2)


def test_em_likelihood_beats_truth_and_is_monotone():
    rng = np.random.default_rng(1)
    g = square_grid(10.0, 0.5)
    basis = make_basis(g, (25, 8), seed=1)
    tau2, phi, sigma2, beta = np.array([1.0, 0.5]), basis.scales * 1.2, 0.05, np.array([1.0])
    K = covariance_K(basis, tau2, phi)
    loc = rng.uniform(0, 10, (300, 2))
    Phi = eval_basis(basis, loc).toarray()
    eta = np.linalg.cholesky(K) @ rng.normal(size=basis.r)
    y = beta[0] + Phi @ eta + rng.normal(scale=np.sqrt(sigma2), size=300)
    m = fit_em(loc, None, y, basis, tol=1e-8, max_iter=500)
    X = np.ones((300, 1))
    ll_true = log_likelihood(y, X, beta, Phi, K, sigma2)
    ll_fit = log_likelihood(y, X, m.beta, Phi, m.K, m.sigma2)
    assert ll_fit >= ll_true - 1e-6
    tr = np.asarray(m.loglik_trace)
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[:-1]))
    # implied data covariance is symmetric positive-definite
    C = Phi @ m.K @ Phi.T + m.sigma2 * np.eye(300)
    assert np.array_equal(C, C.T) or np.max(np.abs(C - C.T)) < 1e-12
    for _ in range(20):
        v = rng.normal(size=300)
        assert v @ C @ v > 0


@pytest.mark.parametrize("n", [20, 200])
def test_likelihood_and_posterior_match_dense_oracle(n):
    # n = 20 takes the data-space branch, n = 200 the precision branch
    rng = np.random.default_rng(8)
    basis = make_basis(square_grid(10.0, 1.0), (25, 8), seed=3)
    K = covariance_K(basis, [0.7, 0.3], basis.scales)
    loc = rng.uniform(0, 10, (n, 2))
    Phi = eval_basis(basis, loc).toarray()
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    beta = np.array([1.0, -0.5])
    y = X @ beta + rng.normal(size=n)
    C = Phi @ K @ Phi.T + 0.2 * np.eye(n)
    ref = stats.multivariate_normal(X @ beta, C).logpdf(y)
    assert log_likelihood(y, X, beta, Phi, K, 0.2) == pytest.approx(ref, rel=1e-10)
    mu, S = _eta_posterior(y, X, beta, Phi, K, 0.2)
    gain = K @ Phi.T @ np.linalg.inv(C)
    assert np.max(np.abs(mu - gain @ (y - X @ beta))) < 1e-9
    assert np.max(np.abs(S - (K - gain @ Phi @ K))) < 1e-9


def test_exp_correlation_flush():
    D = np.array([[0.0, 1.0], [1.0, 0.0]]) * np.array([1.0, 100.0])
    R = exp_correlation(D, 2.0)
    assert R[0, 0] == 1.0 and R[1, 0] == np.exp(-0.5)
    assert R[0, 1] == 0.0


def test_em_constant_responses():
    rng = np.random.default_rng(2)
    g = square_grid(10.0, 1.0)
    basis = make_basis(g, (10,), seed=2)
    loc = rng.uniform(0, 10, (50, 2))
    m = fit_em(loc, None, np.full(50, 3.5), basis)
    assert m.beta[0] == pytest.approx(3.5, abs=1e-10)
    assert m.sigma2 <= 1e-9


def test_em_errors():
    g = square_grid(10.0, 1.0)
    basis = make_basis(g, (10, 4), seed=0)
    loc = np.random.default_rng(0).uniform(0, 10, (5, 2))
    with pytest.raises(FrkError, match="at least"):
        fit_em(loc, None, np.arange(5.0), basis)
    loc = np.random.default_rng(0).uniform(0, 10, (40, 2))
    y = np.arange(40.0)
    y[3] = np.nan
    with pytest.raises(FrkError, match="non-finite"):
        fit_em(loc, None, y, basis)


def test_em_max_iter_flag():
    rng = np.random.default_rng(4)
    g = square_grid(10.0, 1.0)
    basis = make_basis(g, (10,), seed=0)
    loc = rng.uniform(0, 10, (60, 2))
    m = fit_em(loc, None, np.sin(loc[:, 0]) + rng.normal(scale=0.3, size=60), basis, tol=1e-14, max_iter=2)
    assert not m.converged and m.n_iter == 2


def test_no_basis_prediction_is_gls():
    rng = np.random.default_rng(5)
    loc = rng.uniform(0, 10, (80, 2))
    x = rng.normal(size=(80, 2))
    y = 1 + x @ [0.5, -2] + rng.normal(scale=0.3, size=80)
    m = fit_em(loc, x, y, BasisSet.empty())
    X = np.column_stack([np.ones(80), x])
    # white-noise covariance: generalised least squares with V = sigma2 I
    V_inv = np.eye(80) / m.sigma2
    cov_b = np.linalg.inv(X.T @ V_inv @ X)
    b = cov_b @ X.T @ V_inv @ y
    new = rng.normal(size=(30, 2))
    mean, var = predict_points(m, rng.uniform(0, 10, (30, 2)), new)
    Xn = np.column_stack([np.ones(30), new])
    assert np.max(np.abs(mean - Xn @ b)) < 1e-8
    assert np.max(np.abs(var - np.einsum("ij,jk,ik->i", Xn, cov_b, Xn))) < 1e-8


def test_interpolation_limit():
    rng = np.random.default_rng(6)
    g = square_grid(10.0, 1.0)
    basis = make_basis(g, (40, 12), seed=6)
    loc = g.centroids[rng.choice(g.n_cells, 30, replace=False)]
    y = np.cos(loc[:, 0] / 3) + loc[:, 1] / 10
    fitted = fit_em(loc, None, y, basis)
    fitted.sigma2 = 1e-12
    m = condition(fitted, loc, None, y)
    mean, var = predict(m, g)
    cell = g.cell_of(loc)
    assert np.max(np.abs(mean[cell] - y)) < 1e-3
    assert np.all(var >= 0)


def test_prior_model_prediction():
    g = square_grid(10.0, 1.0, covariate_fn=lambda c: c[:, 0] / 10)
    basis = make_basis(g, (10,), seed=0)
    m = prior_model([1.0, 2.0], basis, [0.5], basis.scales, 0.1)
    mean, var = predict(m, g)
    assert np.max(np.abs(mean - (1 + 2 * g.covariates[:, 0]))) < 1e-14
    assert np.all(var >= 0)
    g.covariates = None
    with pytest.raises(FrkError, match="covariates"):
        predict(m, g)


def test_model_json_round_trip():
    rng = np.random.default_rng(7)
    g = square_grid(10.0, 1.0)
    basis = make_basis(g, (10, 4), seed=0)
    loc = rng.uniform(0, 10, (40, 2))
    m = fit_em(loc, None, rng.normal(size=40), basis)
    back = FrkModel.from_json(m.to_json())
    pts = rng.uniform(0, 10, (10, 2))
    a, b = predict_points(m, pts, None), predict_points(back, pts, None)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    doc = json.loads(m.to_json())
    doc["format_version"] = 99
    with pytest.raises(FrkError):
        FrkModel.from_json(json.dumps(doc))


def test_aggregation():
    g = square_grid(4.0, 1.0)
    vals = np.arange(g.n_cells, dtype=float)
    out, flag = aggregate_to_polygons(vals, g, [box(2, 1, 3, 2)])
    assert out[0] == vals[g.cell_of(np.array([[2.5, 1.5]]))[0]]
    two = np.zeros(g.n_cells)
    i, j = g.cell_of(np.array([[0.5, 0.5], [1.5, 0.5]]))
    two[i], two[j] = 1.0, 3.0
    out, _ = aggregate_to_polygons(two, g, [box(0, 0, 2, 1)])
    assert out[0] == pytest.approx(2.0, abs=1e-14)
    rng = np.random.default_rng(8)
    polys = [box(*sorted(rng.uniform(0, 4, 2)), *sorted(rng.uniform(0, 4, 2))) for _ in range(20)]
    polys = [box(p.bounds[0], p.bounds[1], p.bounds[0] + 0.3 + rng.uniform(0, 1), p.bounds[1] + 0.7) for p in polys]
    W, empty = polygon_weights(g, polys)
    assert np.max(np.abs(np.asarray(W.sum(axis=1)).ravel()[~empty] - 1)) < 1e-10
    out, flag = aggregate_to_polygons(vals, g, [box(10, 10, 11, 11)])
    assert flag[0] and np.isnan(out[0])
