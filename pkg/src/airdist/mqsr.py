"""Multiple non-crossing quantile fields with a finite-element roughness penalty.

For levels ``alpha_1 < ... < alpha_r`` the model is

    Q_i(alpha_j) = x_i^T beta_j + f_j(s_i),

with every ``f_j`` a P1 finite-element field.  The fit minimises

    J = (1/n) sum_j sum_i sum_k rho_{alpha_j}(y_ik - Q_i(alpha_j))
        + sum_j lambda_j f_j^T P f_j
        + gamma sum_{j<r} sum_sites max(0, eps - gap_j(site))

by majorization-minimization: each absolute value ``|u|`` is replaced by
``u^2 / (2c) + c/2`` with ``c = |u_k| + delta`` at the current iterate, which
yields one sparse symmetric linear system over all levels jointly.  Crossing
sites are the stations plus every mesh vertex (evaluated at the mean
covariate, zero after standardisation), so the non-crossing check holds on
the whole mesh and not only at the data.

Because ``delta > 0`` the surrogate does not touch ``J`` exactly, so every
step is safeguarded by a backtracking search on the exact (convex) objective,
which makes the sequence of objective values non-increasing.

The hinge majorizer has curvature ``gamma / (2 |v_k|)`` even at inactive
sites, which slows the joint iteration badly when levels are close.  The
levels are therefore first fitted one at a time without the crossing term;
when those fits leave every gap at least ``eps`` the hinge term vanishes and,
all terms being non-negative, they already minimise ``J``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import FemOperators, TriangularMesh, assemble

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_EPS = 0.01
DEFAULT_LEVELS = tuple(np.round(np.arange(1, 100) / 100, 2))


class MqsrError(RuntimeError):
    pass


def pinball(alpha, u):
    """Check loss ``u * (alpha - 1{u < 0})``."""
    u = np.asarray(u, dtype=float)
    return u * (alpha - (u < 0))


def crossing_penalty(gaps, gamma: float, eps: float) -> float:
    """Hinge penalty ``gamma * sum max(0, eps - gap)``.

    ``gaps`` holds consecutive-level differences, shape (r-1, sites); an empty
    array (a single level) gives zero.
    """
    gaps = np.asarray(gaps, dtype=float)
    if gaps.size == 0:
        return 0.0
    return float(gamma * np.maximum(0.0, eps - gaps).sum())


def check_levels(alphas) -> np.ndarray:
    a = np.asarray(alphas, dtype=float).ravel()
    if a.size == 0 or np.any(a <= 0) or np.any(a >= 1) or np.any(np.diff(a) <= 0):
        raise ValueError("quantile levels must be strictly increasing inside (0, 1)")
    return a


def parse_levels(spec: str) -> np.ndarray:
    """``"0.01:0.99:0.01"`` (start:stop:step, inclusive) or a comma list."""
    if ":" in spec:
        start, stop, step = (float(v) for v in spec.split(":"))
        n = int(round((stop - start) / step)) + 1
        return check_levels(np.round(start + step * np.arange(n), 10))
    return check_levels([float(v) for v in spec.split(",")])


@dataclass
class StationData:
    """Observations grouped by station, the form consumed by :func:`fit`."""

    locations: np.ndarray
    covariates: np.ndarray  # (n, q), no intercept column
    values: list

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, float))
        n = len(self.locations)
        if self.covariates is None:
            self.covariates = np.zeros((n, 0))
        self.covariates = np.asarray(self.covariates, float).reshape(n, -1)
        self.values = [np.asarray(v, float).ravel() for v in self.values]
        if len(self.values) != n:
            raise ValueError("one value vector per station is required")

    @property
    def n(self) -> int:
        return len(self.locations)

    @property
    def q(self) -> int:
        return self.covariates.shape[1]

    def flat(self):
        counts = np.array([len(v) for v in self.values])
        return np.concatenate(self.values), np.repeat(np.arange(self.n), counts), counts

    def subset(self, idx) -> "StationData":
        idx = np.asarray(idx)
        return StationData(self.locations[idx], self.covariates[idx], [self.values[i] for i in idx])

    @classmethod
    def from_series(cls, series) -> "StationData":
        return cls(
            np.array([s.location for s in series]),
            np.array([s.covariates for s in series]) if series and series[0].covariates is not None else None,
            [s.values for s in series],
        )


@dataclass(eq=False)
class QuantileFieldSet:
    alphas: np.ndarray
    betas: np.ndarray  # (r, q)
    coefs: np.ndarray  # (r, N)
    lambdas: np.ndarray
    gamma: float
    eps: float
    mesh: TriangularMesh
    objective_trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = True
    level_traces: list = field(default_factory=list)

    @property
    def r(self) -> int:
        return len(self.alphas)

    def level_index(self, alpha: float) -> int | None:
        hit = np.flatnonzero(np.isclose(self.alphas, alpha, rtol=0, atol=1e-9))
        return int(hit[0]) if hit.size else None

    def evaluate(self, points, covariates=None, check: bool = True) -> np.ndarray:
        """Quantile values, shape (r, len(points))."""
        points = np.atleast_2d(np.asarray(points, float))
        psi = self.mesh.evaluation_matrix(points)
        out = (psi @ self.coefs.T).T
        if self.betas.shape[1]:
            if covariates is None:
                raise MqsrError("covariates are required for a model with covariate effects")
            X = np.asarray(covariates, float).reshape(len(points), -1)
            out = out + self.betas @ X.T
        if check and self.r > 1 and np.any(np.diff(out, axis=0) < -1e-9):
            raise MqsrError("evaluated quantiles cross")
        return out

    def vertex_values(self) -> np.ndarray:
        return self.coefs.copy()

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "alphas": self.alphas.tolist(),
                "betas": self.betas.tolist(),
                "coefs": self.coefs.tolist(),
                "lambdas": self.lambdas.tolist(),
                "gamma": self.gamma,
                "eps": self.eps,
                "mesh_checksum": self.mesh.checksum(),
                "n_iter": self.n_iter,
                "converged": self.converged,
            }
        )

    @classmethod
    def from_json(cls, text: str, mesh: TriangularMesh) -> "QuantileFieldSet":
        d = json.loads(text)
        if d.get("format_version") != FORMAT_VERSION:
            raise MqsrError(f"unsupported field format version {d.get('format_version')!r}")
        if d["mesh_checksum"] != mesh.checksum():
            raise MqsrError("mesh does not match the one the fields were fitted on")
        r = len(d["alphas"])
        return cls(
            np.asarray(d["alphas"]),
            np.asarray(d["betas"], float).reshape(r, -1),
            np.asarray(d["coefs"], float).reshape(r, -1),
            np.asarray(d["lambdas"], float),
            float(d["gamma"]),
            float(d["eps"]),
            mesh,
            n_iter=d["n_iter"],
            converged=d["converged"],
        )


class _Problem:
    """Fixed pieces of the objective shared by all MM iterations."""

    def __init__(self, data: StationData, alphas, ops: FemOperators, lambdas, gamma, eps, delta):
        self.data = data
        self.alphas = alphas
        self.ops = ops
        self.lambdas = lambdas
        self.gamma = gamma
        self.eps = eps
        self.r = len(alphas)
        self.q = data.q
        self.N = ops.mesh.n_vertices
        self.p = self.q + self.N
        self.n = data.n
        self.y, self.sid, self.counts = data.flat()
        psi = ops.mesh.evaluation_matrix(data.locations)
        self.D = sp.hstack([sp.csr_matrix(data.covariates), psi]).tocsr()
        # crossing sites: stations, then mesh vertices at the mean covariate
        self.C = sp.vstack([self.D, sp.hstack([sp.csr_matrix((self.N, self.q)), sp.identity(self.N)])]).tocsr()
        pen = sp.block_diag([sp.csr_matrix((self.q, self.q)), ops.penalty]).tocsr()
        self.pen = pen
        self.delta = delta
        self.delta_h = delta

    def split(self, theta):
        t = theta.reshape(self.r, self.p)
        return t[:, : self.q], t[:, self.q :]

    def station_q(self, theta):
        return (self.D @ theta.reshape(self.r, self.p).T)  # (n, r)

    def gaps(self, theta):
        if self.r == 1:
            return np.zeros((0, self.C.shape[0]))
        v = self.C @ theta.reshape(self.r, self.p).T  # (sites, r)
        return np.diff(v, axis=1).T

    def objective(self, theta) -> float:
        qs = self.station_q(theta)
        loss = 0.0
        for j, a in enumerate(self.alphas):
            loss += pinball(a, self.y - qs[self.sid, j]).sum()
        loss /= self.n
        t = theta.reshape(self.r, self.p)
        rough = sum(lam * (t[j] @ (self.pen @ t[j])) for j, lam in enumerate(self.lambdas))
        return float(loss + rough + crossing_penalty(self.gaps(theta), self.gamma, self.eps))

    def _pattern(self):
        """Fixed sparsity pattern of the surrogate Hessian.

        Every entry is a weighted sum over row pairs of ``D`` (data term),
        rows of ``C`` (hinge term) and the penalty, so the values can be
        refreshed with one ``bincount`` per iteration.
        """
        r, p = self.r, self.p
        dk, dl, drow, dprod = _row_pairs(self.D)
        ck, cl, crow, cprod = _row_pairs(self.C)
        pen = self.pen.tocoo()
        rows, cols = [], []
        for j in range(r):
            rows += [j * p + dk, j * p + pen.row]
            cols += [j * p + dl, j * p + pen.col]
        for j in range(r - 1):
            a, b = j * p, (j + 1) * p
            rows += [a + ck, b + ck, a + ck, b + ck]
            cols += [a + cl, b + cl, b + cl, a + cl]
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        size = r * p
        lin = cols.astype(np.int64) * size + rows
        uniq, inv = np.unique(lin, return_inverse=True)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(uniq // size, minlength=size))])
        self._pat = dict(inv=inv, indices=(uniq % size).astype(np.int32), indptr=indptr, nnz=len(uniq),
                         drow=drow, dprod=dprod, crow=crow, cprod=cprod, pen=pen.data, size=size)
        return self._pat

    def surrogate_system(self, theta):
        """Hessian and right-hand side of the quadratic majorizer at ``theta``."""
        pat = getattr(self, "_pat", None) or self._pattern()
        r, n = self.r, self.n
        qs = self.station_q(theta)
        rhs = np.zeros((r, self.p))
        vals = []
        for j, a in enumerate(self.alphas):
            u = self.y - qs[self.sid, j]
            w = 1.0 / (4.0 * (np.abs(u) + self.delta))
            aw = np.bincount(self.sid, weights=w, minlength=n) / n
            bw = (2.0 * np.bincount(self.sid, weights=w * self.y, minlength=n) + (a - 0.5) * self.counts) / n
            vals += [pat["dprod"] * (2.0 * aw[pat["drow"]]), 2.0 * self.lambdas[j] * pat["pen"]]
            rhs[j] = self.D.T @ bw
        if r > 1:
            v = self.eps - self.gaps(theta)  # (r-1, sites)
            c = np.abs(v) + self.delta_h
            hw = self.gamma / (2.0 * c)
            lin = self.gamma * (self.eps / (2.0 * c) + 0.5)
            for j in range(r - 1):
                hv = pat["cprod"] * hw[j][pat["crow"]]
                vals += [hv, hv, -hv, -hv]
                g = self.C.T @ lin[j]
                rhs[j + 1] += g
                rhs[j] -= g
        data = np.bincount(pat["inv"], weights=np.concatenate(vals), minlength=pat["nnz"])
        H = sp.csc_matrix((data, pat["indices"], pat["indptr"]), shape=(pat["size"], pat["size"]))
        return H, rhs.ravel()


def _row_pairs(A):
    """All (k, l) column pairs sharing a row of ``A``, with the row and product."""
    A = A.tocsr()
    ks, ls, rows, prods = [], [], [], []
    nnz_row = np.diff(A.indptr)
    for m in np.unique(nnz_row):
        if m == 0:
            continue
        sel = np.flatnonzero(nnz_row == m)
        start = A.indptr[sel][:, None] + np.arange(m)[None, :]
        idx, val = A.indices[start], A.data[start]
        kk = np.repeat(np.arange(m), m)
        ll = np.tile(np.arange(m), m)
        ks.append(idx[:, kk].ravel())
        ls.append(idx[:, ll].ravel())
        prods.append((val[:, kk] * val[:, ll]).ravel())
        rows.append(np.repeat(sel, m * m))
    return (np.concatenate(ks), np.concatenate(ls), np.concatenate(rows), np.concatenate(prods))


def default_gamma(data: StationData, alphas) -> float:
    """Crossing weight large enough to act as an exact penalty.

    The pinball term changes by at most ``n_i / n`` per unit shift of one
    station's quantile, which bounds the multiplier of a non-crossing
    constraint; ten times that bound is used.
    """
    counts = np.array([len(v) for v in data.values])
    return float(10.0 * counts.max() / data.n)


def _initial(problem: _Problem, alphas) -> np.ndarray:
    """Penalised least-squares mean field shifted by pooled residual quantiles."""
    data = problem.data
    means = np.array([v.mean() for v in data.values])
    wts = problem.counts / problem.counts.sum()
    D = problem.D
    theta = np.zeros((problem.r, problem.p))
    for j in range(problem.r):
        lhs = (D.T @ sp.diags(wts) @ D + problem.lambdas[j] * problem.pen + 1e-12 * sp.identity(problem.p)).tocsc()
        t = spla.spsolve(lhs, D.T @ (wts * means))
        fitted = D @ t
        resid = problem.y - fitted[problem.sid]
        t[problem.q :] += np.quantile(resid, alphas[j])
        theta[j] = t
    return theta.ravel()


def _minimize(problem: _Problem, theta, obj, tol, max_iter, check_descent, trace):
    """MM iterations accelerated by SQUAREM; appends every accepted value to ``trace``."""

    def mm_step(th, j_th):
        H, g = problem.surrogate_system(th)
        try:
            # H is SPD, so diagonal pivots keep the fill-reducing ordering intact
            lu = spla.splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                           options={"SymmetricMode": True})
            cand = lu.solve(g)
        except RuntimeError as exc:
            raise MqsrError(f"MM system solve failed (lambdas={problem.lambdas.tolist()}): {exc}") from None
        if not np.all(np.isfinite(cand)):
            raise MqsrError(f"MM system is singular (lambdas={problem.lambdas.tolist()})")
        step = cand - th
        t, j_new = 1.0, problem.objective(cand)
        while j_new > j_th and t > 1e-6:
            t *= 0.5
            j_new = problem.objective(th + t * step)
        if j_new > j_th:
            return th, j_th
        return th + t * step, j_new

    def record(j_new):
        if check_descent and j_new > trace[-1] + 1e-10:
            raise MqsrError("MM objective increased")
        trace.append(j_new)

    it = 0
    while it < max_iter:
        # one SQUAREM cycle: two MM steps, an extrapolation, one more MM step
        th1, j1 = mm_step(theta, obj)
        record(j1)
        th2, j2 = mm_step(th1, j1)
        record(j2)
        it += 2
        r = th1 - theta
        v = th2 - th1 - r
        nxt, j_nxt = th2, j2
        if np.linalg.norm(v) > 0 and it < max_iter:
            a = min(-np.linalg.norm(r) / np.linalg.norm(v), -1.0)
            th_x = theta - 2 * a * r + a * a * v
            j_x = problem.objective(th_x)
            if j_x < j2:
                nxt, j_nxt = mm_step(th_x, j_x)
                record(j_nxt)
                it += 1
        decrease = (obj - j_nxt) / max(abs(j_nxt), 1e-300)
        theta, obj = nxt, j_nxt
        if decrease < tol:
            return theta, obj, it, True
    return theta, obj, it, False


def _fit_levels(problem: _Problem, theta, tol, max_iter, check_descent):
    """Minimise loss + roughness level by level, ignoring the crossing term."""
    single = _Problem.__new__(_Problem)
    single.__dict__.update(problem.__dict__)
    single.__dict__.pop("_pat", None)
    single.r = 1
    out = theta.reshape(problem.r, problem.p).copy()
    traces, total, conv = [], 0, True
    for j in range(problem.r):
        single.alphas = problem.alphas[j : j + 1]
        single.lambdas = problem.lambdas[j : j + 1]
        obj = single.objective(out[j])
        tr = [obj]
        out[j], _, n, ok = _minimize(single, out[j].copy(), obj, tol, max_iter, check_descent, tr)
        traces.append(tr)
        total += n
        conv &= ok
    return out.ravel(), traces, total, conv


def fit(
    data: StationData,
    alphas,
    mesh: TriangularMesh | FemOperators,
    lambdas=1.0,
    gamma: float | None = None,
    eps: float = DEFAULT_EPS,
    tol: float = 1e-6,
    max_iter: int = 500,
    delta: float | None = None,
    init: np.ndarray | None = None,
    check_descent: bool = True,
    separate_first: bool = True,
) -> QuantileFieldSet:
    """Fit all quantile fields jointly by majorization-minimization.

    Parameters
    ----------
    data : StationData
    alphas : increasing levels in (0, 1)
    mesh : mesh or its assembled operators
    lambdas : scalar or one smoothing weight per level
    gamma, eps : crossing penalty weight and target gap
    tol : stop once a SQUAREM cycle lowers the objective by less than this
        fraction of its value
    delta : majorizer smoothing, default ``1e-6`` times the response scale
    init : optional starting coefficient matrix (r, q + N)
    separate_first : try the level-by-level fits before the joint iteration
    """
    alphas = check_levels(alphas)
    ops = mesh if isinstance(mesh, FemOperators) else assemble(mesh)
    lambdas = np.broadcast_to(np.asarray(lambdas, float), alphas.shape).copy()
    if np.any(lambdas <= 0):
        raise ValueError("smoothing weights must be positive")
    user_gamma = gamma is not None
    gamma = default_gamma(data, alphas) if gamma is None else float(gamma)
    y_all = np.concatenate(data.values)
    scale = float(np.std(y_all)) or float(np.abs(y_all).max()) or 1.0
    delta = 1e-6 * scale if delta is None else float(delta)
    try:
        problem = _Problem(data, alphas, ops, lambdas, gamma, eps, delta)
    except Exception as exc:  # station outside mesh
        raise MqsrError(f"cannot build MQSR problem: {exc}") from exc

    theta = _initial(problem, alphas) if init is None else np.asarray(init, float).ravel().copy()
    obj = problem.objective(theta)
    trace = [obj]
    it = 0
    level_traces = []
    if problem.r > 1 and separate_first:
        # Each term of J is non-negative, so if the separate minimisers of
        # loss + roughness leave every gap >= eps (hinge term exactly zero)
        # they minimise J as well.  The joint system is only needed when the
        # separate fits cross.
        sep, level_traces, sep_iter, sep_conv = _fit_levels(problem, theta, tol, max_iter, check_descent)
        it += sep_iter
        j_sep = problem.objective(sep)
        if j_sep <= obj:
            theta, obj = sep, j_sep
            trace.append(obj)
        done = theta is sep and sep_conv and problem.gaps(sep).min() >= problem.eps
    else:
        done = False
    converged = bool(done)
    if not done:
        theta, obj, n, converged = _minimize(problem, theta, obj, tol, max_iter, check_descent, trace)
        converged = bool(converged)
        it += n
    if not converged:
        log.warning("MQSR stopped at max_iter=%d before reaching tol=%g", max_iter, tol)

    betas, coefs = problem.split(theta)
    fs = QuantileFieldSet(
        alphas, betas.copy(), coefs.copy(), lambdas, gamma, eps, ops.mesh,
        objective_trace=trace, n_iter=it, converged=converged, level_traces=level_traces,
    )
    if problem.r > 1:
        worst = problem.gaps(theta).min()
        if worst < 0:
            msg = f"fitted quantile fields cross (min gap {worst:.3g})"
            if user_gamma:
                warnings.warn(msg, RuntimeWarning)
            else:
                raise MqsrError(msg)
    return fs


def objective(fields: QuantileFieldSet, data: StationData, ops: FemOperators | None = None) -> float:
    """Exact objective value of a fitted field set on ``data``."""
    ops = ops or assemble(fields.mesh)
    prob = _Problem(data, fields.alphas, ops, fields.lambdas, fields.gamma, fields.eps, 0.0)
    theta = np.hstack([fields.betas, fields.coefs]).ravel()
    return prob.objective(theta)


def evaluate(fields: QuantileFieldSet, points, covariates=None) -> np.ndarray:
    return fields.evaluate(points, covariates)


def select_lambda(
    data: StationData,
    alphas,
    mesh: TriangularMesh | FemOperators,
    candidates,
    folds: int = 10,
    seed: int = 0,
    **fit_kw,
) -> np.ndarray:
    """Per-level smoothing weight by K-fold cross-validation over stations.

    Held-out stations are scored by their mean pinball loss at each level;
    the smallest loss wins and ties go to the larger weight.
    """
    alphas = check_levels(alphas)
    cands = np.sort(np.asarray(candidates, float))
    if cands.size == 1:
        return np.full(len(alphas), cands[0])
    if data.n < folds:
        raise ValueError(f"{data.n} stations cannot be split into {folds} folds")
    ops = mesh if isinstance(mesh, FemOperators) else assemble(mesh)
    rng = np.random.default_rng(seed)
    fold_of = rng.permutation(np.arange(data.n) % folds)
    scores = np.zeros((len(cands), len(alphas)))
    fit_kw.setdefault("check_descent", False)
    for c, lam in enumerate(cands):
        for k in range(folds):
            train = np.flatnonzero(fold_of != k)
            test = np.flatnonzero(fold_of == k)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fs = fit(data.subset(train), alphas, ops, lam, **fit_kw)
            held = data.subset(test)
            qs = fs.evaluate(held.locations, held.covariates, check=False)
            for i in range(held.n):
                for j, a in enumerate(alphas):
                    scores[c, j] += pinball(a, held.values[i] - qs[j, i]).sum()
    scores /= sum(len(v) for v in data.values)
    best = np.empty(len(alphas))
    for j in range(len(alphas)):
        s = scores[:, j]
        tie = s <= s.min() * (1 + 1e-12) + 1e-15
        best[j] = cands[np.flatnonzero(tie).max()]
    return best
