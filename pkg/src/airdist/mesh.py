"""Triangular meshes, linear finite elements and a penalized field smoother.

The mesh generator is a conforming Delaunay refinement: boundary segments are
resampled at the target edge length, the interior is seeded with a triangular
lattice, and Ruppert-style circumcentre insertion (with segment splitting on
encroachment) lifts the minimum angle towards 20 degrees.

The squared-Laplacian roughness penalty is discretised in mixed form,

    g = M^-1 D f,        P = D^T M^-1 D,

with M the lumped mass matrix and D the weak Laplacian: minus the stiffness
matrix plus a boundary flux term built from the recovered nodal gradient.
The flux term makes D vanish on globally linear fields, so the penalty null
space is exactly the affine functions, as in the continuous problem.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import Delaunay, cKDTree
import shapely
from shapely import contains_xy
from shapely.geometry import Polygon, shape
from shapely.geometry.polygon import orient

log = logging.getLogger(__name__)

MIN_AREA = 1e-12
SNAP_TOL = 1e-9


class MeshError(ValueError):
    pass


class OutsideDomainError(MeshError):
    def __init__(self, indices, points):
        self.indices = np.asarray(indices)
        first = np.asarray(points)[self.indices[:5]]
        super().__init__(
            f"{len(self.indices)} point(s) outside the mesh, e.g. {first.tolist()}"
        )


@dataclass(eq=False)
class TriangularMesh:
    """Planar triangulation with counter-clockwise triangles."""

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray = None
    _locator: "PointLocator" = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be an (N, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be a (T, 3) array")
        n = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise MeshError("triangle vertex index out of range")
        area = self.signed_areas()
        flip = area < 0
        if flip.any():
            self.triangles[flip] = self.triangles[flip][:, [0, 2, 1]]
            area = np.abs(area)
        bad = np.flatnonzero(area <= MIN_AREA)
        if bad.size:
            raise MeshError(f"degenerate triangle(s) {bad[:10].tolist()} (area <= {MIN_AREA})")
        edges, counts = self._edge_counts()
        if np.any(counts > 2):
            raise MeshError("an edge is shared by more than two triangles")
        if self.boundary is None:
            flags = np.zeros(n, dtype=bool)
            flags[edges[counts == 1].ravel()] = True
            self.boundary = flags
        else:
            self.boundary = np.asarray(self.boundary, dtype=bool)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas())

    @property
    def area(self) -> float:
        return float(self.areas().sum())

    def _edge_counts(self):
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def boundary_edges(self) -> np.ndarray:
        """Boundary edges oriented as in their (counter-clockwise) triangle."""
        directed = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        key = np.sort(directed, axis=1)
        _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return directed[counts[inverse.ravel()] == 1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:16]

    @property
    def locator(self) -> "PointLocator":
        if self._locator is None:
            self._locator = PointLocator(self)
        return self._locator

    def locate(self, points, snap_tol: float = SNAP_TOL):
        return self.locator.locate(points, snap_tol=snap_tol)

    def evaluation_matrix(self, points) -> sp.csr_matrix:
        """Sparse (m, N) operator mapping nodal values to values at ``points``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tri, bary = self.locate(points)
        rows = np.repeat(np.arange(len(points)), 3)
        cols = self.triangles[tri].ravel()
        return sp.csr_matrix((bary.ravel(), (rows, cols)), shape=(len(points), self.n_vertices))

    def evaluate(self, coefficients, points) -> np.ndarray:
        return self.evaluation_matrix(points) @ np.asarray(coefficients, dtype=float)

    # -- plain-text node/element files ------------------------------------
    def write(self, stem: str | Path):
        stem = Path(stem)
        with open(Path(f"{stem}.node"), "w") as fh:
            fh.write(f"{self.n_vertices}\n")
            for (x, y), b in zip(self.vertices, self.boundary):
                fh.write(f"{float(x)!r} {float(y)!r} {int(b)}\n")
        with open(Path(f"{stem}.ele"), "w") as fh:
            fh.write(f"{self.n_triangles}\n")
            for a, b, c in self.triangles:
                fh.write(f"{a} {b} {c}\n")

    @classmethod
    def read(cls, stem: str | Path) -> "TriangularMesh":
        stem = Path(stem)
        nodes = np.loadtxt(Path(f"{stem}.node"), skiprows=1, ndmin=2)
        ele = np.loadtxt(Path(f"{stem}.ele"), skiprows=1, dtype=np.int64, ndmin=2)
        return cls(nodes[:, :2], ele, nodes[:, 2].astype(bool))


class PointLocator:
    """Uniform-grid bucketing of triangles for fast point location."""

    def __init__(self, mesh: TriangularMesh):
        self.mesh = mesh
        v = mesh.vertices
        p = v[mesh.triangles]
        self.lo = v.min(axis=0)
        span = np.maximum(v.max(axis=0) - self.lo, 1e-12)
        nside = max(1, int(np.sqrt(mesh.n_triangles / 2)))
        self.shape = np.maximum(1, np.round(nside * span / span.max()).astype(int))
        self.cell = span / self.shape
        tlo = self._cell_index(p.min(axis=1))
        thi = self._cell_index(p.max(axis=1))
        buckets: dict[int, list[int]] = {}
        for t, (a, b) in enumerate(zip(tlo, thi)):
            for i in range(a[0], b[0] + 1):
                for j in range(a[1], b[1] + 1):
                    buckets.setdefault(i * self.shape[1] + j, []).append(t)
        width = max(len(b) for b in buckets.values())
        table = np.full((self.shape[0] * self.shape[1], width), -1, dtype=np.int64)
        for key, tris in buckets.items():
            table[key, : len(tris)] = tris
        self.table = table
        # barycentric transform per triangle: [l1, l2] = T (x - p0)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.inv = np.stack(
            [np.stack([d2[:, 1], -d2[:, 0]], -1), np.stack([-d1[:, 1], d1[:, 0]], -1)], 1
        ) / det[:, None, None]
        self.origin = p[:, 0]

    def _cell_index(self, pts):
        idx = np.floor((pts - self.lo) / self.cell).astype(int)
        return np.clip(idx, 0, self.shape - 1)

    def _bary(self, pts, cand):
        safe = np.where(cand < 0, 0, cand)
        rel = pts[:, None, :] - self.origin[safe]
        l12 = np.einsum("pkij,pkj->pki", self.inv[safe], rel)
        bary = np.concatenate([1.0 - l12.sum(-1, keepdims=True), l12], axis=-1)
        score = np.where(cand < 0, -np.inf, bary.min(-1))
        return bary, score

    def locate(self, points, snap_tol: float = SNAP_TOL, chunk: int = 20000):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tri = np.empty(len(points), dtype=np.int64)
        bary = np.empty((len(points), 3))
        missing = []
        for s in range(0, len(points), chunk):
            pts = points[s : s + chunk]
            ij = self._cell_index(pts)
            cand = self.table[ij[:, 0] * self.shape[1] + ij[:, 1]]
            b, score = self._bary(pts, cand)
            best = np.argmax(score, axis=1)
            rows = np.arange(len(pts))
            tri[s : s + chunk] = cand[rows, best]
            bary[s : s + chunk] = b[rows, best]
            bad = score[rows, best] < -1e-12
            missing.extend((s + np.flatnonzero(bad)).tolist())
        if missing:
            missing = np.asarray(missing)
            still = self._snap(points, missing, tri, bary, snap_tol)
            if still.size:
                raise OutsideDomainError(still, points)
        return tri, bary

    def _snap(self, points, missing, tri, bary, tol):
        """Clamp points lying within ``tol`` of the boundary onto the mesh."""
        mesh = self.mesh
        centroids = mesh.vertices[mesh.triangles].mean(axis=1)
        tree = cKDTree(centroids)
        k = min(16, mesh.n_triangles)
        failed = []
        for m in missing:
            _, near = tree.query(points[m], k=k)
            near = np.atleast_1d(near)
            best_d, best = np.inf, None
            for t in near:
                d, lam = _project_to_triangle(points[m], mesh.vertices[mesh.triangles[t]])
                if d < best_d:
                    best_d, best = d, (t, lam)
            if best_d <= tol:
                tri[m], bary[m] = best
            else:
                failed.append(m)
        return np.asarray(failed, dtype=np.int64)


def _project_to_triangle(x, p):
    """Distance from ``x`` to triangle ``p`` and barycentrics of the closest point."""
    best_d, best_lam = np.inf, None
    for a, b, ia, ib in ((0, 1, 0, 1), (1, 2, 1, 2), (2, 0, 2, 0)):
        e = p[b] - p[a]
        t = np.clip(np.dot(x - p[a], e) / np.dot(e, e), 0.0, 1.0)
        q = p[a] + t * e
        d = np.linalg.norm(x - q)
        if d < best_d:
            lam = np.zeros(3)
            lam[ia] = 1 - t
            lam[ib] = t
            best_d, best_lam = d, lam
    return best_d, best_lam


# ---------------------------------------------------------------------------
# mesh generation
# ---------------------------------------------------------------------------

def _as_polygon(boundary) -> Polygon:
    if isinstance(boundary, Polygon):
        poly = boundary
    elif isinstance(boundary, dict):
        geom = boundary
        if geom.get("type") == "FeatureCollection":
            geom = geom["features"][0]["geometry"]
        elif geom.get("type") == "Feature":
            geom = geom["geometry"]
        poly = shape(geom)
        if poly.geom_type == "MultiPolygon":
            poly = max(poly.geoms, key=lambda g: g.area)
    else:
        poly = Polygon(boundary)
    if not poly.is_valid:
        raise MeshError("boundary polygon is not simple (self-intersecting or invalid)")
    return orient(poly, sign=1.0)


def _resample_ring(coords: np.ndarray, h: float):
    pts, segs = [], []
    coords = coords[:-1] if np.allclose(coords[0], coords[-1]) else coords
    start = len(pts)
    for a, b in zip(coords, np.roll(coords, -1, axis=0)):
        k = max(1, int(np.ceil(np.linalg.norm(b - a) / h - 1e-9)))
        for t in np.arange(k) / k:
            pts.append(a + t * (b - a))
    n = len(pts)
    segs = [(start + i, start + (i + 1) % n) for i in range(n)]
    return pts, segs


def _lattice(poly: Polygon, h: float) -> np.ndarray:
    minx, miny, maxx, maxy = poly.bounds
    dy = h * np.sqrt(3) / 2
    rows = []
    for j, y in enumerate(np.arange(miny, maxy + 1e-12, dy)):
        xs = np.arange(minx + (h / 2 if j % 2 else 0.0), maxx + 1e-12, h)
        rows.append(np.column_stack([xs, np.full_like(xs, y)]))
    pts = np.vstack(rows)
    inside = contains_xy(poly, pts[:, 0], pts[:, 1])
    pts = pts[inside]
    if len(pts) == 0:
        return pts
    geoms = shapely.points(pts)
    dmin = np.min([shapely.distance(r, geoms) for r in [poly.exterior, *poly.interiors]], axis=0)
    return pts[dmin >= 0.5 * h - 1e-9]


def _min_angles(p):
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    cosA = np.clip((b**2 + c**2 - a**2) / (2 * b * c), -1, 1)
    cosB = np.clip((a**2 + c**2 - b**2) / (2 * a * c), -1, 1)
    cosC = np.clip((a**2 + b**2 - c**2) / (2 * a * b), -1, 1)
    return np.degrees(np.arccos(np.max(np.stack([cosA, cosB, cosC]), axis=0))), np.max(
        np.stack([a, b, c]), axis=0
    )


def _circumcentres(p):
    ax, ay = p[:, 0, 0], p[:, 0, 1]
    bx, by = p[:, 1, 0], p[:, 1, 1]
    cx, cy = p[:, 2, 0], p[:, 2, 1]
    d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / d
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / d
    return np.column_stack([ux, uy])


def build_mesh(
    boundary_polygon,
    target_edge_length: float,
    min_angle: float = 20.0,
    max_rounds: int = 60,
) -> TriangularMesh:
    """Quality triangulation of a polygon (holes allowed).

    Parameters
    ----------
    boundary_polygon : shapely Polygon, GeoJSON mapping or (k, 2) coordinates
    target_edge_length : float
        Boundary spacing and interior lattice spacing, in domain units.
    min_angle : float
        Triangles below this angle are refined by circumcentre insertion.
    """
    h = float(target_edge_length)
    if not h > 0:
        raise MeshError("target edge length must be positive")
    poly = _as_polygon(boundary_polygon)

    pts, segs = [], []
    for ring in [poly.exterior, *poly.interiors]:
        rp, rs = _resample_ring(np.asarray(ring.coords), h)
        off = len(pts)
        pts.extend(rp)
        segs.extend((a + off, b + off) for a, b in rs)
    pts = [np.asarray(p, dtype=float) for p in pts]
    lattice = _lattice(poly, h)
    pts = np.vstack([np.asarray(pts), lattice]) if len(lattice) else np.asarray(pts)
    segs = [tuple(s) for s in segs]

    for rnd in range(max_rounds):
        tri = _delaunay_inside(pts, poly)
        edges = set(map(tuple, np.sort(tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1).tolist()))
        missing = [s for s in segs if tuple(sorted(s)) not in edges]
        if missing:
            pts, segs = _split_segments(pts, segs, set(missing))
            continue
        p = pts[tri]
        ang, longest = _min_angles(p)
        bad = np.flatnonzero((ang < min_angle) | (longest > 1.5 * h))
        if bad.size == 0:
            break
        new_pts, enc = _refinement_points(pts, segs, p[bad], poly, h)
        if not new_pts and not enc:
            break
        if enc:
            pts, segs = _split_segments(pts, segs, enc)
        if new_pts:
            pts = np.vstack([pts, np.asarray(new_pts)])
    else:
        log.warning("mesh refinement stopped after %d rounds", max_rounds)

    tri = _delaunay_inside(pts, poly)
    used = np.unique(tri)
    remap = np.full(len(pts), -1)
    remap[used] = np.arange(len(used))
    return TriangularMesh(pts[used], remap[tri])


def _delaunay_inside(pts, poly):
    d = Delaunay(pts)
    if len(d.coplanar):
        raise MeshError("duplicate or coincident mesh points")
    tri = d.simplices
    c = pts[tri].mean(axis=1)
    keep = contains_xy(poly, c[:, 0], c[:, 1])
    return tri[keep]


def _split_segments(pts, segs, targets):
    pts = list(pts)
    out = []
    for s in segs:
        if s in targets or tuple(reversed(s)) in targets:
            m = len(pts)
            pts.append(0.5 * (pts[s[0]] + pts[s[1]]))
            out.extend([(s[0], m), (m, s[1])])
        else:
            out.append(s)
    return np.asarray(pts), out


def _refinement_points(pts, segs, bad_tris, poly, h):
    cc = _circumcentres(bad_tris)
    sa = np.asarray([pts[a] for a, _ in segs])
    sb = np.asarray([pts[b] for _, b in segs])
    mid = 0.5 * (sa + sb)
    half = 0.5 * np.linalg.norm(sb - sa, axis=1)
    seg_tree = cKDTree(mid)
    pt_tree = cKDTree(pts)
    rmax = half.max()
    new, enc = [], set()
    for c in cc:
        if not np.all(np.isfinite(c)):
            continue
        hits = [i for i in seg_tree.query_ball_point(c, rmax) if np.linalg.norm(c - mid[i]) < half[i]]
        if hits:
            enc.update(segs[i] for i in hits)
            continue
        if not contains_xy(poly, c[0], c[1]):
            continue
        if pt_tree.query(c)[0] < 0.2 * h:
            continue
        if any(np.linalg.norm(c - q) < 0.2 * h for q in new):
            continue
        new.append(c)
    return new, enc


# ---------------------------------------------------------------------------
# finite elements
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FemOperators:
    mesh: TriangularMesh
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    lumped_mass: np.ndarray
    laplacian: sp.csr_matrix
    penalty: sp.csr_matrix

    def evaluation(self, points) -> sp.csr_matrix:
        return self.mesh.evaluation_matrix(points)


def _element_geometry(mesh: TriangularMesh):
    p = mesh.vertices[mesh.triangles]
    area = mesh.areas()
    bad = np.flatnonzero(area <= MIN_AREA)
    if bad.size:
        raise MeshError(f"degenerate triangle {int(bad[0])}")
    # gradient of barycentric function a is the rotated opposite edge / (2 area)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grad = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2 * area[:, None, None])
    return area, grad


def element_matrices(mesh: TriangularMesh):
    """Per-element P1 mass and stiffness, shapes (T, 3, 3)."""
    area, grad = _element_geometry(mesh)
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    mass = area[:, None, None] * local
    stiff = area[:, None, None] * np.einsum("tad,tbd->tab", grad, grad)
    return mass, stiff


def _scatter(mesh, local, n_cols=None):
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n_cols or n))


def assemble(mesh: TriangularMesh) -> FemOperators:
    """Assemble P1 mass, stiffness, lumped mass and the mixed-form penalty."""
    mass_e, stiff_e = element_matrices(mesh)
    mass = _scatter(mesh, mass_e)
    stiffness = _scatter(mesh, stiff_e)
    mass = ((mass + mass.T) * 0.5).tocsr()
    stiffness = ((stiffness + stiffness.T) * 0.5).tocsr()
    lumped = np.asarray(mass.sum(axis=1)).ravel()

    # recovered gradient G = M_L^-1 B f ; B_ia = int phi_i d(phi_a)
    area, grad = _element_geometry(mesh)
    bx = _scatter(mesh, (area[:, None, None] / 3.0) * np.broadcast_to(grad[:, None, :, 0], (len(area), 3, 3)))
    by = _scatter(mesh, (area[:, None, None] / 3.0) * np.broadcast_to(grad[:, None, :, 1], (len(area), 3, 3)))
    inv_l = sp.diags(1.0 / lumped)
    # boundary flux int_dD (G . n) phi_i, P1 edge mass times the edge normal
    be = mesh.boundary_edges()
    v = mesh.vertices
    d = v[be[:, 1]] - v[be[:, 0]]
    nx, ny = d[:, 1], -d[:, 0]  # outward normal times edge length
    ii = np.concatenate([be[:, 0], be[:, 0], be[:, 1], be[:, 1]])
    jj = np.concatenate([be[:, 0], be[:, 1], be[:, 0], be[:, 1]])
    w = np.concatenate([np.full(len(be), 2.0), np.ones(len(be)), np.ones(len(be)), np.full(len(be), 2.0)]) / 6.0
    n = mesh.n_vertices
    ex = sp.csr_matrix((w * np.tile(nx, 4), (ii, jj)), shape=(n, n))
    ey = sp.csr_matrix((w * np.tile(ny, 4), (ii, jj)), shape=(n, n))
    laplacian = (-stiffness + ex @ inv_l @ bx + ey @ inv_l @ by).tocsr()
    penalty = (laplacian.T @ inv_l @ laplacian).tocsr()
    penalty = ((penalty + penalty.T) * 0.5).tocsr()
    return FemOperators(mesh, mass, stiffness, lumped, laplacian, penalty)


def solve_spd(matrix, rhs, what: str = "system"):
    """Sparse direct solve that raises on singular systems."""
    matrix = sp.csc_matrix(matrix)
    try:
        lu = spla.splu(matrix)
    except RuntimeError as exc:
        raise np.linalg.LinAlgError(f"singular {what}: {exc}") from None
    x = lu.solve(np.asarray(rhs, dtype=float))
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError(f"singular {what}: non-finite solution")
    return x


def smooth_covariate(ops: FemOperators | TriangularMesh, points, values, lam: float) -> np.ndarray:
    """Penalized least-squares field through scattered data.

    Minimises ``sum_k (v_k - f(p_k))^2 + lam * f^T P f`` over FEM coefficient
    vectors and returns the coefficients.
    """
    if not lam > 0:
        raise ValueError("smoothing parameter must be positive")
    if isinstance(ops, TriangularMesh):
        ops = assemble(ops)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    affine = np.column_stack([np.ones(len(points)), points - points.mean(axis=0)])
    if np.linalg.matrix_rank(affine) < 3:
        # the penalty leaves affine fields free, so the data must pin them down
        raise np.linalg.LinAlgError(
            "singular smoothing system: data points do not determine an affine field"
        )
    psi = ops.mesh.evaluation_matrix(points)
    values = np.asarray(values, dtype=float)
    # Split f = N a + r with N the affine fields and N^T r = 0.  The penalty
    # only ever touches r, so a stays accurate however large lam gets.
    mesh = ops.mesh
    centre = mesh.vertices.mean(axis=0)
    scale = max(np.ptp(mesh.vertices, axis=0).max(), 1e-300)
    N = np.column_stack([np.ones(mesh.n_vertices), (mesh.vertices - centre) / scale])
    G = (psi.T @ psi).tocsc()
    GN = G @ N
    n = mesh.n_vertices
    zero = sp.csc_matrix((3, 3))
    kkt = sp.bmat(
        [
            [G + lam * ops.penalty, sp.csc_matrix(GN), sp.csc_matrix(N)],
            [sp.csc_matrix(GN.T), sp.csc_matrix(N.T @ GN), None],
            [sp.csc_matrix(N.T), None, zero],
        ],
        format="csc",
    )
    b = psi.T @ values
    rhs = np.concatenate([b, N.T @ b, np.zeros(3)])
    try:
        sol = spla.splu(kkt).solve(rhs)
    except RuntimeError as exc:
        raise np.linalg.LinAlgError(f"singular smoothing system (lambda={lam:g}): {exc}") from None
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError(f"smoothing system (lambda={lam:g}) produced non-finite values")
    return N @ sol[n:n + 3] + sol[:n]
