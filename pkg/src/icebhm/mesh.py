"""Planar triangulations and piecewise-linear finite elements.

Meshes are built from a lattice of points inside a (possibly dilated) domain
polygon, triangulated with Delaunay and refined until no edge exceeds
1.5 times the requested length.  Everything downstream (SPDE precisions,
observation operators) works on the P1 basis defined here.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import shapely
from scipy.spatial import Delaunay
from shapely.geometry import Polygon

__all__ = [
    "MeshError",
    "TriMesh",
    "FemMatrices",
    "Footprint",
    "as_polygon",
    "build_mesh",
    "assemble_fem",
    "point_eval_matrix",
    "make_footprint",
    "footprint_matrix",
    "write_mesh",
    "read_mesh",
    "write_polygon",
    "read_polygon",
]


class MeshError(ValueError):
    """Invalid geometry or a location the mesh cannot represent."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def as_polygon(poly) -> Polygon:
    """Coerce a vertex list (closed implicitly) or shapely polygon, validating it."""
    if not isinstance(poly, Polygon):
        coords = np.asarray(poly, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2 or len(coords) < 3:
            raise MeshError("polygon needs at least three (s1, s2) vertices")
        poly = Polygon(coords)
    if poly.area <= 0.0:
        raise MeshError("degenerate polygon: zero area")
    if not poly.exterior.is_simple or not poly.is_valid:
        raise MeshError("polygon is self-intersecting")
    return poly


def _signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (vertices[triangles[:, k]] for k in range(3))
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _edges(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and how many triangles use each."""
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges, counts


@dataclass(frozen=True)
class TriMesh:
    """Conforming planar triangulation.

    Attributes
    ----------
    vertices : (n, 2) array
        Planar coordinates (s1, s2).
    triangles : (m, 3) int array
        Counter-clockwise vertex index triples.
    boundary_flags : (n,) bool array
        True for vertices on the outer boundary of the mesh.
    domain_polygon : shapely Polygon
        The physical study region.
    hull_polygon : shapely Polygon
        The region actually triangulated (domain plus extension).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_flags: np.ndarray
    domain_polygon: Polygon
    hull_polygon: Polygon
    _locator: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    def edges(self) -> np.ndarray:
        return _edges(self.triangles)[0]

    def max_edge_length(self) -> float:
        e = self.edges()
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).max())

    def area(self) -> float:
        return float(self.areas.sum())

    def validate(self) -> None:
        if np.any(self.areas <= 0.0):
            raise MeshError("triangle with non-positive signed area")
        _, counts = _edges(self.triangles)
        if np.any(counts > 2):
            raise MeshError("non-conforming triangulation: edge shared by more than two triangles")
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            raise MeshError("mesh has unreferenced vertices")

    def interior_vertices(self, margin: float = 0.0) -> np.ndarray:
        """Indices of vertices inside the domain polygon, at least `margin` from its edge."""
        inside = shapely.contains_xy(self.domain_polygon, self.vertices[:, 0], self.vertices[:, 1])
        if margin > 0.0:
            dist = shapely.distance(self.domain_polygon.exterior, shapely.points(self.vertices))
            inside &= dist >= margin
        return np.flatnonzero(inside)


def _lattice(poly: Polygon, h: float) -> np.ndarray:
    x0, y0, x1, y1 = poly.bounds
    dy = h * np.sqrt(3.0) / 2.0
    ys = np.arange(y0 + dy / 2.0, y1, dy)
    rows = []
    for k, y in enumerate(ys):
        off = 0.5 * h * (k % 2)
        xs = np.arange(x0 + off + h / 2.0, x1, h)
        rows.append(np.column_stack([xs, np.full_like(xs, y)]))
    pts = np.vstack(rows) if rows else np.empty((0, 2))
    keep = shapely.contains_xy(poly, pts[:, 0], pts[:, 1])
    pts = pts[keep]
    dist = shapely.distance(poly.exterior, shapely.points(pts))
    return pts[dist > 0.5 * h]


def _boundary_points(poly: Polygon, h: float) -> np.ndarray:
    ring = np.asarray(poly.exterior.coords)[:-1]
    out = []
    for a, b in zip(ring, np.roll(ring, -1, axis=0)):
        k = max(1, int(np.ceil(np.linalg.norm(b - a) / h)))
        t = np.arange(k)[:, None] / k
        out.append(a + t * (b - a))
    return np.vstack(out)


def _triangulate(points: np.ndarray, region: Polygon) -> np.ndarray:
    tri = Delaunay(points).simplices.astype(np.int64)
    cent = points[tri].mean(axis=1)
    tri = tri[shapely.contains_xy(region, cent[:, 0], cent[:, 1])]
    area = _signed_areas(points, tri)
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri[np.abs(area) > 1e-14 * np.abs(area).max()]


def build_mesh(
    domain_polygon,
    target_edge_length: float,
    extension_factor: float = 0.0,
    extension_scale: float | None = None,
) -> TriMesh:
    """Triangulate the domain, dilated by ``extension_factor * extension_scale``.

    ``extension_scale`` is normally the largest prior spatial range; without it
    the polygon diameter is used.  The dilation uses mitred corners so that a
    square stays a square.
    """
    if target_edge_length <= 0:
        raise MeshError("target_edge_length must be positive")
    if extension_factor < 0:
        raise MeshError("extension_factor must be non-negative")
    domain = as_polygon(domain_polygon)
    h = float(target_edge_length)
    if extension_scale is None:
        ring = np.asarray(domain.exterior.coords)
        extension_scale = float(np.max(np.linalg.norm(ring[:, None] - ring[None], axis=-1)))
    ext = extension_factor * extension_scale
    hull = domain if ext == 0 else domain.buffer(ext, join_style="mitre", mitre_limit=2.0)
    hull = shapely.set_precision(hull, 0.0)

    pts = np.vstack([_boundary_points(hull, h), _lattice(hull, h)])
    # refine until every edge is short enough; midpoints of hull edges stay on the hull
    for _ in range(20):
        tri = _triangulate(pts, hull)
        edges, _ = _edges(tri)
        length = np.linalg.norm(pts[edges[:, 0]] - pts[edges[:, 1]], axis=1)
        long = edges[length > 1.5 * h]
        if len(long) == 0:
            break
        pts = np.vstack([pts, 0.5 * (pts[long[:, 0]] + pts[long[:, 1]])])
    else:
        raise MeshError("mesh refinement did not converge")

    used = np.unique(tri)
    remap = np.full(len(pts), -1)
    remap[used] = np.arange(len(used))
    pts = pts[used]
    tri = remap[tri]
    edges, counts = _edges(tri)
    flags = np.zeros(len(pts), dtype=bool)
    flags[edges[counts == 1].ravel()] = True
    mesh = TriMesh(_frozen(pts), _frozen(tri, np.int64), _frozen(flags, bool), domain, hull)
    mesh.validate()
    return mesh


@dataclass(frozen=True)
class FemMatrices:
    """P1 mass (consistent and lumped) and stiffness matrices of a mesh."""

    mass: sp.csc_matrix
    stiffness: sp.csc_matrix
    lumped_mass: np.ndarray


def _local_gradients(vertices: np.ndarray, triangles: np.ndarray):
    p0, p1, p2 = (vertices[triangles[:, k]] for k in range(3))
    area = _signed_areas(vertices, triangles)
    # gradient of barycentric coordinate k is the rotated opposite edge over 2*area
    opp = np.stack([p2 - p1, p0 - p2, p1 - p0], axis=1)
    grads = np.stack([-opp[..., 1], opp[..., 0]], axis=-1) / (2.0 * area)[:, None, None]
    return area, grads


def assemble_fem(mesh: TriMesh) -> FemMatrices:
    """Standard P1 element integration, summed in a fixed element order."""
    area, grads = _local_gradients(mesh.vertices, mesh.triangles)
    local_mass = (np.full((3, 3), 1.0) + np.eye(3)) / 12.0
    m_vals = area[:, None, None] * local_mass[None]
    g_vals = area[:, None, None] * np.einsum("eid,ejd->eij", grads, grads)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_vertices
    C = sp.coo_matrix((m_vals.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    G = sp.coo_matrix((g_vals.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    C = (0.5 * (C + C.T)).tocsc()
    G = (0.5 * (G + G.T)).tocsc()
    lumped = np.asarray(C.sum(axis=1)).ravel()
    lumped.setflags(write=False)
    return FemMatrices(C, G, lumped)


def _locator(mesh: TriMesh):
    if "bins" in mesh._locator:
        return mesh._locator["bins"]
    v = mesh.vertices
    tri = mesh.triangles
    lo = v.min(axis=0)
    hi = v.max(axis=0)
    nb = max(1, int(np.sqrt(mesh.n_triangles / 2.0)))
    size = (hi - lo) / nb * (1 + 1e-9)
    tmin = np.floor((v[tri].min(axis=1) - lo) / size).astype(int).clip(0, nb - 1)
    tmax = np.floor((v[tri].max(axis=1) - lo) / size).astype(int).clip(0, nb - 1)
    bins = [[] for _ in range(nb * nb)]
    for t in range(len(tri)):
        for i in range(tmin[t, 0], tmax[t, 0] + 1):
            for j in range(tmin[t, 1], tmax[t, 1] + 1):
                bins[i * nb + j].append(t)
    width = max(len(b) for b in bins)
    table = np.full((nb * nb, width), -1, dtype=np.int64)
    for k, b in enumerate(bins):
        table[k, : len(b)] = b  # ascending triangle order, so the first hit is the lowest index
    out = (lo, size, nb, table)
    mesh._locator["bins"] = out
    return out


def locate(mesh: TriMesh, locations, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Containing triangle and barycentric weights for each location (-1 if outside)."""
    pts = np.atleast_2d(np.asarray(locations, dtype=float))
    lo, size, nb, table = _locator(mesh)
    ij = np.floor((pts - lo) / size).astype(int)
    inb = np.all((ij >= 0) & (ij < nb), axis=1)
    ij = ij.clip(0, nb - 1)
    cand = table[ij[:, 0] * nb + ij[:, 1]]
    cand[~inb] = -1
    valid = cand >= 0
    tri = mesh.triangles[np.where(valid, cand, 0)]
    v = mesh.vertices
    p0, p1, p2 = v[tri[..., 0]], v[tri[..., 1]], v[tri[..., 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    det = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
    r = pts[:, None, :] - p0
    l1 = (r[..., 0] * d2[..., 1] - r[..., 1] * d2[..., 0]) / det
    l2 = (d1[..., 0] * r[..., 1] - d1[..., 1] * r[..., 0]) / det
    l0 = 1.0 - l1 - l2
    bary = np.stack([l0, l1, l2], axis=-1)
    inside = valid & np.all(bary >= -tol, axis=-1)
    first = np.argmax(inside, axis=1)
    found = inside[np.arange(len(pts)), first]
    tri_idx = np.where(found, cand[np.arange(len(pts)), first], -1)
    w = bary[np.arange(len(pts)), first]
    w = np.clip(w, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return tri_idx, w


def point_eval_matrix(mesh: TriMesh, locations) -> sp.csr_matrix:
    """Sparse matrix mapping vertex coefficients to values at ``locations``."""
    pts = np.atleast_2d(np.asarray(locations, dtype=float))
    tri_idx, w = locate(mesh, pts)
    bad = np.flatnonzero(tri_idx < 0)
    if len(bad):
        raise MeshError(f"location {int(bad[0])} {tuple(pts[bad[0]])} lies outside the mesh hull")
    rows = np.repeat(np.arange(len(pts)), 3)
    cols = mesh.triangles[tri_idx].ravel()
    A = sp.csr_matrix((w.ravel(), (rows, cols)), shape=(len(pts), mesh.n_vertices))
    A.sum_duplicates()
    return A


@dataclass(frozen=True)
class Footprint:
    """An observation footprint with a cell-centroid quadrature rule."""

    region: Polygon
    quad_points: np.ndarray
    quad_weights: np.ndarray

    @property
    def area(self) -> float:
        return float(self.region.area)


def make_footprint(region, cell_size: float) -> Footprint:
    """Grid the footprint's bounding box with square cells clipped to the region.

    Each clipped piece contributes its own area and centroid (or an interior
    representative point where a non-convex piece has its centroid outside).
    """
    poly = as_polygon(region)
    if cell_size <= 0:
        raise MeshError("cell_size must be positive")
    x0, y0, x1, y1 = poly.bounds
    nx = max(1, int(np.ceil((x1 - x0) / cell_size)))
    ny = max(1, int(np.ceil((y1 - y0) / cell_size)))
    gx, gy = np.meshgrid(x0 + cell_size * np.arange(nx), y0 + cell_size * np.arange(ny))
    boxes = shapely.box(gx.ravel(), gy.ravel(), gx.ravel() + cell_size, gy.ravel() + cell_size)
    pieces = shapely.intersection(boxes, poly)
    areas = shapely.area(pieces)
    keep = areas > 0
    pieces = pieces[keep]
    areas = areas[keep]
    if len(pieces) == 0:
        raise MeshError("empty footprint")
    cent = shapely.centroid(pieces)
    outside = ~shapely.covers(poly, cent)
    if outside.any():
        cent[outside] = shapely.point_on_surface(pieces[outside])
    pts = shapely.get_coordinates(cent)
    return Footprint(poly, _frozen(pts), _frozen(areas))


def footprint_matrix(
    mesh: TriMesh, fp: Footprint, weight_fn: Callable[[np.ndarray], np.ndarray] | float = 1.0
) -> sp.csr_matrix:
    """Row vector b with b @ eta approximating the integral of f * field over the footprint."""
    if len(fp.quad_weights) == 0:
        raise MeshError("empty footprint")
    if callable(weight_fn):
        f = np.broadcast_to(np.asarray(weight_fn(fp.quad_points), dtype=float), fp.quad_weights.shape)
    else:
        f = np.full(fp.quad_weights.shape, float(weight_fn))
    A = point_eval_matrix(mesh, fp.quad_points)
    row = sp.csr_matrix((f * fp.quad_weights)[None, :]) @ A
    return sp.csr_matrix(row)


# -- delimited text formats --------------------------------------------------


def write_mesh(mesh: TriMesh, vertices_path, triangles_path) -> None:
    with open(vertices_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "s1", "s2", "boundary_flag"])
        for i, ((x, y), b) in enumerate(zip(mesh.vertices, mesh.boundary_flags)):
            w.writerow([i, repr(float(x)), repr(float(y)), int(b)])
    with open(triangles_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["v1", "v2", "v3"])
        w.writerows(mesh.triangles.tolist())


def read_mesh(vertices_path, triangles_path, domain_polygon=None) -> TriMesh:
    with open(vertices_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["index"]))
    v = np.array([[float(r["s1"]), float(r["s2"])] for r in rows])
    flags = np.array([bool(int(r["boundary_flag"])) for r in rows])
    with open(triangles_path, newline="") as fh:
        tri = np.array([[int(r["v1"]), int(r["v2"]), int(r["v3"])] for r in csv.DictReader(fh)])
    hull = shapely.union_all(shapely.polygons(v[tri])).buffer(0)
    domain = as_polygon(domain_polygon) if domain_polygon is not None else hull
    mesh = TriMesh(_frozen(v), _frozen(tri, np.int64), _frozen(flags, bool), domain, hull)
    mesh.validate()
    return mesh


def write_polygon(poly, path) -> None:
    coords = np.asarray(as_polygon(poly).exterior.coords)[:-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s1", "s2"])
        w.writerows([[repr(float(x)), repr(float(y))] for x, y in coords])


def read_polygon(path: str | Path) -> Polygon:
    with open(path, newline="") as fh:
        coords: Sequence = [(float(r["s1"]), float(r["s2"])) for r in csv.DictReader(fh)]
    return as_polygon(coords)
