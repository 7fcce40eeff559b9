"""Iso-surface extraction and surface-to-surface distances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .errors import EmptyMesh, ParseError, SpecOutOfGrid
from .rbfshape import ControlPointSet, build_dipoles, reconstruct_sdf_grid, solve_rbf
from .volume import SdfVolume

_CORNERS = np.array(CORNERS)
_TRI_TABLE = [np.array(t, dtype=np.int64).reshape(-1, 3) for t in TRIANGLES]


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float
    triangles: np.ndarray  # (T, 3) int, counter-clockwise seen from outside

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def edge_counts(self):
        """Map each undirected edge ``(a, b)``, ``a < b``, to its triangle count."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return dict(zip(map(tuple, keys.tolist()), counts.tolist()))

    def signed_volume(self):
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def marching_cubes(vol: SdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Triangulate the ``iso`` level set of the trilinear field.

    Vertices on a shared cell edge are welded by edge identity; a vertex that
    falls exactly on a grid node is keyed by that node instead.  Triangles that
    collapse after welding, or have zero area, are dropped.
    """
    v = vol.values
    nx, ny, nz = v.shape
    if min(v.shape) < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    below = v < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << c
    active = (case != 0) & (case != 255)
    # cells in x-fastest order
    cells = np.argwhere(active.transpose(2, 1, 0))[:, ::-1]

    origin = np.asarray(vol.origin)
    spacing = np.asarray(vol.spacing)
    n_nodes = nx * ny * nz
    keys = {}
    verts = []
    tris = []

    def node_id(p):
        return (p[0] * ny + p[1]) * nz + p[2]

    for cell in cells:
        c = case[tuple(cell)]
        table = _TRI_TABLE[c]
        edge_vert = {}
        for e in np.unique(table):
            a_off, b_off = EDGES[e]
            pa = cell + _CORNERS[a_off]
            pb = cell + _CORNERS[b_off]
            if tuple(pb) < tuple(pa):
                pa, pb = pb, pa
            va, vb = v[tuple(pa)], v[tuple(pb)]
            t = (iso - va) / (vb - va)
            if t <= 0.0:
                key, pos = 3 * n_nodes + node_id(pa), pa.astype(float)
            elif t >= 1.0:
                key, pos = 3 * n_nodes + node_id(pb), pb.astype(float)
            else:
                axis = int(np.argmax(pb - pa))
                key, pos = 3 * node_id(pa) + axis, pa + t * (pb - pa)
            idx = keys.get(key)
            if idx is None:
                idx = len(verts)
                keys[key] = idx
                verts.append(origin + pos * spacing)
            edge_vert[e] = idx
        for tri in table:
            # the table winds clockwise in this corner layout; flip to face outward
            tris.append((edge_vert[tri[0]], edge_vert[tri[2]], edge_vert[tri[1]]))

    if not tris:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts = np.array(verts)
    tris = np.array(tris, dtype=np.int64)
    distinct = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[distinct]
    area2 = np.linalg.norm(np.cross(verts[tris[:, 1]] - verts[tris[:, 0]],
                                    verts[tris[:, 2]] - verts[tris[:, 0]]), axis=1)
    tris = tris[area2 > 0]
    used = np.unique(tris)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[tris])


def reconstruct_mesh(cps: ControlPointSet, offset: float, kernel: str, dims,
                     spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Mesh of the zero level set of the implicit function fitted to ``cps``."""
    dipoles = build_dipoles(cps, offset)
    lo = np.asarray(origin, dtype=float)
    hi = lo + (np.asarray(dims) - 1) * np.asarray(spacing, dtype=float)
    if np.any(dipoles.centers.min(axis=0) - offset < lo) or np.any(dipoles.centers.max(axis=0) + offset > hi):
        raise SpecOutOfGrid("reconstruction grid does not enclose the dipoles with an offset margin")
    model = solve_rbf(dipoles, kernel)
    grid = reconstruct_sdf_grid(model, dipoles, dims, spacing, origin)
    return marching_cubes(grid, 0.0)


# --- point to triangle distances ---------------------------------------------

def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle ``abc`` to ``p`` (all ``(n, 3)``), by Voronoi regions."""
    ab, ac, ap = b - a, c - a, p - a
    dot = lambda x, y: np.einsum("ij,ij->i", x, y)
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == 2 else value
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + (d1 / (d1 - d3))[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + (d2 / (d2 - d6))[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        assign(np.ones(len(p), dtype=bool), a + (vb * denom)[:, None] * ab + (vc * denom)[:, None] * ac)
    return out


def point_triangle_distance(p, a, b, c):
    return np.linalg.norm(p - closest_points_on_triangles(p, a, b, c), axis=1)


def brute_force_distances(points, mesh: TriangleMesh, chunk=256):
    """Exhaustive nearest-triangle distance for each point."""
    points = np.asarray(points, dtype=np.float64)
    tri = mesh.vertices[mesh.triangles]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        q = points[s:s + chunk]
        n_q, n_t = len(q), len(tri)
        pq = np.repeat(q, n_t, axis=0)
        a, b, c = (np.tile(tri[:, k], (n_q, 1)) for k in range(3))
        out[s:s + chunk] = point_triangle_distance(pq, a, b, c).reshape(n_q, n_t).min(axis=1)
    return out


class TriangleIndex:
    """Exact nearest-triangle queries pruned with a k-d tree over centroids.

    A triangle can only beat the current best distance ``U`` if its centroid
    lies within ``U + R`` of the query, ``R`` being the largest
    centroid-to-vertex radius in the mesh.
    """

    def __init__(self, mesh: TriangleMesh):
        if mesh.is_empty:
            raise EmptyMesh("cannot index an empty mesh")
        self.tri = mesh.vertices[mesh.triangles]
        self.centroids = self.tri.mean(axis=1)
        self.radius = float(np.linalg.norm(self.tri - self.centroids[:, None, :], axis=2).max())
        self.tree = cKDTree(self.centroids)

    def distances(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            return np.zeros(0)
        _, first = self.tree.query(points)
        t = self.tri[first]
        upper = point_triangle_distance(points, t[:, 0], t[:, 1], t[:, 2])
        cands = self.tree.query_ball_point(points, upper + self.radius * (1 + 1e-12) + 1e-12)
        lengths = np.array([len(c) for c in cands])
        flat = np.concatenate([np.asarray(c, dtype=np.int64) for c in cands])
        q = np.repeat(points, lengths, axis=0)
        t = self.tri[flat]
        d = point_triangle_distance(q, t[:, 0], t[:, 1], t[:, 2])
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        return np.minimum(np.minimum.reduceat(d, starts), upper)


def surface_to_surface_distance(a: TriangleMesh, b: TriangleMesh):
    """Symmetric summary of vertex-to-surface distances.

    Returns ``(mean, max, per_vertex_a)``: ``mean`` averages the two directed
    means, ``max`` is the larger directed maximum, and ``per_vertex_a`` holds
    the distance from each vertex of ``a`` to ``b``.
    """
    if a.is_empty or b.is_empty:
        raise EmptyMesh("surface distance needs two non-empty meshes")
    d_ab = TriangleIndex(b).distances(a.vertices)
    d_ba = TriangleIndex(a).distances(b.vertices)
    mean = 0.5 * (d_ab.mean() + d_ba.mean())
    return float(mean), float(max(d_ab.max(), d_ba.max())), d_ab


# --- mesh files --------------------------------------------------------------

def write_mesh(path, mesh: TriangleMesh):
    with open(path, "w", newline="\n") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for i, j, k in mesh.triangles + 1:
            fh.write(f"f {i} {j} {k}\n")


def read_mesh(path) -> TriangleMesh:
    verts, tris = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v" and len(parts) == 4:
                    verts.append([float(p) for p in parts[1:]])
                    continue
                if parts[0] == "f" and len(parts) == 4:
                    idx = [int(p) for p in parts[1:]]
                    if min(idx) < 1:
                        raise ValueError("face indices are 1-based")
                    tris.append([i - 1 for i in idx])
                    continue
            except ValueError as exc:
                raise ParseError(f"malformed {parts[0]!r} line: {exc}", path, lineno) from None
            raise ParseError(f"unrecognized line {line.rstrip()!r}", path, lineno)
    tris = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if tris.size and tris.max() >= len(verts):
        raise ParseError(f"face index {tris.max() + 1} exceeds vertex count {len(verts)}", path)
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), tris)
