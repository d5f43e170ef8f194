"""Triangulated domain surfaces and the covering machinery.

Shipped domains: the flat unit torus (regular n x n grid with one diagonal
per cell), the round unit sphere (subdivided icosahedron), and a planar unit
square patch with boundary (used for Dirichlet oracle problems and rescaled
bubble windows).  Domain distances are graph geodesics (Dijkstra over mesh
edges); all radius comparisons in the replacement flow are threshold tests
tolerant to the resulting metric distortion.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import dijkstra

from .constants import COVER_STRIDE_FACTORS, KAPPA0, MESH_LAMBDA


class MeshError(ValueError):
    pass


class ResolutionError(MeshError):
    pass


@dataclass
class SurfaceMesh:
    kind: str                    # "torus" | "sphere" | "patch"
    level: int
    vertices: np.ndarray         # chart positions: (V,2) torus/patch, (V,3) sphere
    triangles: np.ndarray        # (T,3) int
    edges: np.ndarray            # (E,2) int, sorted pairs
    edge_weights: np.ndarray     # (E,) cotangent weights, >= 0
    edge_lengths: np.ndarray     # (E,) geodesic edge lengths
    tri_areas: np.ndarray        # (T,)
    vertex_areas: np.ndarray     # (V,) barycentric lumping
    boundary_vertices: np.ndarray  # possibly empty
    periods: tuple = (1.0, 1.0)  # torus only
    grid_n: int = 0              # torus/patch grid resolution

    graph: csr_matrix = field(default=None, repr=False)
    # CSR adjacency over positive-weight edges, for solver sweeps
    nbr_indptr: np.ndarray = field(default=None, repr=False)
    nbr_indices: np.ndarray = field(default=None, repr=False)
    nbr_weights: np.ndarray = field(default=None, repr=False)
    vertex_colors: np.ndarray = field(default=None, repr=False)
    tri_chart: np.ndarray = field(default=None, repr=False)  # (T,3,2) local coords

    def __post_init__(self):
        self._finalize()

    # -- derived structure ---------------------------------------------------
    def _finalize(self):
        V = len(self.vertices)
        e = self.edges
        w = np.concatenate([self.edge_lengths, self.edge_lengths])
        r = np.concatenate([e[:, 0], e[:, 1]])
        c = np.concatenate([e[:, 1], e[:, 0]])
        self.graph = coo_matrix((w, (r, c)), shape=(V, V)).tocsr()

        pos = self.edge_weights > 0
        pe = e[pos]
        pw = self.edge_weights[pos]
        rows = np.concatenate([pe[:, 0], pe[:, 1]])
        cols = np.concatenate([pe[:, 1], pe[:, 0]])
        ws = np.concatenate([pw, pw])
        order = np.lexsort((cols, rows))
        rows, cols, ws = rows[order], cols[order], ws[order]
        self.nbr_indptr = np.searchsorted(rows, np.arange(V + 1))
        self.nbr_indices = cols
        self.nbr_weights = ws
        self.vertex_colors = self._color_vertices()

    def _color_vertices(self) -> np.ndarray:
        V = len(self.vertices)
        color = -np.ones(V, dtype=np.int64)
        for v in range(V):
            nbrs = self.nbr_indices[self.nbr_indptr[v]:self.nbr_indptr[v + 1]]
            used = set(color[nbrs].tolist()) - {-1}
            c = 0
            while c in used:
                c += 1
            color[v] = c
        return color

    def interior_vertices(self) -> np.ndarray:
        mask = np.ones(len(self.vertices), dtype=bool)
        mask[self.boundary_vertices] = False
        return np.where(mask)[0]

    def is_closed(self) -> bool:
        return len(self.boundary_vertices) == 0

    def mean_edge_length(self) -> float:
        return float(self.edge_lengths.mean())

    def total_area(self) -> float:
        return float(self.tri_areas.sum())

    def distances_from(self, sources, limit=np.inf) -> np.ndarray:
        return dijkstra(self.graph, indices=sources, limit=limit)

    def geodesic_distance(self, a: int, b: int) -> float:
        return float(dijkstra(self.graph, indices=a)[b])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.kind}:{self.level}:{self.grid_n}:{len(self.vertices)}:"
                 f"{len(self.triangles)}".encode())
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        return h.hexdigest()

    def sidecar(self) -> dict:
        return {"kind": self.kind, "level": self.level, "grid_n": self.grid_n,
                "periods": list(self.periods), "hash": self.content_hash()}

    def vertex_neighbors(self, v: int):
        sl = slice(self.nbr_indptr[v], self.nbr_indptr[v + 1])
        return self.nbr_indices[sl], self.nbr_weights[sl]

    def injectivity_bound(self) -> float:
        if self.kind == "sphere":
            return math.pi
        if self.kind == "torus":
            return min(self.periods) / 2.0
        return 2.0  # patch: anything beyond the diameter


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _cot(a, b):
    """Cotangent of the angle between edge vectors a, b (rowwise)."""
    cos = np.einsum("ij,ij->i", a, b)
    if a.shape[1] == 2:
        sin = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    else:
        sin = np.linalg.norm(np.cross(a, b), axis=1)
    return cos / np.maximum(sin, 1e-300)


def _assemble(kind, level, verts, tris, corner_vecs, tri_areas, edge_len_fn,
              grid_n=0, boundary=None, periods=(1.0, 1.0)):
    """Shared cotan-weight assembly from per-triangle corner edge vectors."""
    tris = np.asarray(tris, dtype=np.int64)
    edge_set = {}
    for t, (i, j, k) in enumerate(tris):
        for a, b in ((i, j), (j, k), (k, i)):
            key = (min(a, b), max(a, b))
            edge_set.setdefault(key, 0)
    edges = np.array(sorted(edge_set.keys()), dtype=np.int64)
    eindex = {tuple(e): n for n, e in enumerate(map(tuple, edges))}

    weights = np.zeros(len(edges))
    # corner_vecs[t] = (p0,p1,p2) local 2D/3D coords of triangle corners
    for t, (i, j, k) in enumerate(tris):
        p = corner_vecs[t]
        cots = [
            _cot((p[1] - p[0])[None, :], (p[2] - p[0])[None, :])[0],  # at corner 0
            _cot((p[0] - p[1])[None, :], (p[2] - p[1])[None, :])[0],  # at corner 1
            _cot((p[0] - p[2])[None, :], (p[1] - p[2])[None, :])[0],  # at corner 2
        ]
        # angle at corner m is opposite the edge not containing m
        opp = [(j, k), (i, k), (i, j)]
        for m, (a, b) in enumerate(opp):
            weights[eindex[(min(a, b), max(a, b))]] += 0.5 * cots[m]

    weights[np.abs(weights) < 1e-13] = 0.0
    if np.any(weights < -1e-9):
        raise MeshError("negative cotangent weight: triangulation not Delaunay-like")
    weights = np.maximum(weights, 0.0)

    edge_lengths = edge_len_fn(edges)
    vertex_areas = np.zeros(len(verts))
    np.add.at(vertex_areas, tris.ravel(),
              np.repeat(tri_areas / 3.0, 3))

    if boundary is None:
        boundary = np.array([], dtype=np.int64)

    mesh = SurfaceMesh(kind=kind, level=level, vertices=verts, triangles=tris,
                       edges=edges, edge_weights=weights,
                       edge_lengths=edge_lengths, tri_areas=tri_areas,
                       vertex_areas=vertex_areas,
                       boundary_vertices=np.asarray(boundary, dtype=np.int64),
                       periods=periods, grid_n=grid_n)
    mesh.tri_chart = np.array([cv[:, :2] if cv.shape[1] == 2 else None
                               for cv in corner_vecs]) \
        if corner_vecs[0].shape[1] == 2 else _sphere_tri_chart(verts, tris)
    return mesh


def _sphere_tri_chart(verts, tris):
    """Per-triangle orthonormal 2D frames on the flat (chordal) triangles."""
    p = verts[tris]  # (T,3,3)
    e1 = p[:, 1] - p[:, 0]
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    nrm = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    e2 = np.cross(nrm, e1)
    out = np.zeros((len(tris), 3, 2))
    for c in range(3):
        d = p[:, c] - p[:, 0]
        out[:, c, 0] = np.einsum("ij,ij->i", d, e1)
        out[:, c, 1] = np.einsum("ij,ij->i", d, e2)
    return out


def _torus_like_mesh(kind, level, n, periodic):
    """n x n grid with one diagonal per cell; unit square chart."""
    h = 1.0 / (n if periodic else n - 1)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    verts = np.stack([ii.ravel() * h, jj.ravel() * h], axis=1)
    idx = lambda i, j: (i % n) * n + (j % n) if periodic else i * n + j
    tris = []
    cells = range(n) if periodic else range(n - 1)
    for i in cells:
        for j in cells:
            v00, v10 = idx(i, j), idx(i + 1, j)
            v01, v11 = idx(i, j + 1), idx(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    tris = np.array(tris, dtype=np.int64)

    corner_vecs = []
    for (i, j, k) in tris:
        p = verts[[i, j, k]].copy()
        if periodic:
            # unwrap around the base corner
            for c in (1, 2):
                d = p[c] - p[0]
                d -= np.round(d)
                p[c] = p[0] + d
        corner_vecs.append(p - p[0])
    corner_vecs = [cv for cv in corner_vecs]
    tri_areas = np.full(len(tris), 0.5 * h * h)

    def edge_len(edges):
        d = np.abs(verts[edges[:, 0]] - verts[edges[:, 1]])
        if periodic:
            d = np.minimum(d, 1.0 - d)
        return np.hypot(d[:, 0], d[:, 1])

    boundary = None
    if not periodic:
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        on = (ii == 0) | (ii == n - 1) | (jj == 0) | (jj == n - 1)
        boundary = np.where(on.ravel())[0]
    return _assemble(kind, level, verts, tris, corner_vecs, tri_areas,
                     edge_len, grid_n=n, boundary=boundary)


def _icosahedron():
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v, f


def _subdivide(verts, tris):
    verts = list(map(tuple, verts))
    cache = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            m = np.asarray(verts[a]) + np.asarray(verts[b])
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(tuple(m))
        return cache[key]

    out = []
    for (i, j, k) in tris:
        a, b, c = midpoint(i, j), midpoint(j, k), midpoint(k, i)
        out += [(i, a, c), (j, b, a), (k, c, b), (a, b, c)]
    return np.array(verts), np.array(out, dtype=np.int64)


def _sphere_mesh(level):
    verts, tris = _icosahedron()
    for _ in range(level):
        verts, tris = _subdivide(verts, tris)
    corner_vecs = [verts[t] for t in tris]

    # spherical triangle areas (L'Huilier): the intrinsic area element
    p = verts[tris]
    a = 2 * np.arcsin(np.clip(np.linalg.norm(p[:, 1] - p[:, 2], axis=1) / 2, 0, 1))
    b = 2 * np.arcsin(np.clip(np.linalg.norm(p[:, 0] - p[:, 2], axis=1) / 2, 0, 1))
    c = 2 * np.arcsin(np.clip(np.linalg.norm(p[:, 0] - p[:, 1], axis=1) / 2, 0, 1))
    s = (a + b + c) / 2
    t4 = np.sqrt(np.clip(np.tan(s / 2) * np.tan((s - a) / 2)
                         * np.tan((s - b) / 2) * np.tan((s - c) / 2), 0, None))
    tri_areas = 4 * np.arctan(t4)

    def edge_len(edges):
        ch = np.linalg.norm(verts[edges[:, 0]] - verts[edges[:, 1]], axis=1)
        return 2 * np.arcsin(np.clip(ch / 2, 0, 1))

    return _assemble("sphere", level, verts, tris, corner_vecs, tri_areas,
                     edge_len)


def build_mesh(kind: str, level: int) -> SurfaceMesh:
    """Flat torus (n = 2^(level+3) grid) or round sphere (subdivided icosahedron)."""
    if not 0 <= level <= 8:
        raise MeshError(f"level {level} outside [0, 8]")
    if kind == "torus":
        return _torus_like_mesh("torus", level, 2 ** (level + 3), periodic=True)
    if kind == "sphere":
        return _sphere_mesh(level)
    raise MeshError(f"unknown mesh kind {kind!r}")


def build_patch_mesh(n: int) -> SurfaceMesh:
    """Unit-square grid with boundary (n x n vertices), for disk problems."""
    if n < 3:
        raise MeshError("patch needs n >= 3")
    return _torus_like_mesh("patch", 0, n, periodic=False)


# ---------------------------------------------------------------------------
# Geodesic balls and coverings
# ---------------------------------------------------------------------------

def geodesic_ball(mesh: SurfaceMesh, center: int, r: float) -> np.ndarray:
    """Vertices at graph-geodesic distance <= r from the center vertex."""
    if r < 0:
        raise MeshError("radius must be nonnegative")
    if r >= mesh.injectivity_bound():
        raise MeshError(f"radius {r} exceeds injectivity bound")
    if r == 0:
        return np.array([center], dtype=np.int64)
    d = mesh.distances_from(center, limit=r * (1 + 1e-12))
    return np.where(d <= r)[0]


@dataclass
class BallCover:
    k: int
    radius: float
    centers: np.ndarray            # vertex ids
    members: list                  # vertex-id arrays, radius balls
    members2: list                 # vertex-id arrays, doubled balls
    mesh_hash: str

    def m(self) -> int:
        return len(self.centers)


@dataclass
class PartitionedCover:
    cover: BallCover
    classes: list                  # list of index arrays into cover.centers
    Lambda: int


def _candidate_orders(mesh: SurfaceMesh, k: int):
    """Vertex visit orders for the greedy center selection: structured
    sublattice-first orders (grids) plus the plain index order."""
    V = len(mesh.vertices)
    orders = []
    if mesh.kind in ("torus", "patch") and mesh.grid_n:
        n = mesh.grid_n
        r = 2.0 ** (-k)
        for alpha in COVER_STRIDE_FACTORS:
            p = max(1, int(round(alpha * r * n)))
            lattice = []
            for i in range(0, n, p):
                for j in range(0, n, p):
                    lattice.append(i * n + j)
            seen = set(lattice)
            rest = [v for v in range(V) if v not in seen]
            orders.append(np.array(lattice + rest, dtype=np.int64))
    orders.append(np.arange(V, dtype=np.int64))
    return orders


def _greedy_cover(mesh: SurfaceMesh, k: int, order: np.ndarray) -> BallCover:
    r = 2.0 ** (-k)
    V = len(mesh.vertices)
    dist_to_centers = np.full(V, np.inf)
    centers = []
    for v in order:
        if dist_to_centers[v] >= r:
            centers.append(int(v))
            d = mesh.distances_from(int(v), limit=2.0 * r * (1 + 1e-12))
            dist_to_centers = np.minimum(dist_to_centers, d)
    centers = np.array(centers, dtype=np.int64)
    D = mesh.distances_from(centers, limit=2.0 * r * (1 + 1e-12))
    if centers.size == 1:
        D = D[None, :]
    members = [np.where(D[i] <= r)[0] for i in range(len(centers))]
    members2 = [np.where(D[i] <= 2.0 * r)[0] for i in range(len(centers))]
    return BallCover(k=k, radius=r, centers=centers, members=members,
                     members2=members2, mesh_hash=mesh.content_hash())


def _conflict_graph(cover: BallCover) -> np.ndarray:
    m = cover.m()
    key = [set(mem.tolist()) for mem in cover.members2]
    adj = np.zeros((m, m), dtype=bool)
    for i in range(m):
        for j in range(i + 1, m):
            if key[i] & key[j]:
                adj[i, j] = adj[j, i] = True
    return adj


def _dsatur(adj: np.ndarray) -> np.ndarray:
    m = len(adj)
    color = -np.ones(m, dtype=np.int64)
    sat = [set() for _ in range(m)]
    deg = adj.sum(1)
    for _ in range(m):
        best, key = -1, None
        for i in range(m):
            if color[i] >= 0:
                continue
            cand = (len(sat[i]), deg[i], -i)
            if key is None or cand > key:
                best, key = i, cand
        used = sat[best]
        c = 0
        while c in used:
            c += 1
        color[best] = c
        for j in np.where(adj[best])[0]:
            sat[j].add(c)
    return color


def greedy_degeneracy_coloring_bound(adj: np.ndarray) -> int:
    """Upper bound on the chromatic number: greedy along a degeneracy order."""
    m = len(adj)
    deg = adj.sum(1).astype(np.int64)
    removed = np.zeros(m, dtype=bool)
    order = []
    for _ in range(m):
        i = int(np.argmin(np.where(removed, np.iinfo(np.int64).max, deg)))
        removed[i] = True
        order.append(i)
        deg[adj[i]] -= 1
    color = -np.ones(m, dtype=np.int64)
    for i in reversed(order):
        used = set(color[adj[i]].tolist()) - {-1}
        c = 0
        while c in used:
            c += 1
        color[i] = c
    return int(color.max()) + 1


def build_cover(mesh: SurfaceMesh, k: int) -> BallCover:
    """Greedy maximal separated center set covering the mesh with 2^-k balls.

    Among the candidate visit orders (structured sublattice-first for grids,
    plain index order otherwise) the one whose cover needs fewest partition
    classes wins; ties break toward the earliest candidate, so the result is
    deterministic.
    """
    r = 2.0 ** (-k)
    if r < 3.0 * mesh.mean_edge_length():
        raise ResolutionError(
            f"scale 2^-{k} under-resolved: r={r:.4g} < 3h={3 * mesh.mean_edge_length():.4g}")
    best = None
    for order in _candidate_orders(mesh, k):
        cover = _greedy_cover(mesh, k, order)
        lam = int(_dsatur(_conflict_graph(cover)).max()) + 1
        if best is None or lam < best[0]:
            best = (lam, cover)
    return best[1]


def partition_cover(cover: BallCover) -> PartitionedCover:
    """Jost partition: classes of the cover whose doubled balls are disjoint.

    DSATUR greedy coloring of the doubled-ball intersection graph; the class
    count Lambda satisfies Lambda <= 1 + max degree.
    """
    adj = _conflict_graph(cover)
    color = _dsatur(adj)
    lam = int(color.max()) + 1
    classes = [np.where(color == c)[0] for c in range(lam)]
    return PartitionedCover(cover=cover, classes=classes, Lambda=lam)


def cover_separation_ok(mesh: SurfaceMesh, cover: BallCover) -> bool:
    """Vitali separation: centers pairwise >= 2 * 2^-(k+3) apart."""
    if cover.m() == 1:
        return True
    D = mesh.distances_from(cover.centers)
    D = D[:, cover.centers]
    np.fill_diagonal(D, np.inf)
    return bool(D.min() >= 2.0 * 2.0 ** (-(cover.k + 3)) - 1e-12)


def cover_coverage_ok(cover: BallCover, n_vertices: int) -> bool:
    seen = np.zeros(n_vertices, dtype=bool)
    for mem in cover.members:
        seen[mem] = True
    return bool(seen.all())


def count_balls_in_window(mesh: SurfaceMesh, cover: BallCover,
                          window_vertices: np.ndarray, R: float):
    """|J| of Lemma-4.6: cover balls meeting the rescaled window D_R.

    Returns (count, bound_ok) with bound |J| <= 2^10 R^2; the bound is only
    asserted by callers at fine scales.
    """
    win = set(np.asarray(window_vertices).tolist())
    count = sum(1 for mem in cover.members if win & set(mem.tolist()))
    return count, count <= 1024.0 * R * R


def jost_constant(kind: str, level: int = 3, k_range=None) -> dict:
    """Measure the partition class count over resolved scales; the recorded
    mesh-kind constant is the max over k."""
    mesh = build_mesh(kind, level)
    kappa0 = KAPPA0[kind]
    if k_range is None:
        kmax = int(math.floor(-math.log2(3.0 * mesh.mean_edge_length())))
        k_range = range(kappa0, kmax + 1)
    out = {}
    for k in k_range:
        cover = build_cover(mesh, k)
        out[k] = partition_cover(cover).Lambda
    out["max"] = max(v for kk, v in out.items() if kk != "max")
    return out


def mesh_lambda(kind: str) -> int:
    return MESH_LAMBDA[kind]
