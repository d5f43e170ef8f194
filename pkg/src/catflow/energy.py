"""Discrete Korevaar-Schoen energy and the pullback machinery.

The energy of a map u assigning a target point to every mesh vertex is the
cotangent-weighted edge sum  E(u) = sum_e w_e d^2(u(x), u(y)).  For maps into
a geodesic this collapses to the scalar cotan Dirichlet energy, which is the
test oracle used throughout.  The pullback tensor is recovered per triangle
from squared target distances along the three edges; its trace integrates to
the energy exactly (both are the same linear form in the squared edge
lengths), and its deviatoric part yields the Hopf field and the conformality
defect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mesh import MeshError, SurfaceMesh
from .targets import PointArray, TargetPoint, TargetSpace, make_space


@dataclass
class DiscreteMap:
    """Vertex-wise assignment of target points; the discrete finite-energy map."""

    mesh: SurfaceMesh
    space: TargetSpace
    points: PointArray

    def __post_init__(self):
        if len(self.points) != len(self.mesh.vertices):
            raise MeshError("map must assign a value to every vertex")
        self.space.validate(self.points)
        self.points = self.space.canonicalize(self.points)

    def copy(self) -> "DiscreteMap":
        return DiscreteMap(self.mesh, self.space, self.points.copy())

    def value(self, v: int) -> TargetPoint:
        return self.points.point(v)

    def to_json(self) -> dict:
        return {
            "mesh": self.mesh.sidecar(),
            "target": self.space.descriptor(),
            "values": [[int(c)] + [float(x) for x in row]
                       for c, row in zip(self.points.charts, self.points.coords)],
        }

    @staticmethod
    def from_json(obj: dict, mesh: SurfaceMesh) -> "DiscreteMap":
        if obj["mesh"]["hash"] != mesh.content_hash():
            raise MeshError("map file does not match the provided mesh")
        desc = dict(obj["target"])
        kind = desc.pop("kind")
        space = make_space(kind, **desc)
        vals = obj["values"]
        charts = np.array([int(v[0]) for v in vals], dtype=np.int64)
        coords = np.array([v[1:] for v in vals], dtype=float)
        return DiscreteMap(mesh, space, PointArray(charts, coords))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, sort_keys=True)

    @staticmethod
    def load(path, mesh: SurfaceMesh) -> "DiscreteMap":
        with open(path, encoding="utf-8") as f:
            return DiscreteMap.from_json(json.load(f), mesh)


def constant_map(mesh: SurfaceMesh, space: TargetSpace, p: TargetPoint) -> DiscreteMap:
    return DiscreteMap(mesh, space, PointArray.tile(p, len(mesh.vertices)))


def edge_sq_distances(u: DiscreteMap, edges: np.ndarray = None) -> np.ndarray:
    e = u.mesh.edges if edges is None else edges
    return u.space.distance(u.points.take(e[:, 0]), u.points.take(e[:, 1])) ** 2


def _region_edge_mask(mesh: SurfaceMesh, region) -> np.ndarray:
    inset = np.zeros(len(mesh.vertices), dtype=bool)
    inset[np.asarray(region, dtype=np.int64)] = True
    return inset[mesh.edges[:, 0]] & inset[mesh.edges[:, 1]]


def energy(u: DiscreteMap, region=None) -> float:
    """Total (or region-restricted) discrete energy, fixed summation order."""
    d2 = edge_sq_distances(u)
    w = u.mesh.edge_weights
    if region is not None:
        mask = _region_edge_mask(u.mesh, region)
        return float(np.sum(w[mask] * d2[mask]))
    return float(np.sum(w * d2))


def vertex_energy_density(u: DiscreteMap) -> np.ndarray:
    """Per-vertex energy density: half-edge attribution over vertex areas."""
    d2 = edge_sq_distances(u)
    contrib = u.mesh.edge_weights * d2 / 2.0
    dens = np.zeros(len(u.mesh.vertices))
    np.add.at(dens, u.mesh.edges[:, 0], contrib)
    np.add.at(dens, u.mesh.edges[:, 1], contrib)
    return dens / np.maximum(u.mesh.vertex_areas, 1e-300)


# ---------------------------------------------------------------------------
# Pullback tensor
# ---------------------------------------------------------------------------

@dataclass
class PullbackTensor:
    """Per-triangle symmetric tensor components (squared radians per unit
    squared domain length in the triangle chart)."""

    pi11: np.ndarray
    pi12: np.ndarray
    pi22: np.ndarray

    def trace(self) -> np.ndarray:
        return self.pi11 + self.pi22

    def deviator_norm(self) -> np.ndarray:
        return np.sqrt((self.pi11 - self.pi22) ** 2 + (2.0 * self.pi12) ** 2)


def _tri_edge_data(u: DiscreteMap, chart: np.ndarray):
    tris = u.mesh.triangles
    pairs = [(0, 1), (0, 2), (1, 2)]
    A = np.empty((len(tris), 3, 3))
    rhs = np.empty((len(tris), 3))
    for row, (a, b) in enumerate(pairs):
        ev = chart[:, b, :] - chart[:, a, :]
        A[:, row, 0] = ev[:, 0] ** 2
        A[:, row, 1] = 2.0 * ev[:, 0] * ev[:, 1]
        A[:, row, 2] = ev[:, 1] ** 2
        d = u.space.distance(u.points.take(tris[:, a]), u.points.take(tris[:, b]))
        rhs[:, row] = d ** 2
    return A, rhs


def pullback_tensor(u: DiscreteMap, chart: np.ndarray = None) -> PullbackTensor:
    """Solve the 3x3 per-triangle system mapping the symmetric tensor to the
    squared target lengths of the triangle edges (polarization identity)."""
    if chart is None:
        chart = u.mesh.tri_chart
    A, rhs = _tri_edge_data(u, chart)
    g = np.linalg.solve(A, rhs[..., None])[..., 0]
    return PullbackTensor(pi11=g[:, 0], pi12=g[:, 1], pi22=g[:, 2])


def pullback_trace_integral(u: DiscreteMap) -> float:
    pi = pullback_tensor(u)
    return float(np.sum(u.mesh.tri_areas * pi.trace()))


def conformality_defect(u: DiscreteMap) -> float:
    """L1 norm of the deviatoric pullback over energy; 0 for constant maps."""
    e = energy(u)
    if e <= 0.0:
        return 0.0
    pi = pullback_tensor(u)
    return float(np.sum(u.mesh.tri_areas * pi.deviator_norm()) / e)


def conformal_factor(u: DiscreteMap) -> np.ndarray:
    """lambda = (pi11 + pi22)/2 per triangle."""
    return pullback_tensor(u).trace() / 2.0


# ---------------------------------------------------------------------------
# Hopf differential
# ---------------------------------------------------------------------------

@dataclass
class HopfField:
    phi: np.ndarray          # complex, per triangle (nan outside mask)
    mask: np.ndarray         # triangles where the coherent chart is valid
    dbar_l1: float           # L1 norm of the discrete dbar defect
    dbar_residual: float     # dbar_l1 normalized by energy
    phi_l1: float            # L1 norm of phi over the masked triangles


def _coherent_chart(u: DiscreteMap):
    """Chart-coherent per-triangle 2D coordinates plus a validity mask.

    Torus/patch triangles already share the global flat chart.  Sphere
    domains use stereographic projection from the north pole; triangles too
    close to the pole are masked out.
    """
    mesh = u.mesh
    if mesh.kind in ("torus", "patch"):
        return mesh.tri_chart, np.ones(len(mesh.triangles), dtype=bool)
    v = mesh.vertices
    denom = 1.0 - v[:, 2]
    ok = denom > 0.15
    z = np.zeros((len(v), 2))
    z[ok, 0] = v[ok, 0] / denom[ok]
    z[ok, 1] = v[ok, 1] / denom[ok]
    tris = mesh.triangles
    mask = ok[tris].all(axis=1)
    chart = z[tris]
    return chart, mask


def hopf_differential(u: DiscreteMap) -> HopfField:
    """phi = pi11 - pi22 - 2i pi12 in a coherent chart, with its discrete
    Cauchy-Riemann (dbar) defect."""
    mesh = u.mesh
    chart, mask = _coherent_chart(u)
    safe_chart = chart.copy()
    if not mask.all():
        # masked (near-pole) triangles get a dummy nondegenerate chart
        safe_chart[~mask] = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    pi = pullback_tensor(u, chart=safe_chart)
    phi = pi.pi11 - pi.pi22 - 2.0j * pi.pi12
    phi = np.where(mask, phi, np.nan + 0j)

    # chart-area weighted vertex averages of phi, then affine gradients;
    # phi dz^2 lives on the chart, so its norms use the chart area element
    tris = mesh.triangles
    V = len(mesh.vertices)
    e1c = safe_chart[:, 1, :] - safe_chart[:, 0, :]
    e2c = safe_chart[:, 2, :] - safe_chart[:, 0, :]
    areas = 0.5 * np.abs(e1c[:, 0] * e2c[:, 1] - e1c[:, 1] * e2c[:, 0])
    wsum = np.zeros(V)
    acc = np.zeros(V, dtype=complex)
    for c in range(3):
        np.add.at(wsum, tris[mask, c], areas[mask])
        np.add.at(acc, tris[mask, c], areas[mask] * phi[mask])
    vert_phi = np.where(wsum > 0, acc / np.maximum(wsum, 1e-300), 0.0 + 0j)

    e1 = chart[:, 1, :] - chart[:, 0, :]
    e2 = chart[:, 2, :] - chart[:, 0, :]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    f1 = vert_phi[tris[:, 1]] - vert_phi[tris[:, 0]]
    f2 = vert_phi[tris[:, 2]] - vert_phi[tris[:, 0]]
    safe = np.where(np.abs(det) < 1e-300, 1.0, det)
    gx = (f1 * e2[:, 1] - f2 * e1[:, 1]) / safe
    gy = (f2 * e1[:, 0] - f1 * e2[:, 0]) / safe
    dbar = 0.5 * (gx + 1j * gy)

    # interior triangles only: both the triangle and its vertices' stars valid
    good_v = wsum > 0
    interior = mask & good_v[tris].all(axis=1)
    if mesh.kind == "patch":
        bset = np.zeros(V, dtype=bool)
        bset[mesh.boundary_vertices] = True
        interior &= ~bset[tris].any(axis=1)
    dbar_l1 = float(np.sum(areas[interior] * np.abs(dbar[interior])))
    phi_l1 = float(np.sum(areas[mask] * np.abs(phi[mask])))
    e = energy(u)
    return HopfField(phi=phi, mask=mask, dbar_l1=dbar_l1,
                     dbar_residual=dbar_l1 / max(e, 1e-300), phi_l1=phi_l1)


# ---------------------------------------------------------------------------
# Traces and regions
# ---------------------------------------------------------------------------

def region_boundary(mesh: SurfaceMesh, region: np.ndarray) -> np.ndarray:
    """Vertices outside the region adjacent to it (the frozen ring)."""
    region = np.asarray(region, dtype=np.int64)
    inset = np.zeros(len(mesh.vertices), dtype=bool)
    inset[region] = True
    e = mesh.edges
    ring = np.zeros(len(mesh.vertices), dtype=bool)
    m01 = inset[e[:, 0]] & ~inset[e[:, 1]]
    m10 = inset[e[:, 1]] & ~inset[e[:, 0]]
    ring[e[:, 1][m01]] = True
    ring[e[:, 0][m10]] = True
    out = np.where(ring)[0]
    if mesh.kind == "patch":
        onb = np.intersect1d(region, mesh.boundary_vertices)
        out = np.union1d(out, onb)
    return out


def restrict_trace(u: DiscreteMap, region: np.ndarray):
    """Boundary data of u on the ring around a region: (vertex ids, values)."""
    ring = region_boundary(u.mesh, region)
    if ring.size == 0:
        raise MeshError("region has empty vertex boundary")
    return ring, u.points.take(ring)


def map_interpolate(u0: DiscreteMap, u1: DiscreteMap, eta) -> DiscreteMap:
    """Pointwise geodesic interpolation (1-eta) u0 + eta u1."""
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 0:
        eta = np.full(len(u0.points), float(eta))
    pts = u0.space.geodesic(u0.points, u1.points, eta)
    return DiscreteMap(u0.mesh, u0.space, pts)


def map_l2_distance(u0: DiscreteMap, u1: DiscreteMap) -> float:
    d = u0.space.distance(u0.points, u1.points)
    return float(np.sqrt(np.sum(u0.mesh.vertex_areas * d * d)))


def map_max_distance(u0: DiscreteMap, u1: DiscreteMap) -> float:
    return float(u0.space.distance(u0.points, u1.points).max())
