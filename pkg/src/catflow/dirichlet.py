"""Local Dirichlet solver into a small target ball.

The solver runs monotone energy-decreasing Gauss-Seidel sweeps: vertices are
grouped into independent color blocks (no positive-weight edge inside a
block), and every visit replaces the vertex value by the exact minimizer of
its local energy, the cotangent-weighted Fréchet mean of its neighbors
projected into the admissible ball.  Block updates of pairwise non-adjacent
vertices preserve the exact-monotone-decrease guarantee of sequential
Gauss-Seidel while vectorizing; the fixed block order keeps runs
deterministic.

Uniqueness of the limit is backed by the energy-convexity certificate and
audited by the two-seed test; the maximum principle and a Lipschitz proxy
are evaluated on every solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import SOLVE_MAX_SWEEPS, SOLVE_TOL
from .energy import DiscreteMap, energy, region_boundary
from .mesh import MeshError, SurfaceMesh
from .targets import (
    AdmissibilityError,
    PointArray,
    TargetPoint,
    TargetSpace,
)


class BudgetExceededError(RuntimeError):
    """Sweep budget exhausted; carries the partial state."""

    def __init__(self, message, partial_map, report):
        super().__init__(message)
        self.partial_map = partial_map
        self.report = report


@dataclass
class DirichletProblem:
    mesh: SurfaceMesh
    space: TargetSpace
    interior: np.ndarray           # vertex ids to be solved
    boundary: np.ndarray           # frozen ring vertex ids
    boundary_values: PointArray
    center: TargetPoint            # ball center P
    rho: float                     # ball radius, in (0, pi/4)

    def __post_init__(self):
        self.interior = np.asarray(self.interior, dtype=np.int64)
        self.boundary = np.asarray(self.boundary, dtype=np.int64)
        if not (0 < self.rho < math.pi / 4):
            raise AdmissibilityError(f"rho={self.rho} outside (0, pi/4)")
        if self.interior.size == 0:
            raise MeshError("empty interior")
        if self.boundary.size == 0:
            raise MeshError("problem needs a nonempty boundary ring")
        c = PointArray.tile(self.center, len(self.boundary_values))
        d = self.space.distance(c, self.boundary_values)
        if np.any(d > self.rho + 1e-12):
            raise AdmissibilityError(
                "boundary data leaves the closed rho-ball around the center")


def ball_problem(mesh: SurfaceMesh, space: TargetSpace, u: DiscreteMap,
                 region: np.ndarray, center: TargetPoint,
                 rho: float) -> DirichletProblem:
    """Dirichlet problem on a vertex region with boundary data from u."""
    region = np.asarray(region, dtype=np.int64)
    ring = region_boundary(mesh, region)
    interior = np.setdiff1d(region, ring)
    return DirichletProblem(mesh=mesh, space=space, interior=interior,
                            boundary=ring, boundary_values=u.points.take(ring),
                            center=center, rho=rho)


@dataclass
class SolveReport:
    iterations: int
    final_energy: float
    energy_trace: list
    max_move_last: float
    converged: bool
    certificate: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_energy": self.final_energy,
            "energy_trace": self.energy_trace,
            "max_move_last": self.max_move_last,
            "converged": self.converged,
            "certificate": self.certificate,
        }


def boundary_harmonic_seed(prob: DirichletProblem) -> PointArray:
    """Constant seed at the Fréchet mean of the boundary values: always
    admissible in the closed ball."""
    w = np.ones(len(prob.boundary_values))
    m = prob.space.weighted_mean(prob.boundary_values, w)
    m = prob.space.project_ball(prob.center, prob.rho,
                                PointArray.single(m)).point(0)
    return PointArray.tile(m, len(prob.mesh.vertices))


def vertex_update(u: DiscreteMap, vertex: int, prob: DirichletProblem) -> TargetPoint:
    """Exact local minimizer over the admissible ball at one interior vertex:
    the weighted Fréchet mean of the neighbor values, then ball projection."""
    nbrs, w = u.mesh.vertex_neighbors(vertex)
    pts = u.points.take(nbrs)
    m = u.space.weighted_mean(pts, w)
    return u.space.project_ball(prob.center, prob.rho,
                                PointArray.single(m)).point(0)


def _interior_blocks(mesh: SurfaceMesh, interior: np.ndarray):
    colors = mesh.vertex_colors[interior]
    blocks = []
    for c in np.unique(colors):
        blocks.append(interior[colors == c])
    return blocks


def _flatten_neighbors(mesh: SurfaceMesh, verts: np.ndarray):
    parts_idx, parts_w, indptr = [], [], [0]
    for v in verts:
        sl = slice(mesh.nbr_indptr[v], mesh.nbr_indptr[v + 1])
        parts_idx.append(mesh.nbr_indices[sl])
        parts_w.append(mesh.nbr_weights[sl])
        indptr.append(indptr[-1] + (sl.stop - sl.start))
    return (np.concatenate(parts_idx), np.concatenate(parts_w),
            np.array(indptr, dtype=np.int64))


def solve_dirichlet(prob: DirichletProblem, seed="boundary-harmonic-seed",
                    tol: float = SOLVE_TOL,
                    max_sweeps: int = SOLVE_MAX_SWEEPS,
                    certify: bool = True):
    """Gauss-Seidel minimization until the largest vertex move is below tol.

    Returns (DiscreteMap, SolveReport).  The output image stays inside the
    closed rho-ball (ball projection never increases the local energy since
    every neighbor value lies in the convex ball).  Raises
    BudgetExceededError with the partial state if max_sweeps is exhausted.
    """
    mesh, sp = prob.mesh, prob.space
    # inner Fréchet iterations must outresolve the sweep stopping rule
    mean_tol = min(1e-12, tol / 10.0)
    values = None
    if isinstance(seed, str):
        if seed != "boundary-harmonic-seed":
            raise ValueError(f"unknown seed {seed!r}")
        values = boundary_harmonic_seed(prob)
    elif isinstance(seed, DiscreteMap):
        values = seed.points.copy()
    else:
        values = seed.copy()
    values.put(prob.boundary, prob.boundary_values)
    # clamp the seed into the admissible ball
    values.put(prob.interior,
               sp.project_ball(prob.center, prob.rho, values.take(prob.interior)))

    u = DiscreteMap(mesh, sp, values)
    region = np.concatenate([prob.interior, prob.boundary])
    blocks = _interior_blocks(mesh, prob.interior)
    flat = [_flatten_neighbors(mesh, b) for b in blocks]

    e0 = energy(u, region)
    trace = [e0]
    it = 0
    max_move = np.inf
    while max_move >= tol:
        if it >= max_sweeps:
            report = SolveReport(iterations=it, final_energy=trace[-1],
                                 energy_trace=trace, max_move_last=max_move,
                                 converged=False)
            raise BudgetExceededError(
                f"no convergence within {max_sweeps} sweeps", u, report)
        max_move = 0.0
        for b, (nidx, nw, indptr) in zip(blocks, flat):
            cur = u.points.take(b)
            nbr_pts = u.points.take(nidx)
            means = sp.mean_batch(nbr_pts, indptr, nw, cur, tol=mean_tol)
            means = sp.project_ball(prob.center, prob.rho, means)
            move = sp.distance(cur, means)
            if move.size:
                max_move = max(max_move, float(move.max()))
            u.points.put(b, means)
        it += 1
        trace.append(energy(u, region))

    report = SolveReport(iterations=it, final_energy=trace[-1],
                         energy_trace=trace,
                         max_move_last=float(max_move), converged=True)
    if certify:
        report.certificate = _certificate(u, prob)
    return u, report


def _certificate(u: DiscreteMap, prob: DirichletProblem) -> dict:
    cert = {}
    checks = {}
    for frac in (0.25, 0.5, 0.75):
        sigma = frac * prob.rho
        ok, excess = maximum_principle_check(u, prob, sigma)
        checks[f"sigma={frac}rho"] = {"applicable": bool(ok is not None),
                                      "pass": bool(ok) if ok is not None else None,
                                      "worst_excess": excess}
    cert["max_principle"] = checks
    cert["lipschitz_proxy"] = lipschitz_proxy(u, prob, margin=2)
    return cert


def maximum_principle_check(u: DiscreteMap, prob: DirichletProblem,
                            sigma: float):
    """If the boundary data sits in the sigma-ball, the solution must too
    (within 1e-9).  Returns (pass or None if inapplicable, worst excess)."""
    sp = u.space
    c_b = PointArray.tile(prob.center, len(prob.boundary))
    db = sp.distance(c_b, u.points.take(prob.boundary))
    if np.any(db > sigma + 1e-12):
        return None, 0.0
    c_i = PointArray.tile(prob.center, len(prob.interior))
    di = sp.distance(c_i, u.points.take(prob.interior))
    worst = float(np.max(di - sigma, initial=0.0))
    return worst <= 1e-9, worst


def lipschitz_proxy(u: DiscreteMap, prob: DirichletProblem,
                    margin: int = 2) -> float:
    """max over interior edges (at combinatorial margin from the ring) of
    target distance over edge length."""
    mesh = u.mesh
    depth = np.full(len(mesh.vertices), np.iinfo(np.int64).max, dtype=np.int64)
    depth[prob.boundary] = 0
    frontier = set(prob.boundary.tolist())
    interior_set = set(prob.interior.tolist())
    level = 0
    while frontier:
        nxt = set()
        for v in frontier:
            nbrs = mesh.nbr_indices[mesh.nbr_indptr[v]:mesh.nbr_indptr[v + 1]]
            for nb in nbrs:
                if nb in interior_set and depth[nb] > level + 1:
                    depth[nb] = level + 1
                    nxt.add(int(nb))
        frontier = nxt
        level += 1
    e = mesh.edges
    deep = (depth[e[:, 0]] > margin) & (depth[e[:, 1]] > margin) \
        & (depth[e[:, 0]] < np.iinfo(np.int64).max) \
        & (depth[e[:, 1]] < np.iinfo(np.int64).max)
    if not deep.any():
        return 0.0
    d = u.space.distance(u.points.take(e[deep, 0]), u.points.take(e[deep, 1]))
    return float(np.max(d / mesh.edge_lengths[deep]))


def two_seed_uniqueness(prob: DirichletProblem, rng: np.random.Generator,
                        tol: float = SOLVE_TOL):
    """Solve from the default seed and from a random admissible seed; report
    the vertex-wise distance between the two limits (Theorem-B.1 uniqueness)."""
    u_a, _ = solve_dirichlet(prob, tol=tol, certify=False)
    n = len(prob.mesh.vertices)
    rand_pts = prob.space.sample_near(
        PointArray.tile(prob.center, n), 0.9 * prob.rho, rng)
    u_b, _ = solve_dirichlet(prob, seed=rand_pts, tol=tol, certify=False)
    d = prob.space.distance(u_a.points.take(prob.interior),
                            u_b.points.take(prob.interior))
    return float(d.max()), u_a, u_b


# ---------------------------------------------------------------------------
# Scalar cotan-Laplace oracle (the independent route for geodesic-valued data)
# ---------------------------------------------------------------------------

def scalar_harmonic_extension(mesh: SurfaceMesh, interior: np.ndarray,
                              boundary: np.ndarray,
                              boundary_scalars: np.ndarray) -> np.ndarray:
    """Solve the cotangent-Laplace Dirichlet problem for a scalar field.

    Independent oracle: sparse direct solve of the linear system
    sum_y w_xy (f(x) - f(y)) = 0 at interior vertices.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.linalg import spsolve

    interior = np.asarray(interior, dtype=np.int64)
    boundary = np.asarray(boundary, dtype=np.int64)
    pos = np.full(len(mesh.vertices), -1, dtype=np.int64)
    pos[interior] = np.arange(len(interior))
    f = np.zeros(len(mesh.vertices))
    f[boundary] = boundary_scalars

    rows, cols, vals = [], [], []
    rhs = np.zeros(len(interior))
    bset = np.zeros(len(mesh.vertices), dtype=bool)
    bset[boundary] = True
    iset = np.zeros(len(mesh.vertices), dtype=bool)
    iset[interior] = True
    for v in interior:
        sl = slice(mesh.nbr_indptr[v], mesh.nbr_indptr[v + 1])
        nbrs = mesh.nbr_indices[sl]
        ws = mesh.nbr_weights[sl]
        rows.append(pos[v]); cols.append(pos[v]); vals.append(ws.sum())
        for nb, wv in zip(nbrs, ws):
            if iset[nb]:
                rows.append(pos[v]); cols.append(pos[nb]); vals.append(-wv)
            elif bset[nb]:
                rhs[pos[v]] += wv * f[nb]
    A = coo_matrix((vals, (rows, cols)),
                   shape=(len(interior), len(interior))).tocsr()
    f[interior] = spsolve(A, rhs)
    return f
