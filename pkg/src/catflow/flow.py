"""Harmonic replacement iteration with the convergence/bubbling dichotomy.

Each cycle selects the largest dyadic replacement radius whose doubled balls
all have target images of circumradius at most 3^-Lambda rho, rebuilds the
ball cover and its Jost partition at that radius, and sweeps the partition
classes, replacing the map on every doubled ball of the class by its local
Dirichlet solution.  Termination is a certificate: Converged (energy ladder
flat, L2 increments and harmonicity residual under tolerance), Bubbled (the
radius hit the mesh resolution floor; a witness pair and rescaled windows
are extracted), or BudgetExceeded (cycle budget, never silent).

With the honestly computed Jost constants (Lambda ~ 18) the containment
threshold 3^-Lambda rho is around 1e-9 radians, so the convergent branch
only engages for maps with oscillation at that scale; builtin "bump" sizes
itself accordingly.  The thresholds are kept faithful rather than softened.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .constants import (
    EPSILON_OVER_RHO,
    FLOW_HARMONICITY_TOL,
    FLOW_L2_TOL,
    FLOW_MAX_CYCLES,
    FLOW_TOL_FACTOR,
    KAPPA0,
    MESH_LAMBDA,
)
from .diagnostics import harmonicity_residual
from .dirichlet import ball_problem, solve_dirichlet
from .energy import (
    DiscreteMap,
    conformality_defect,
    energy,
    hopf_differential,
    map_l2_distance,
)
from .mesh import (
    BallCover,
    MeshError,
    PartitionedCover,
    SurfaceMesh,
    build_cover,
    build_patch_mesh,
    count_balls_in_window,
    geodesic_ball,
    partition_cover,
)
from .targets import PointArray, TargetPoint, TargetSpace, UnitSphere


class FlowInvariantError(RuntimeError):
    """Containment induction violated during a sweep; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("CATFLOW_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Builtin initial maps
# ---------------------------------------------------------------------------

def _torus_offset(xy: np.ndarray, center) -> np.ndarray:
    d = xy - np.asarray(center)
    return d - np.round(d)


def builtin_initial_map(name: str, mesh: SurfaceMesh, space: TargetSpace,
                        params: dict = None) -> DiscreteMap:
    """builtin:constant / builtin:bump / builtin:degree1 initial data."""
    params = dict(params or {})
    if not isinstance(space, UnitSphere) and name != "constant":
        raise ValueError(f"builtin:{name} requires the sphere target")
    if name == "constant":
        if space.kind == "sphere":
            p = space.point([0.0, 0.0, 1.0])
        elif space.kind == "book":
            p = space.point(0, [1.0, 0.0, 0.0])
        else:
            p = space.point(0.5, 0.0)
        return DiscreteMap(mesh, space,
                           PointArray.tile(p, len(mesh.vertices)))
    if mesh.kind != "torus":
        raise MeshError(f"builtin:{name} is defined on the torus domain")
    xy = mesh.vertices
    center = params.get("center", (0.5, 0.5))
    if name == "bump":
        lam = MESH_LAMBDA[mesh.kind]
        amp = params.get("amplitude")
        if amp is None:
            amp = 0.5 * 3.0 ** (-lam) * space.rho
        radius = params.get("radius", 0.25)
        off = _torus_offset(xy, center)
        rr = np.hypot(off[:, 0], off[:, 1]) / radius
        prof = np.where(rr < 1.0, np.cos(0.5 * math.pi * np.minimum(rr, 1.0)) ** 2, 0.0)
        theta = amp * prof
        coords = np.stack([np.sin(theta), np.zeros_like(theta), np.cos(theta)],
                          axis=1)
        return DiscreteMap(mesh, space, PointArray(
            np.zeros(len(xy), dtype=np.int64), coords))
    if name == "degree1":
        s = params.get("scale", 0.25)
        off = _torus_offset(xy, center)
        r = np.hypot(off[:, 0], off[:, 1])
        theta = math.pi * np.minimum(r / s, 1.0)
        psi = np.arctan2(off[:, 1], off[:, 0])
        coords = np.stack([np.sin(theta) * np.cos(psi),
                           np.sin(theta) * np.sin(psi),
                           np.cos(theta)], axis=1)
        return DiscreteMap(mesh, space, PointArray(
            np.zeros(len(xy), dtype=np.int64), coords))
    raise ValueError(f"unknown builtin initial map {name!r}")


def sphere_map_degree(u: DiscreteMap) -> float:
    """Signed-area degree of a sphere-valued map (homotopy marker)."""
    if u.space.kind != "sphere":
        return float("nan")
    t = u.mesh.triangles
    A = u.points.coords[t[:, 0]]
    B = u.points.coords[t[:, 1]]
    C = u.points.coords[t[:, 2]]
    det = np.einsum("ij,ij->i", A, np.cross(B, C))
    denom = 1.0 + np.einsum("ij,ij->i", A, B) + np.einsum("ij,ij->i", B, C) \
        + np.einsum("ij,ij->i", C, A)
    omega = 2.0 * np.arctan2(det, denom)
    return float(np.sum(omega) / (4.0 * math.pi))


# ---------------------------------------------------------------------------
# Replacement radius (containment test)
# ---------------------------------------------------------------------------

def _global_circumradius(u: DiscreteMap) -> float:
    m = u.space.weighted_mean(u.points, np.ones(len(u.points)))
    d = u.space.distance(PointArray.tile(m, len(u.points)), u.points)
    return float(d.max())


def _containment_ok(u: DiscreteMap, r: float, tau: float,
                    chunk: int = 512) -> tuple:
    """Every doubled ball's image circumradius (Fréchet mean + max distance)
    at most tau?  Returns (ok, worst oscillation seen)."""
    mesh, sp = u.mesh, u.space
    V = len(mesh.vertices)
    if _global_circumradius(u) <= tau:
        return True, 0.0
    worst = 0.0
    for lo in range(0, V, chunk):
        src = np.arange(lo, min(lo + chunk, V))
        D = mesh.distances_from(src, limit=2.0 * r * (1 + 1e-12))
        if D.ndim == 1:
            D = D[None, :]
        inball = D <= 2.0 * r
        for row, x in enumerate(src):
            mem = np.where(inball[row])[0]
            vals = u.points.take(mem)
            osc = float(sp.distance(
                PointArray.tile(u.points.point(int(x)), len(mem)), vals).max())
            worst = max(worst, osc)
            if osc <= tau / 2.0:
                continue
            if osc > 2.0 * tau:
                return False, worst
            mean = sp.weighted_mean(vals, np.ones(len(mem)))
            circ = float(sp.distance(
                PointArray.tile(mean, len(mem)), vals).max())
            if circ > tau:
                return False, worst
    return True, worst


@dataclass
class RadiusSelection:
    r: float
    k: int
    floor_hit: bool
    tau: float


def dyadic_scales(mesh: SurfaceMesh):
    """Resolved dyadic radii: k from kappa0 down to the resolution floor
    (smallest dyadic at least 4 mean edge lengths)."""
    kappa0 = KAPPA0[mesh.kind]
    h = mesh.mean_edge_length()
    kmax = int(math.floor(-math.log2(4.0 * h)))
    return kappa0, max(kappa0, kmax)


def compute_replacement_radius(u: DiscreteMap, Lambda: int, rho: float) -> RadiusSelection:
    """Largest dyadic r <= 2^-kappa0 with every doubled-ball image inside a
    3^-Lambda rho ball; floor flag when even the finest resolved dyadic
    fails (feeds bubbling detection)."""
    tau = 3.0 ** (-Lambda) * rho
    kappa0, kmax = dyadic_scales(u.mesh)
    for k in range(kappa0, kmax + 1):
        ok, _ = _containment_ok(u, 2.0 ** (-k), tau)
        if ok:
            return RadiusSelection(r=2.0 ** (-k), k=k, floor_hit=False, tau=tau)
    return RadiusSelection(r=2.0 ** (-kmax), k=kmax, floor_hit=True, tau=tau)


# ---------------------------------------------------------------------------
# Flow state and sweeps
# ---------------------------------------------------------------------------

@dataclass
class FlowConfig:
    rho: float
    tol_solve: float = None        # None: scale-aware 1e-4 * 3^-Lambda rho
    tol_l2: float = FLOW_L2_TOL
    tol_harm: float = FLOW_HARMONICITY_TOL
    max_cycles: int = FLOW_MAX_CYCLES
    max_sweeps: int = 20_000
    seed: int = 0
    bubble_windows: tuple = (1.0, 2.0, 4.0, 8.0)
    conformality_threshold: float = 0.75
    polish_sweeps: int = 400


@dataclass
class FlowState:
    mesh: SurfaceMesh
    space: TargetSpace
    u: DiscreteMap
    config: FlowConfig
    Lambda: int
    n: int = 0
    r_history: list = field(default_factory=list)
    ladder: list = field(default_factory=list)   # rows (n, l, E)
    l2_trace: list = field(default_factory=list)
    degree_trace: list = field(default_factory=list)
    monitor: dict = field(default_factory=dict)
    floor_hit: bool = False
    covers: dict = field(default_factory=dict, repr=False)

    def initial_energy(self) -> float:
        return self.ladder[0][2] if self.ladder else energy(self.u)


def start_flow(mesh: SurfaceMesh, space: TargetSpace, u0: DiscreteMap,
               config: FlowConfig) -> FlowState:
    lam = MESH_LAMBDA[mesh.kind]
    if config.tol_solve is None:
        config.tol_solve = min(1e-12,
                               FLOW_TOL_FACTOR * 3.0 ** (-lam) * config.rho)
    state = FlowState(mesh=mesh, space=space, u=u0.copy(), config=config,
                      Lambda=lam)
    state.ladder.append((0, 0, energy(state.u)))
    state.degree_trace.append(sphere_map_degree(state.u))
    return state


def _partition_for(state: FlowState, k: int) -> PartitionedCover:
    if k not in state.covers:
        cover = build_cover(state.mesh, k)
        state.covers[k] = partition_cover(cover)
    return state.covers[k]


def _solve_one_ball(state: FlowState, region: np.ndarray, tau_l: float):
    """Containment pre-check + local Dirichlet solve on one doubled ball.
    Returns (interior ids, solved values) without mutating the state."""
    mesh, sp, u = state.mesh, state.space, state.u
    from .energy import region_boundary
    ring = region_boundary(mesh, region)
    closure = np.union1d(region, ring)
    vals = u.points.take(closure)
    mean = sp.weighted_mean(vals, np.ones(len(closure)))
    circ = float(sp.distance(PointArray.tile(mean, len(closure)), vals).max())
    if circ > tau_l * (1 + 1e-9):
        raise FlowInvariantError(
            f"containment induction violated: ball image circumradius "
            f"{circ:.3e} exceeds {tau_l:.3e}",
            {"circumradius": circ, "tau_l": tau_l,
             "region_size": int(len(region))})
    prob = ball_problem(mesh, sp, u, region, mean, tau_l)
    solved, _ = solve_dirichlet(prob, seed=u, tol=state.config.tol_solve,
                                max_sweeps=state.config.max_sweeps,
                                certify=False)
    return prob.interior, solved.points.take(prob.interior)


def sweep_class(state: FlowState, part: PartitionedCover, l: int) -> float:
    """Replace the map on every doubled ball of class l (1-based); balls in
    one class are disjoint so solves are independent.  Returns the energy
    after the sweep and appends it to the ladder."""
    cover = part.cover
    cls = part.classes[l - 1]
    tau_l = 3.0 ** (-state.Lambda + (l - 1)) * state.config.rho
    # disjointness audit (PartitionedCover invariant)
    touched = set()
    regions = []
    for i in cls:
        mem = cover.members2[i]
        if touched & set(mem.tolist()):
            raise FlowInvariantError("class doubled balls overlap")
        touched |= set(mem.tolist())
        regions.append(mem)

    nthreads = thread_count()
    results = []
    if nthreads > 1 and len(regions) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as ex:
            futs = [ex.submit(_solve_one_ball, state, reg, tau_l)
                    for reg in regions]
            results = [f.result() for f in futs]
    else:
        results = [_solve_one_ball(state, reg, tau_l) for reg in regions]
    e_before = state.ladder[-1][2]
    for interior, pts in results:
        state.u.points.put(interior, pts)
    e_after = energy(state.u)
    if e_after > e_before * (1 + 1e-12) + 1e-300:
        raise FlowInvariantError(
            f"energy increased in sweep: {e_before} -> {e_after}")
    state.ladder.append((state.n, l, e_after))
    return e_after


def full_cycle(state: FlowState) -> FlowState:
    """One inductive step: radius selection, cover/partition rebuild, class
    sweeps l = 1..Lambda; the ladder rows E(u_n^l) telescope exactly."""
    state.n += 1
    sel = compute_replacement_radius(state.u, state.Lambda, state.config.rho)
    state.r_history.append({"n": state.n, "r": sel.r, "k": sel.k,
                            "floor_hit": sel.floor_hit})
    if sel.floor_hit:
        state.floor_hit = True
        return state
    u_prev = state.u.copy()
    part = _partition_for(state, sel.k)
    state.ladder.append((state.n, 0, state.ladder[-1][2]))
    for l in range(1, len(part.classes) + 1):
        sweep_class(state, part, l)
    state.l2_trace.append(map_l2_distance(u_prev, state.u))
    state.degree_trace.append(sphere_map_degree(state.u))
    return state


def claim_delta_budget(E0: float, Lambda: int, rho: float,
                       eps_factor: float = EPSILON_OVER_RHO) -> dict:
    """The Claim-4.5 modulus budget: log delta with
    sqrt(8 pi E0 / log delta^-2) <= 3^-Lambda eps, eps = eps_factor * rho.
    Stored in log space; the linear delta underflows by design."""
    eps = eps_factor * rho
    thr = 3.0 ** (-Lambda) * eps
    if E0 <= 0.0:
        return {"eps": eps, "log_delta": 0.0, "delta_positive": True}
    x = 8.0 * math.pi * E0 / thr ** 2
    log_delta = -x / 2.0
    return {"eps": eps, "log_delta": log_delta,
            "delta_positive": log_delta > -float("inf")}


def empirical_modulus(u: DiscreteMap, scales, n_centers: int = 8) -> list:
    """Observed image oscillation over balls at the given scales."""
    mesh, sp = u.mesh, u.space
    centers = np.linspace(0, len(mesh.vertices) - 1, n_centers, dtype=np.int64)
    out = []
    for s in scales:
        worst = 0.0
        for c in centers:
            mem = np.where(mesh.distances_from(int(c), limit=s * 1.01) <= s)[0]
            if mem.size < 2:
                continue
            vals = u.points.take(mem)
            osc = float(sp.distance(
                PointArray.tile(u.points.point(int(c)), len(mem)), vals).max())
            worst = max(worst, osc)
        out.append({"scale": float(s), "oscillation": worst})
    return out


def convergence_monitor(state: FlowState) -> dict:
    """L2 increments, harmonicity residual at the current radius, the
    Claim-4.5 delta budget, and the observed modulus of continuity."""
    cfg = state.config
    l2 = state.l2_trace[-1] if state.l2_trace else float("inf")
    r = state.r_history[-1]["r"] if state.r_history else 2.0 ** (-KAPPA0[state.mesh.kind])
    resid = harmonicity_residual(state.u, r, tol=cfg.tol_solve,
                                 noise_floor=True)
    h = state.mesh.mean_edge_length()
    scales = [max(2 * h, r / 4), max(3 * h, r / 2), r]
    mod = empirical_modulus(state.u, scales)
    budget = claim_delta_budget(state.initial_energy(), state.Lambda, cfg.rho)
    converged = (state.n >= 2 and l2 < cfg.tol_l2 and resid < cfg.tol_harm)
    state.monitor = {
        "l2_diff": l2,
        "harmonicity_residual": resid,
        "modulus_table": mod,
        "delta_budget": budget,
        "converged": bool(converged),
    }
    return state.monitor


# ---------------------------------------------------------------------------
# Bubbling: witness, rescaling, extraction
# ---------------------------------------------------------------------------

@dataclass
class BubbleWindow:
    R: float
    window_mesh: SurfaceMesh
    window_map: DiscreteMap
    disk_vertices: np.ndarray
    energy_disk: float
    ball_count: int
    ball_count_ok: bool


@dataclass
class BubbleReport:
    r_n: float
    k_n: int
    y: int
    y_prime: int
    domain_distance: float
    target_distance: float
    threshold: float
    windows: list
    z_witness: tuple
    energy_initial: float
    candidate: DiscreteMap = None
    candidate_accepted: bool = False
    certificates: dict = field(default_factory=dict)

    def replay_witness(self) -> bool:
        ok = 2.0 * self.r_n <= self.domain_distance <= 4.0 * self.r_n
        ok &= self.target_distance >= self.threshold
        for w in self.windows:
            ok &= w.energy_disk <= self.energy_initial + 1e-9
        return bool(ok)


class BubbleInconsistencyError(RuntimeError):
    """Radius hit the floor but no witness pair exists: discretization failure."""


def _find_witness(state: FlowState, r: float):
    """Vertex pair with 2r <= d_g <= 4r maximizing target distance; ties
    break toward the center with the largest local energy density, so the
    rescaled windows sit on the concentration."""
    from .energy import vertex_energy_density
    mesh, sp, u = state.mesh, state.space, state.u
    tau = 3.0 ** (-state.Lambda) * state.config.rho
    V = len(mesh.vertices)
    dens = vertex_energy_density(u)
    best = None
    best_key = None
    stride = max(1, V // 512)
    cands = np.arange(0, V, stride)
    for c in cands:
        d = mesh.distances_from(int(c), limit=4.0 * r * 1.01)
        ann = np.where((d >= 2.0 * r) & (d <= 4.0 * r))[0]
        if ann.size == 0:
            continue
        vals = u.points.take(ann)
        td = sp.distance(PointArray.tile(u.points.point(int(c)), len(ann)), vals)
        j = int(np.argmax(td))
        key = (round(float(td[j]), 9), float(dens[c]))
        if best_key is None or key > best_key:
            best_key = key
            best = (int(c), int(ann[j]), float(td[j]), float(d[ann[j]]))
    if best is None or best[2] < tau:
        raise BubbleInconsistencyError(
            f"no witness pair with target distance >= {tau:.3e} at scale {r}")
    return best


def _torus_chart_offset(mesh: SurfaceMesh, center_v: int) -> np.ndarray:
    xy = mesh.vertices
    return _torus_offset(xy, xy[center_v])


def _locate_torus(mesh: SurfaceMesh, pts: np.ndarray):
    """Containing triangle and barycentric coordinates on the torus grid.

    Cells are split along the (v00, v11) diagonal; triangle 1 holds local
    coords with ly <= lx."""
    n = mesh.grid_n
    p = np.mod(pts, 1.0)
    # snap near-vertex queries so aligned resampling is exact
    gx = p[:, 0] * n
    gy = p[:, 1] * n
    gx = np.where(np.abs(gx - np.round(gx)) < 1e-9, np.round(gx), gx)
    gy = np.where(np.abs(gy - np.round(gy)) < 1e-9, np.round(gy), gy)
    gi = np.floor(gx).astype(np.int64) % n
    gj = np.floor(gy).astype(np.int64) % n
    lx = gx - np.floor(gx)
    ly = gy - np.floor(gy)
    idx = lambda i, j: (i % n) * n + (j % n)
    v00 = idx(gi, gj)
    v10 = idx(gi + 1, gj)
    v01 = idx(gi, gj + 1)
    v11 = idx(gi + 1, gj + 1)
    lower = ly <= lx
    # lower triangle (v00, v10, v11): bary in (1-lx, lx-ly, ly)
    # upper triangle (v00, v11, v01): bary in (1-ly, lx, ly-lx)
    tri = np.where(lower[:, None],
                   np.stack([v00, v10, v11], axis=1),
                   np.stack([v00, v11, v01], axis=1))
    w = np.where(lower[:, None],
                 np.stack([1 - lx, lx - ly, ly], axis=1),
                 np.stack([1 - ly, lx, ly - lx], axis=1))
    return tri, np.clip(w, 0.0, 1.0)


def _sample_map(u: DiscreteMap, tri: np.ndarray, w: np.ndarray) -> PointArray:
    """Nested geodesic interpolation of triangle corner values."""
    sp = u.space
    a = u.points.take(tri[:, 0])
    b = u.points.take(tri[:, 1])
    c = u.points.take(tri[:, 2])
    wa, wb, wc = w[:, 0], w[:, 1], w[:, 2]
    t_ab = np.where(wa + wb > 1e-15, wb / np.maximum(wa + wb, 1e-15), 0.0)
    ab = sp.geodesic(a, b, t_ab)
    return sp.geodesic(ab, c, np.clip(wc, 0.0, 1.0))


def rescale_window(state: FlowState, y: int, r: float, R: float,
                   cover: BallCover = None) -> BubbleWindow:
    """Resample u over the chart window D_R at scale r onto a fresh flat
    grid (chart composition pi_n o Psi_n, barycentric in the chart then
    geodesic interpolation of corner values)."""
    mesh, u = state.mesh, state.u
    if mesh.kind != "torus":
        raise MeshError("bubble rescaling is implemented for torus domains")
    h = 1.0 / mesh.grid_n
    # dyadic r is an integer multiple of h, so the fresh grid aligns with
    # source vertices exactly and the window energy telescopes below E(u_0^0)
    n_side = int(round(2.0 * R * r / h)) + 1
    n_side = max(n_side, 9)
    win = build_patch_mesh(n_side)
    # window chart coords z in [-R, R]^2; physical = y + r z (torus wrap)
    z = (win.vertices - 0.5) * (2.0 * R)
    phys = mesh.vertices[y] + r * z
    tri, w = _locate_torus(mesh, phys)
    pts = _sample_map(u, tri, w)
    wmap = DiscreteMap(win, u.space, pts)
    disk = np.where(np.hypot(z[:, 0], z[:, 1]) <= R + 1e-12)[0]
    e_disk = energy(wmap, disk)
    if cover is not None:
        ball = geodesic_ball(mesh, y, min(R * r, mesh.injectivity_bound() * 0.99))
        cnt, ok = count_balls_in_window(mesh, cover, ball, R)
    else:
        cnt, ok = 0, True
    return BubbleWindow(R=R, window_mesh=win, window_map=wmap,
                        disk_vertices=disk, energy_disk=e_disk,
                        ball_count=cnt, ball_count_ok=ok)


def usable_windows(mesh: SurfaceMesh, r: float, requested) -> list:
    """Window radii whose chart z -> y + r z embeds (diameter 2 R r under
    the shortest period).  At the resolution floor of coarse meshes the
    larger paper windows wrap around the domain and are dropped."""
    period = min(mesh.periods) if mesh.kind == "torus" else 2.0 * math.pi
    out = [R for R in requested if 2.0 * R * r < 0.999 * period]
    return out or [min(requested)]


def detect_and_rescale_bubble(state: FlowState) -> BubbleReport:
    """CASE 2: witness pair satisfying the recorded inequalities plus the
    rescaled window maps and the ball-count check."""
    sel = state.r_history[-1]
    r, k = sel["r"], sel["k"]
    y, y_prime, tdist, gdist = _find_witness(state, r)
    tau = 3.0 ** (-state.Lambda) * state.config.rho
    try:
        cover = _partition_for(state, k).cover
    except MeshError:
        cover = None
    windows = [rescale_window(state, y, r, R, cover=cover)
               for R in usable_windows(state.mesh, r,
                                       state.config.bubble_windows)]
    # witness chart coordinate after rescaling
    off = _torus_offset(state.mesh.vertices[[y_prime]], state.mesh.vertices[y])[0]
    z_w = (off[0] / r, off[1] / r)
    report = BubbleReport(
        r_n=r, k_n=k, y=int(y), y_prime=int(y_prime),
        domain_distance=float(gdist), target_distance=float(tdist),
        threshold=tau, windows=windows, z_witness=z_w,
        energy_initial=state.initial_energy())
    if not report.replay_witness():
        raise BubbleInconsistencyError("witness inequalities failed replay")
    return report


def relax_interior(u: DiscreteMap, sweeps: int, tol: float = 1e-11) -> DiscreteMap:
    """Unconstrained local Fréchet relaxation of the interior (vertex-wise
    local Dirichlet solves on 1-rings), used to polish bubble windows."""
    mesh, sp = u.mesh, u.space
    out = u.copy()
    interior = mesh.interior_vertices()
    colors = mesh.vertex_colors[interior]
    blocks = [interior[colors == c] for c in np.unique(colors)]
    from .dirichlet import _flatten_neighbors
    flat = [_flatten_neighbors(mesh, b) for b in blocks]
    mean_tol = min(1e-12, tol / 10.0)
    for _ in range(sweeps):
        max_move = 0.0
        for b, (nidx, nw, indptr) in zip(blocks, flat):
            cur = out.points.take(b)
            means = sp.mean_batch(out.points.take(nidx), indptr, nw, cur,
                                  tol=mean_tol)
            move = sp.distance(cur, means)
            if move.size:
                max_move = max(max_move, float(move.max()))
            out.points.put(b, means)
        if max_move < tol:
            break
    return out


def extract_bubble(state: FlowState, report: BubbleReport) -> BubbleReport:
    """Polish the largest window, cap it to a sphere-domain candidate via
    inverse stereographic projection, and attach certificates."""
    cfg = state.config
    widest = max(report.windows, key=lambda w: w.R)
    polished = relax_interior(widest.window_map, cfg.polish_sweeps,
                              tol=cfg.tol_solve)
    R = widest.R
    win_mesh = widest.window_mesh
    z = (win_mesh.vertices - 0.5) * (2.0 * R)

    sphere_mesh = _sphere_mesh_for_candidate(state)
    sv = sphere_mesh.vertices
    denom = 1.0 - sv[:, 2]
    safe = denom > (2.0 / (1.0 + (0.95 * R) ** 2))
    zz = np.zeros((len(sv), 2))
    zz[safe, 0] = sv[safe, 0] / denom[safe]
    zz[safe, 1] = sv[safe, 1] / denom[safe]
    inside = safe & (np.hypot(zz[:, 0], zz[:, 1]) <= 0.95 * R)

    # ring mean caps the puncture
    rad = np.hypot(z[:, 0], z[:, 1])
    ring = np.where((rad >= 0.88 * R) & (rad <= R))[0]
    cap_val = state.space.weighted_mean(polished.points.take(ring),
                                        np.ones(len(ring)))

    # sample the polished window at the projected sphere vertices
    grid_pts = np.clip(zz[inside] / (2.0 * R) + 0.5, 0.0, 1.0 - 1e-12)
    tri, w = _locate_patch(win_mesh, grid_pts)
    vals_inside = _sample_map(polished, tri, w)
    charts = np.full(len(sv), cap_val.chart, dtype=np.int64)
    coords = np.tile(np.asarray(cap_val.coords, dtype=float), (len(sv), 1))
    charts[inside] = vals_inside.charts
    coords[inside] = vals_inside.coords
    candidate = DiscreteMap(sphere_mesh, state.space,
                            PointArray(charts, coords))

    defect = conformality_defect(polished)
    hopf = hopf_differential(polished)
    # nonconstancy replay: on the polished window when the witness fits in
    # it, else directly on the source map values
    zw = np.asarray(report.z_witness)
    if max(abs(zw[0]), abs(zw[1])) <= R:
        t0, w0 = _locate_patch(win_mesh, zw[None, :] / (2 * R) + 0.5)
        tz, wz = _locate_patch(win_mesh, np.array([[0.5, 0.5]]))
        v_w = _sample_map(polished, t0, w0)
        v_0 = _sample_map(polished, tz, wz)
        noncon = float(state.space.distance(v_w, v_0)[0])
        noncon_src = "window"
    else:
        noncon = report.target_distance
        noncon_src = "source"

    report.candidate = candidate
    report.candidate_accepted = bool(defect <= cfg.conformality_threshold)
    report.certificates = {
        "conformality_defect": float(defect),
        "hopf_dbar_residual": float(hopf.dbar_residual),
        "hopf_phi_l1": float(hopf.phi_l1),
        "candidate_energy": float(energy(candidate)),
        "window_energy_polished": float(energy(polished, widest.disk_vertices)),
        "nonconstancy_margin": noncon,
        "nonconstancy_threshold": float(report.threshold),
        "nonconstancy_ok": bool(noncon >= report.threshold - 1e-10),
        "nonconstancy_evaluated_on": noncon_src,
        "cap_fraction": float(np.mean(inside)),
    }
    return report


def _locate_patch(mesh: SurfaceMesh, pts: np.ndarray):
    n = mesh.grid_n
    p = np.clip(pts, 0.0, 1.0 - 1e-12)
    gi = np.minimum((p[:, 0] * (n - 1)).astype(np.int64), n - 2)
    gj = np.minimum((p[:, 1] * (n - 1)).astype(np.int64), n - 2)
    lx = p[:, 0] * (n - 1) - gi
    ly = p[:, 1] * (n - 1) - gj
    idx = lambda i, j: i * n + j
    v00 = idx(gi, gj)
    v10 = idx(gi + 1, gj)
    v01 = idx(gi, gj + 1)
    v11 = idx(gi + 1, gj + 1)
    lower = ly <= lx
    tri = np.where(lower[:, None],
                   np.stack([v00, v10, v11], axis=1),
                   np.stack([v00, v11, v01], axis=1))
    w = np.where(lower[:, None],
                 np.stack([1 - lx, lx - ly, ly], axis=1),
                 np.stack([1 - ly, lx, ly - lx], axis=1))
    return tri, np.clip(w, 0.0, 1.0)


def _sphere_mesh_for_candidate(state: FlowState) -> SurfaceMesh:
    from .mesh import build_mesh
    return build_mesh("sphere", 4)


# ---------------------------------------------------------------------------
# Dichotomy driver
# ---------------------------------------------------------------------------

@dataclass
class DichotomyCertificate:
    outcome: str                   # Converged | Bubbled | BudgetExceeded
    cycles: int
    final_energy: float
    monitor: dict
    ladder: list
    r_history: list
    l2_trace: list
    degree_trace: list
    bubble: BubbleReport = None
    degree_preserved: bool = None

    def to_json(self) -> dict:
        out = {
            "outcome": self.outcome,
            "cycles": self.cycles,
            "final_energy": self.final_energy,
            "monitor": self.monitor,
            "ladder": [[int(n), int(l), float(e)] for (n, l, e) in self.ladder],
            "r_history": self.r_history,
            "l2_trace": self.l2_trace,
            "degree_trace": self.degree_trace,
            "degree_preserved": self.degree_preserved,
        }
        if self.bubble is not None:
            b = self.bubble
            out["bubble"] = {
                "r_n": b.r_n, "k_n": b.k_n, "y": b.y, "y_prime": b.y_prime,
                "domain_distance": b.domain_distance,
                "target_distance": b.target_distance,
                "threshold": b.threshold,
                "z_witness": list(b.z_witness),
                "energy_initial": b.energy_initial,
                "windows": [{"R": w.R, "energy_disk": w.energy_disk,
                             "ball_count": w.ball_count,
                             "ball_count_ok": bool(w.ball_count_ok)}
                            for w in b.windows],
                "witness_replay": b.replay_witness(),
                "candidate_accepted": b.candidate_accepted,
                "certificates": b.certificates,
            }
        return out


def run_flow(mesh: SurfaceMesh, space: TargetSpace, u0: DiscreteMap,
             config: FlowConfig) -> tuple:
    """Run the dichotomy to a certificate; returns (certificate, state)."""
    state = start_flow(mesh, space, u0, config)
    outcome = None
    while state.n < config.max_cycles:
        full_cycle(state)
        if state.floor_hit:
            outcome = "Bubbled"
            break
        convergence_monitor(state)
        if state.monitor["converged"]:
            outcome = "Converged"
            break
    if outcome is None:
        convergence_monitor(state)
        outcome = "BudgetExceeded"

    bubble = None
    degree_preserved = None
    if outcome == "Bubbled":
        report = detect_and_rescale_bubble(state)
        bubble = extract_bubble(state, report)
    else:
        degs = [d for d in state.degree_trace if not math.isnan(d)]
        if degs:
            degree_preserved = bool(
                abs(round(degs[0]) - round(degs[-1])) == 0)
    cert = DichotomyCertificate(
        outcome=outcome, cycles=state.n, final_energy=energy(state.u),
        monitor=state.monitor, ladder=state.ladder,
        r_history=state.r_history, l2_trace=state.l2_trace,
        degree_trace=state.degree_trace, bubble=bubble,
        degree_preserved=degree_preserved)
    return cert, state
