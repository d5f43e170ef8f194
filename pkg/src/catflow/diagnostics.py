"""Certified analytic properties of computed maps.

Contains the Courant-Lebesgue radius scan, the extrinsic-ball area profile
with its monotonicity check and density estimate, the weak-subharmonicity
residual for pairs of certified harmonic maps, and the harmonicity residual
(best local energy drop under re-solving).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import MONOTONICITY_C
from .dirichlet import ball_problem, solve_dirichlet
from .energy import DiscreteMap, conformal_factor, energy
from .mesh import geodesic_ball
from .targets import PointArray, TargetPoint


def courant_lebesgue_budget(total_energy: float, delta: float) -> float:
    """Oscillation budget sqrt(8 pi E / log delta^-2) (natural log)."""
    return math.sqrt(8.0 * math.pi * total_energy / math.log(delta ** -2))


@dataclass
class CourantLebesgueResult:
    radius: float
    oscillation: float
    budget: float
    ok: bool
    scanned: list


def courant_lebesgue_radius(u: DiscreteMap, center: int, delta: float,
                            total_energy: float = None,
                            n_scan: int = 12) -> CourantLebesgueResult:
    """Scan log-spaced radii in (delta^2, delta) for a circle whose image
    diameter is within the Courant-Lebesgue budget.

    Returns the first admissible radius, else the best with a fail flag
    (signals under-resolution).
    """
    mesh = u.mesh
    h = mesh.mean_edge_length()
    if delta ** 2 < h:
        lo = h
    else:
        lo = delta ** 2
    if total_energy is None:
        total_energy = energy(u)
    budget = courant_lebesgue_budget(total_energy, delta)
    d = mesh.distances_from(center, limit=delta * 1.5)
    radii = np.exp(np.linspace(math.log(max(lo, 1e-12)), math.log(delta), n_scan))
    scanned = []
    best = None
    for r in radii:
        ring = np.where(np.abs(d - r) <= h / 2.0)[0]
        if ring.size < 3:
            continue
        pts = u.points.take(ring)
        # image diameter of the discrete circle
        diam = 0.0
        for i in range(len(ring)):
            di = u.space.distance(pts.take(np.full(len(ring), i)), pts)
            diam = max(diam, float(di.max()))
        scanned.append({"radius": float(r), "oscillation": diam})
        if best is None or diam < best[1]:
            best = (float(r), diam)
        if diam <= budget:
            return CourantLebesgueResult(radius=float(r), oscillation=diam,
                                         budget=budget, ok=True,
                                         scanned=scanned)
    if best is None:
        return CourantLebesgueResult(radius=float(delta), oscillation=math.inf,
                                     budget=budget, ok=False, scanned=scanned)
    return CourantLebesgueResult(radius=best[0], oscillation=best[1],
                                 budget=budget, ok=best[1] <= budget,
                                 scanned=scanned)


# ---------------------------------------------------------------------------
# Extrinsic area monotonicity (conformal harmonic maps)
# ---------------------------------------------------------------------------

def extrinsic_area_profile(u: DiscreteMap, Q: TargetPoint,
                           sigmas) -> np.ndarray:
    """A(sigma) = integral of the conformal factor over the preimage of the
    extrinsic ball B_sigma(Q), triangle-wise with 3-corner fractional
    weighting of boundary triangles."""
    sigmas = np.asarray(sigmas, dtype=float)
    lam = conformal_factor(u)
    tris = u.mesh.triangles
    dQ = u.space.distance(u.points, PointArray.tile(Q, len(u.points)))
    corner_d = dQ[tris]                       # (T,3)
    out = np.empty(len(sigmas))
    mass = lam * u.mesh.tri_areas
    for i, s in enumerate(sigmas):
        frac = np.mean(corner_d <= s, axis=1)
        out[i] = float(np.sum(mass * frac))
    return out


@dataclass
class MonotonicityReport:
    sigmas: np.ndarray
    profile: np.ndarray
    ratios: np.ndarray           # e^{c sigma^2} A / sigma^2
    monotone: bool
    worst_drop: float            # most negative relative step
    theta: float                 # fitted density A/(pi sigma^2) at small sigma
    theta_defined: bool
    c: float


def monotonicity_check(sigmas, profile, c: float = MONOTONICITY_C,
                       tol: float = 0.01, theta: float = None) -> MonotonicityReport:
    """Discrete monotonicity of e^{c sigma^2} A(sigma)/sigma^2 within tol,
    plus the fitted density Theta = lim A/(pi sigma^2)."""
    sigmas = np.asarray(sigmas, dtype=float)
    profile = np.asarray(profile, dtype=float)
    ratios = np.exp(c * sigmas ** 2) * profile / sigmas ** 2
    if np.all(profile == 0.0):
        return MonotonicityReport(sigmas=sigmas, profile=profile,
                                  ratios=ratios, monotone=True,
                                  worst_drop=0.0, theta=float("nan"),
                                  theta_defined=False, c=c)
    steps = ratios[1:] / np.maximum(ratios[:-1], 1e-300) - 1.0
    worst = float(np.min(steps, initial=0.0))
    if theta is None:
        theta_vals = profile / (math.pi * sigmas ** 2)
        theta = float(np.mean(theta_vals[:min(3, len(sigmas))]))
    return MonotonicityReport(sigmas=sigmas, profile=profile, ratios=ratios,
                              monotone=worst >= -tol, worst_drop=worst,
                              theta=theta, theta_defined=True, c=c)


def density_theta(u: DiscreteMap, Q: TargetPoint, sigma0: float) -> float:
    """Density estimate Theta = A/(pi sigma^2) averaged over a mid-range
    radius band (3.5h .. 6.5h): small enough to approximate the limit, large
    enough that the fractional-weighting noise of boundary triangles stays
    at the percent level."""
    h = u.mesh.mean_edge_length()
    hi = min(6.5 * h, 0.999 * sigma0)
    lo = min(3.5 * h, 0.8 * hi)
    grid = np.linspace(lo, hi, 7)
    prof = extrinsic_area_profile(u, Q, grid)
    return float(np.mean(prof / (math.pi * grid ** 2)))


def default_sigma_grid(u: DiscreteMap, sigma0: float) -> np.ndarray:
    """Geometric grid (ratio sqrt 2) on the resolved range (2.5h, sigma0]:
    coarse enough that the true growth of the monotone quantity dominates
    the fractional-weighting noise of boundary triangles."""
    h = u.mesh.mean_edge_length()
    lo = 2.5 * h
    if lo >= sigma0:
        return np.array([sigma0])
    n = int(math.floor(math.log(sigma0 / lo) / math.log(math.sqrt(2.0)))) + 1
    return sigma0 * (math.sqrt(2.0) ** -np.arange(n))[::-1]


def fit_monotonicity_c(sigmas, profile, cs=None) -> float:
    """Smallest c in a sweep making the profile monotone (sweep mode)."""
    if cs is None:
        cs = np.linspace(0.0, 4.0, 41)
    for c in cs:
        if monotonicity_check(sigmas, profile, c=c).monotone:
            return float(c)
    return float("nan")


# ---------------------------------------------------------------------------
# Weak subharmonicity of F (Theorem-B.4 diagnostics)
# ---------------------------------------------------------------------------

class NotCertifiedError(ValueError):
    """Inputs to the subharmonicity diagnostic must be solver-certified."""


def _log_cutoff(mesh, center: int, eps: float) -> np.ndarray:
    """phi_eps(r) = clip((log r - log eps^2)/(-log eps), 0, 1) in the mesh
    geodesic radius r from the center vertex."""
    r = mesh.distances_from(center)
    r = np.where(np.isfinite(r), r, np.inf)
    with np.errstate(divide="ignore"):
        val = (np.log(np.maximum(r, 1e-300)) - math.log(eps ** 2)) / (-math.log(eps))
    return np.clip(val, 0.0, 1.0)


def subharmonicity_residual(u0: DiscreteMap, u1: DiscreteMap, O: TargetPoint,
                            interior: np.ndarray, certified: bool,
                            center: int = None,
                            cutoff_eps=(1e-1, 1e-2)):
    """Worst signed residual of div(cos R0 cos R1 grad F) >= 0 against the
    nonnegative test class (interior hats plus log-cutoff profiles).

    residual(eta) = - sum_e w_e cosbar_e (eta_x - eta_y)(F_x - F_y), reported
    normalized by the discrete H1 norm of eta.  Test functions vanish outside
    the interior; the pairing runs over the closed region (interior plus its
    ring) so every test function's full gradient support is integrated.
    Requires solver-certified harmonic inputs.
    """
    if not certified:
        raise NotCertifiedError(
            "subharmonicity diagnostic is valid only for solver-certified "
            "energy minimizers")
    from .energy import region_boundary

    mesh, sp = u0.mesh, u0.space
    interior = np.asarray(interior, dtype=np.int64)
    ring = region_boundary(mesh, interior)
    closure = np.union1d(interior, ring)
    d = sp.distance(u0.points, u1.points)
    cN = PointArray.tile(O, len(u0.points))
    R0 = sp.distance(u0.points, cN)
    R1 = sp.distance(u1.points, cN)
    cosprod = np.cos(R0) * np.cos(R1)
    F = np.sqrt(np.maximum(1.0 - np.cos(d), 0.0) / cosprod)

    e = mesh.edges
    w = mesh.edge_weights
    closed = np.zeros(len(mesh.vertices), dtype=bool)
    closed[closure] = True
    inset = np.zeros(len(mesh.vertices), dtype=bool)
    inset[interior] = True
    emask = closed[e[:, 0]] & closed[e[:, 1]]
    ee = e[emask]
    ww = w[emask]
    cpe = 0.5 * (cosprod[ee[:, 0]] + cosprod[ee[:, 1]])
    dF = F[ee[:, 0]] - F[ee[:, 1]]

    def residual(eta):
        deta = eta[ee[:, 0]] - eta[ee[:, 1]]
        raw = -float(np.sum(ww * cpe * deta * dF))
        h1 = math.sqrt(float(np.sum(ww * deta ** 2))
                       + float(np.sum(mesh.vertex_areas * eta ** 2)))
        return raw / max(h1, 1e-300), raw, h1

    results = []
    worst = math.inf
    for v in interior:
        eta = np.zeros(len(mesh.vertices))
        eta[v] = 1.0
        norm_res, raw, h1 = residual(eta)
        results.append({"test": f"hat:{int(v)}", "residual": norm_res})
        worst = min(worst, norm_res)
    if center is None:
        center = int(interior[0])
    # plateau bump over the interior times log cutoffs
    rad = mesh.distances_from(center)
    rad_max = float(np.max(rad[interior]))
    bump = np.clip(2.0 * (1.0 - rad / max(rad_max, 1e-300)), 0.0, 1.0)
    bump[~inset] = 0.0
    for eps in cutoff_eps:
        eta = _log_cutoff(mesh, center, eps) * bump
        norm_res, raw, h1 = residual(eta)
        results.append({"test": f"logcut:{eps}", "residual": norm_res})
        worst = min(worst, norm_res)
    return worst, results, F


# ---------------------------------------------------------------------------
# Harmonicity residual (operational "locally energy minimizing")
# ---------------------------------------------------------------------------

def harmonicity_residual(u: DiscreteMap, r: float, centers=None,
                         tol: float = 1e-10, max_centers: int = 24,
                         rng: np.random.Generator = None,
                         noise_floor: bool = False) -> float:
    """max over sampled centers of the relative energy drop after one local
    Dirichlet re-solve on B_r: zero for exact discrete minimizers.

    With noise_floor, balls whose energy sits below what a tol-sized wiggle
    would carry count as zero: the solver cannot certify improvement beneath
    its own resolution (maps converging to a constant keep a self-similar
    relative drop at ever-smaller absolute scale)."""
    mesh, sp = u.mesh, u.space
    if centers is None:
        if rng is None:
            idx = np.linspace(0, len(mesh.vertices) - 1, max_centers,
                              dtype=np.int64)
            centers = np.unique(idx)
        else:
            centers = rng.choice(len(mesh.vertices),
                                 size=min(max_centers, len(mesh.vertices)),
                                 replace=False)
    worst = 0.0
    for c in centers:
        ball = geodesic_ball(mesh, int(c), r)
        if mesh.boundary_vertices.size:
            ball = np.setdiff1d(ball, mesh.boundary_vertices)
        if ball.size == 0:
            continue
        sub = u.points.take(ball)
        m = sp.weighted_mean(sub, np.ones(len(ball)))
        dloc = sp.distance(PointArray.tile(m, len(ball)), sub)
        radius = min(float(dloc.max(initial=0.0)) * 1.5 + 1e-6, sp.rho)
        try:
            prob = ball_problem(mesh, sp, u, ball, m, radius)
        except Exception:
            continue
        region = np.concatenate([prob.interior, prob.boundary])
        e_before = energy(u, region)
        if e_before <= 0.0:
            continue
        floor = 0.0
        if noise_floor:
            from .energy import _region_edge_mask
            wsum = float(np.sum(mesh.edge_weights[_region_edge_mask(mesh, region)]))
            floor = 16.0 * tol ** 2 * wsum
            if e_before <= floor:
                continue
        _, rep = solve_dirichlet(prob, seed=u, tol=tol, certify=False)
        drop = max(e_before - rep.final_energy, 0.0)
        if noise_floor and drop <= floor:
            continue
        worst = max(worst, drop / e_before)
    return worst
