"""Catalog of concrete CAT(1) target spaces.

Three targets are shipped: the round unit sphere, the spherical book with
k >= 2 hemispherical pages glued along a common equator (the spine), and the
flat cone with total angle >= 2*pi.  Each space provides exact distances,
geodesic interpolation, projection onto small balls, weighted Fréchet means,
and seeded samplers.  All operations are pure; batch variants operate on
point arrays and are the hot path for the randomized audits.

Small distances are always computed through chord lengths (2*asin(c/2))
so that configurations separated by ~1e-10 radians keep full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import (
    MEAN_MAX_ITERS,
    MEAN_STEP_TOL,
    POINT_TOL,
    RHO_DEFAULT,
    SPINE_MIN_TOL,
    SPINE_SCAN_SAMPLES,
)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class TargetError(ValueError):
    """Base class for target-space errors."""


class InvalidPointError(TargetError):
    pass


class NonUniqueGeodesicError(TargetError):
    pass


class AdmissibilityError(TargetError):
    pass


@dataclass(frozen=True)
class TargetPoint:
    """A point of a target space: chart id plus intrinsic coordinates.

    Sphere and book points use unit 3-vectors (chart = page index for the
    book, 0 otherwise); flat-cone points use polar (r, phi).
    """

    chart: int
    coords: tuple

    def coords_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)

    def to_record(self, space: "TargetSpace") -> dict:
        return {
            "space": space.descriptor(),
            "chart": int(self.chart),
            "coordinates": [float(c) for c in self.coords],
        }


@dataclass
class PointArray:
    """Batch of target points: (N,) chart ids and (N, d) coordinates."""

    charts: np.ndarray
    coords: np.ndarray

    def __len__(self):
        return self.charts.shape[0]

    def take(self, idx) -> "PointArray":
        return PointArray(self.charts[idx], self.coords[idx])

    def put(self, idx, other: "PointArray") -> None:
        self.charts[idx] = other.charts
        self.coords[idx] = other.coords

    def copy(self) -> "PointArray":
        return PointArray(self.charts.copy(), self.coords.copy())

    def point(self, i: int) -> TargetPoint:
        return TargetPoint(int(self.charts[i]), tuple(float(c) for c in self.coords[i]))

    @staticmethod
    def from_points(points) -> "PointArray":
        charts = np.array([p.chart for p in points], dtype=np.int64)
        coords = np.array([p.coords for p in points], dtype=float)
        return PointArray(charts, coords)

    @staticmethod
    def single(p: TargetPoint) -> "PointArray":
        return PointArray(np.array([p.chart], dtype=np.int64),
                          np.asarray([p.coords], dtype=float))

    @staticmethod
    def tile(p: TargetPoint, n: int) -> "PointArray":
        return PointArray(np.full(n, p.chart, dtype=np.int64),
                          np.tile(np.asarray(p.coords, dtype=float), (n, 1)))

    @staticmethod
    def concat(parts) -> "PointArray":
        return PointArray(np.concatenate([p.charts for p in parts]),
                          np.concatenate([p.coords for p in parts]))


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _chord_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # 2*asin(chord/2): full precision for nearby points, exact at antipodes.
    chord = np.linalg.norm(a - b, axis=-1)
    return 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))


def _slerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Arc-length-proportional interpolation between unit vectors."""
    t = np.asarray(t, dtype=float)
    theta = _chord_angle(a, b)
    s = np.sin(theta)
    tiny = theta < 1e-14
    safe = np.where(tiny, 1.0, s)
    wa = np.where(tiny, 1.0 - t, np.sin((1.0 - t) * theta) / safe)
    wb = np.where(tiny, t, np.sin(t * theta) / safe)
    out = wa[..., None] * a + wb[..., None] * b
    return _unit_rows(out)


@dataclass
class TargetSpace:
    """Base class; the catalog is closed (sphere, book, cone)."""

    rho: float = RHO_DEFAULT
    description: str = ""

    def __post_init__(self):
        if not (0.0 < self.rho < math.pi / 4):
            raise AdmissibilityError(f"rho={self.rho} outside (0, pi/4)")

    # -- catalog metadata -------------------------------------------------
    kind: str = field(default="", init=False, repr=False)

    def descriptor(self) -> dict:
        raise NotImplementedError

    def coord_dim(self) -> int:
        raise NotImplementedError

    # -- scalar wrappers ---------------------------------------------------
    def distance_pt(self, p: TargetPoint, q: TargetPoint) -> float:
        return float(self.distance(PointArray.single(p), PointArray.single(q))[0])

    def geodesic_pt(self, p: TargetPoint, q: TargetPoint, tau: float) -> TargetPoint:
        return self.geodesic(PointArray.single(p), PointArray.single(q),
                             np.array([tau])).point(0)

    # -- batch interface (implemented by subclasses) ------------------------
    def validate(self, pts: PointArray) -> None:
        raise NotImplementedError

    def canonicalize(self, pts: PointArray) -> PointArray:
        raise NotImplementedError

    def distance(self, a: PointArray, b: PointArray) -> np.ndarray:
        raise NotImplementedError

    def geodesic(self, a: PointArray, b: PointArray, t: np.ndarray) -> PointArray:
        raise NotImplementedError

    def random_points(self, rng: np.random.Generator, n: int) -> PointArray:
        raise NotImplementedError

    def sample_near(self, base: PointArray, eps: float,
                    rng: np.random.Generator) -> PointArray:
        raise NotImplementedError

    def weighted_mean(self, pts: PointArray, weights: np.ndarray,
                      tol: float = MEAN_STEP_TOL) -> TargetPoint:
        raise NotImplementedError

    # -- shared operations ---------------------------------------------------
    def project_ball(self, center: TargetPoint, sigma: float,
                     pts: PointArray) -> PointArray:
        """Nearest-point projection onto the closed ball B_sigma(center)."""
        if sigma >= math.pi / 4:
            raise AdmissibilityError(f"sigma={sigma} >= pi/4")
        c = PointArray.tile(center, len(pts))
        d = self.distance(c, pts)
        outside = d > sigma
        if not outside.any():
            return pts.copy()
        t = np.ones_like(d)
        t[outside] = sigma / d[outside]
        out = pts.copy()
        moved = self.geodesic(c.take(outside), pts.take(outside),
                              t[outside])
        out.put(outside, moved)
        return out

    def mean_batch(self, flat: PointArray, indptr: np.ndarray,
                   weights: np.ndarray, start: PointArray,
                   tol: float = MEAN_STEP_TOL) -> PointArray:
        """Weighted Fréchet means of segments of ``flat`` (CSR layout).

        Generic implementation loops over segments; the sphere overrides
        with a fully vectorized Karcher iteration.
        """
        out = start.copy()
        for i in range(len(indptr) - 1):
            lo, hi = indptr[i], indptr[i + 1]
            if hi == lo:
                continue
            m = self.weighted_mean(flat.take(slice(lo, hi)), weights[lo:hi], tol=tol)
            out.put(np.array([i]), PointArray.single(m))
        return out


# ---------------------------------------------------------------------------
# Unit sphere
# ---------------------------------------------------------------------------

@dataclass
class UnitSphere(TargetSpace):
    def __post_init__(self):
        super().__post_init__()
        self.kind = "sphere"
        if not self.description:
            self.description = "round unit sphere"

    def descriptor(self) -> dict:
        return {"kind": "sphere", "rho": self.rho}

    def coord_dim(self) -> int:
        return 3

    def point(self, xyz) -> TargetPoint:
        v = np.asarray(xyz, dtype=float)
        if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise InvalidPointError(f"sphere point must be a unit 3-vector, got {xyz}")
        return TargetPoint(0, tuple(v))

    def validate(self, pts: PointArray) -> None:
        if pts.coords.shape[1] != 3:
            raise InvalidPointError("sphere coordinates must be 3-vectors")
        if np.any(np.abs(np.linalg.norm(pts.coords, axis=1) - 1.0) > 1e-12):
            raise InvalidPointError("sphere coordinates must have unit norm (1e-12)")

    def canonicalize(self, pts: PointArray) -> PointArray:
        return PointArray(np.zeros(len(pts), dtype=np.int64), _unit_rows(pts.coords))

    def distance(self, a: PointArray, b: PointArray) -> np.ndarray:
        return _chord_angle(a.coords, b.coords)

    def geodesic(self, a: PointArray, b: PointArray, t: np.ndarray) -> PointArray:
        d = _chord_angle(a.coords, b.coords)
        if np.any(d >= math.pi - 1e-12):
            raise NonUniqueGeodesicError("antipodal endpoints: geodesic not unique")
        return PointArray(np.zeros(len(a), dtype=np.int64),
                          _slerp(a.coords, b.coords, t))

    def random_points(self, rng: np.random.Generator, n: int) -> PointArray:
        v = _unit_rows(rng.normal(size=(n, 3)))
        return PointArray(np.zeros(n, dtype=np.int64), v)

    def sample_near(self, base: PointArray, eps: float,
                    rng: np.random.Generator) -> PointArray:
        n = len(base)
        v = rng.normal(size=(n, 3))
        v -= np.einsum("ij,ij->i", v, base.coords)[:, None] * base.coords
        v = _unit_rows(v)
        t = eps * rng.random(n)
        out = np.cos(t)[:, None] * base.coords + np.sin(t)[:, None] * v
        return PointArray(np.zeros(n, dtype=np.int64), _unit_rows(out))

    def _log(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Tangent vector at p pointing to q with |log| = d(p,q)."""
        theta = _chord_angle(p, q)
        perp = q - np.einsum("ij,ij->i", q, p)[:, None] * p
        nrm = np.linalg.norm(perp, axis=1)
        tiny = nrm < 1e-300
        scale = np.where(tiny, 0.0, theta / np.where(tiny, 1.0, nrm))
        return scale[:, None] * perp

    def _exp(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        nrm = np.linalg.norm(v, axis=1)
        tiny = nrm < 1e-300
        dirs = v / np.where(tiny, 1.0, nrm)[:, None]
        out = np.cos(nrm)[:, None] * p + np.sin(nrm)[:, None] * dirs
        return _unit_rows(np.where(tiny[:, None], p, out))

    def weighted_mean(self, pts: PointArray, weights: np.ndarray,
                      tol: float = MEAN_STEP_TOL) -> TargetPoint:
        w = np.asarray(weights, dtype=float)
        p = _unit_rows((w[:, None] * pts.coords).sum(0, keepdims=True))
        if not np.isfinite(p).all():
            p = pts.coords[:1].copy()
        W = w.sum()
        for _ in range(MEAN_MAX_ITERS):
            v = (w[:, None] * self._log(np.broadcast_to(p, pts.coords.shape),
                                        pts.coords)).sum(0, keepdims=True) / W
            p = self._exp(p, v)
            if np.linalg.norm(v) < tol:
                break
        return TargetPoint(0, tuple(float(c) for c in p[0]))

    def mean_batch(self, flat: PointArray, indptr: np.ndarray,
                   weights: np.ndarray, start: PointArray,
                   tol: float = MEAN_STEP_TOL) -> PointArray:
        counts = np.diff(indptr)
        active = counts > 0
        p = start.coords.copy()
        w = np.asarray(weights, dtype=float)
        seg = np.repeat(np.arange(len(counts)), counts)
        wsum = np.zeros(len(counts))
        np.add.at(wsum, seg, w)
        wsum[wsum == 0] = 1.0
        for _ in range(MEAN_MAX_ITERS):
            logs = self._log(p[seg], flat.coords) * w[:, None]
            v = np.zeros_like(p)
            np.add.at(v, seg, logs)
            v /= wsum[:, None]
            v[~active] = 0.0
            p = self._exp(p, v)
            if np.linalg.norm(v, axis=1).max(initial=0.0) < tol:
                break
        return PointArray(np.zeros(len(p), dtype=np.int64), p)


# ---------------------------------------------------------------------------
# Spherical book
# ---------------------------------------------------------------------------

@dataclass
class SphericalBook(TargetSpace):
    """k >= 2 closed hemispheres glued along the equator circle z = 0.

    Page charts are upper hemispheres {z >= 0}; the spine is shared by all
    pages (points with |z| <= POINT_TOL are identified regardless of page).
    Reshetnyak gluing along the pi-convex spine keeps curvature <= 1.
    """

    pages: int = 2

    def __post_init__(self):
        super().__post_init__()
        self.kind = "book"
        if self.pages < 2:
            raise AdmissibilityError("spherical book needs pages k >= 2")
        if not self.description:
            self.description = f"spherical book with {self.pages} pages"

    def descriptor(self) -> dict:
        return {"kind": "book", "pages": self.pages, "rho": self.rho}

    def coord_dim(self) -> int:
        return 3

    def point(self, page: int, xyz) -> TargetPoint:
        v = np.asarray(xyz, dtype=float)
        if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise InvalidPointError("book point must be a unit 3-vector")
        if v[2] < -POINT_TOL:
            raise InvalidPointError("book page coordinates must satisfy z >= 0")
        if not (0 <= page < self.pages):
            raise InvalidPointError(f"page {page} outside 0..{self.pages - 1}")
        arr = self.canonicalize(PointArray(np.array([page]), v[None, :]))
        return arr.point(0)

    def validate(self, pts: PointArray) -> None:
        if pts.coords.shape[1] != 3:
            raise InvalidPointError("book coordinates must be 3-vectors")
        if np.any(np.abs(np.linalg.norm(pts.coords, axis=1) - 1.0) > 1e-12):
            raise InvalidPointError("book coordinates must have unit norm")
        if np.any(pts.coords[:, 2] < -POINT_TOL):
            raise InvalidPointError("book coordinates must satisfy z >= 0")
        if np.any((pts.charts < 0) | (pts.charts >= self.pages)):
            raise InvalidPointError("book page id out of range")

    def canonicalize(self, pts: PointArray) -> PointArray:
        coords = _unit_rows(pts.coords.copy())
        charts = pts.charts.copy().astype(np.int64)
        on_spine = np.abs(coords[:, 2]) <= POINT_TOL
        coords[on_spine, 2] = 0.0
        coords[on_spine] = _unit_rows(coords[on_spine])
        charts[on_spine] = 0
        return PointArray(charts, coords)

    @staticmethod
    def _fold(coords: np.ndarray) -> np.ndarray:
        out = coords.copy()
        out[:, 2] = -out[:, 2]
        return out

    def distance(self, a: PointArray, b: PointArray) -> np.ndarray:
        same = (a.charts == b.charts) \
            | (np.abs(a.coords[:, 2]) <= POINT_TOL) \
            | (np.abs(b.coords[:, 2]) <= POINT_TOL)
        d = np.empty(len(a))
        d[same] = _chord_angle(a.coords[same], b.coords[same])
        cross = ~same
        if cross.any():
            d[cross] = self._spine_min_distance(a.coords[cross], b.coords[cross])
        return d

    def _spine_min_distance(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """min_t d(p, s(t)) + d(s(t), q) over the spine s(t) = (cos t, sin t, 0).

        256-sample coarse scan then golden-section refinement to SPINE_MIN_TOL.
        The cross-page distance function is unimodal piecewise-smooth at the
        scales handled here (and equals arccos(p . fold(q)) exactly).
        """
        n = p.shape[0]
        ts = np.linspace(0.0, 2.0 * math.pi, SPINE_SCAN_SAMPLES, endpoint=False)
        spine = np.stack([np.cos(ts), np.sin(ts), np.zeros_like(ts)], axis=1)
        # (n, S) total path lengths
        dp = _chord_angle(p[:, None, :], spine[None, :, :])
        dq = _chord_angle(q[:, None, :], spine[None, :, :])
        tot = dp + dq
        best = np.argmin(tot, axis=1)
        step = 2.0 * math.pi / SPINE_SCAN_SAMPLES
        lo = ts[best] - step
        hi = ts[best] + step

        def f(t):
            s = np.stack([np.cos(t), np.sin(t), np.zeros_like(t)], axis=1)
            return _chord_angle(p, s) + _chord_angle(q, s)

        while np.max(hi - lo) > SPINE_MIN_TOL:
            x1 = hi - GOLDEN * (hi - lo)
            x2 = lo + GOLDEN * (hi - lo)
            keep_left = f(x1) <= f(x2)
            lo = np.where(keep_left, lo, x1)
            hi = np.where(keep_left, x2, hi)
        mid = (lo + hi) / 2.0
        return f(mid)

    def _crossing_param(self, p: np.ndarray, qf: np.ndarray) -> np.ndarray:
        """Slerp parameter where the arc p -> fold(q) crosses the spine."""
        theta = _chord_angle(p, qf)
        pz = p[:, 2]
        qz = -qf[:, 2]  # original q height, >= 0
        t = np.arctan2(pz * np.sin(theta), pz * np.cos(theta) + qz)
        safe = np.where(theta < 1e-300, 1.0, theta)
        return np.clip(t / safe, 0.0, 1.0)

    def geodesic(self, a: PointArray, b: PointArray, t: np.ndarray) -> PointArray:
        a = self.canonicalize(a)
        b = self.canonicalize(b)
        t = np.asarray(t, dtype=float)
        same = (a.charts == b.charts) \
            | (np.abs(a.coords[:, 2]) <= POINT_TOL) \
            | (np.abs(b.coords[:, 2]) <= POINT_TOL)
        out_coords = np.empty_like(a.coords)
        out_charts = np.where(np.abs(a.coords[:, 2]) <= POINT_TOL, b.charts,
                              a.charts).astype(np.int64)
        if same.any():
            d = _chord_angle(a.coords[same], b.coords[same])
            if np.any(d >= math.pi - 1e-12):
                raise NonUniqueGeodesicError("antipodal endpoints on a page")
            out_coords[same] = _slerp(a.coords[same], b.coords[same],
                                      t[same] if t.ndim else t)
        cross = ~same
        if cross.any():
            p = a.coords[cross]
            qf = self._fold(b.coords[cross])
            d = _chord_angle(p, qf)
            if np.any(d >= math.pi - 1e-12):
                raise NonUniqueGeodesicError("cross-page endpoints at distance >= pi")
            tc = t[cross] if t.ndim else np.full(p.shape[0], t)
            pts = _slerp(p, qf, tc)
            tstar = self._crossing_param(p, qf)
            past = tc > tstar
            pts[past] = self._fold(pts[past])
            out_coords[cross] = pts
            oc = np.where(past, b.charts[cross], a.charts[cross])
            out_charts[cross] = oc
        return self.canonicalize(PointArray(out_charts, out_coords))

    def random_points(self, rng: np.random.Generator, n: int) -> PointArray:
        v = _unit_rows(rng.normal(size=(n, 3)))
        v[:, 2] = np.abs(v[:, 2])
        pages = rng.integers(0, self.pages, size=n)
        return self.canonicalize(PointArray(pages, v))

    def sample_near(self, base: PointArray, eps: float,
                    rng: np.random.Generator) -> PointArray:
        n = len(base)
        v = rng.normal(size=(n, 3))
        v -= np.einsum("ij,ij->i", v, base.coords)[:, None] * base.coords
        v = _unit_rows(v)
        t = eps * rng.random(n)
        out = np.cos(t)[:, None] * base.coords + np.sin(t)[:, None] * v
        out = _unit_rows(out)
        pages = base.charts.copy()
        below = out[:, 2] < 0
        if below.any():
            # walked across the spine; land on a random other page
            out[below, 2] = -out[below, 2]
            shift = rng.integers(1, self.pages, size=int(below.sum()))
            pages[below] = (pages[below] + shift) % self.pages
        return self.canonicalize(PointArray(pages, out))

    def weighted_mean(self, pts: PointArray, weights: np.ndarray,
                      tol: float = MEAN_STEP_TOL) -> TargetPoint:
        """Constrained Fréchet mean: per page, fold every point onto that
        page's two-page sphere, take the spherical mean restricted to the
        closed hemisphere, then keep the best page by exact book objective."""
        pts = self.canonicalize(pts)
        w = np.asarray(weights, dtype=float)
        sphere = UnitSphere(rho=self.rho)
        pages_present = np.unique(pts.charts)
        off_spine = np.abs(pts.coords[:, 2]) > POINT_TOL
        if not off_spine.any():
            pages_present = np.array([0])
        candidates = []
        for page in pages_present:
            folded = pts.coords.copy()
            other = (pts.charts != page) & off_spine
            folded[other, 2] = -folded[other, 2]
            m = sphere.weighted_mean(
                PointArray(np.zeros(len(pts), dtype=np.int64), folded), w, tol=tol)
            mc = np.asarray(m.coords)
            if mc[2] < 0.0:
                mc = self._spine_argmin(folded, w)
            candidates.append(TargetPoint(int(page), tuple(mc)))
        if len(candidates) == 1:
            return self.canonicalize(PointArray.single(candidates[0])).point(0)
        best, best_val = None, np.inf
        for cand in candidates:
            c = PointArray.tile(cand, len(pts))
            val = float((w * self.distance(c, pts) ** 2).sum())
            if val < best_val - 1e-15 or best is None:
                best, best_val = cand, val
        return self.canonicalize(PointArray.single(best)).point(0)

    def _spine_argmin(self, folded: np.ndarray, w: np.ndarray) -> np.ndarray:
        ts = np.linspace(0.0, 2.0 * math.pi, SPINE_SCAN_SAMPLES, endpoint=False)
        spine = np.stack([np.cos(ts), np.sin(ts), np.zeros_like(ts)], axis=1)
        obj = (w[:, None] * _chord_angle(folded[:, None, :], spine[None, :, :]) ** 2).sum(0)
        best = int(np.argmin(obj))
        step = 2.0 * math.pi / SPINE_SCAN_SAMPLES
        lo, hi = ts[best] - step, ts[best] + step

        def f(t):
            s = np.array([math.cos(t), math.sin(t), 0.0])
            return float((w * _chord_angle(folded, s[None, :]) ** 2).sum())

        while hi - lo > SPINE_MIN_TOL:
            x1 = hi - GOLDEN * (hi - lo)
            x2 = lo + GOLDEN * (hi - lo)
            if f(x1) > f(x2):
                lo = x1
            else:
                hi = x2
        t = (lo + hi) / 2.0
        return np.array([math.cos(t), math.sin(t), 0.0])


# ---------------------------------------------------------------------------
# Flat cone
# ---------------------------------------------------------------------------

@dataclass
class FlatCone(TargetSpace):
    """Euclidean cone of total angle >= 2*pi (curvature <= 0 <= 1).

    Points are polar pairs (r, phi) with phi in [0, angle); the apex r = 0 is
    a single point.  Geodesics unroll into the plane when the angular gap is
    under pi and pass through the apex otherwise.
    """

    angle: float = 2.0 * math.pi

    def __post_init__(self):
        super().__post_init__()
        self.kind = "cone"
        if self.angle < 2.0 * math.pi:
            raise AdmissibilityError("flat cone needs total angle >= 2*pi")
        if not self.description:
            self.description = f"flat cone of angle {self.angle:.6g}"

    def descriptor(self) -> dict:
        return {"kind": "cone", "angle": self.angle, "rho": self.rho}

    def coord_dim(self) -> int:
        return 2

    def point(self, r: float, phi: float) -> TargetPoint:
        if r < 0:
            raise InvalidPointError("cone radius must be nonnegative")
        arr = self.canonicalize(PointArray(np.zeros(1, dtype=np.int64),
                                           np.array([[r, phi]], dtype=float)))
        return arr.point(0)

    def validate(self, pts: PointArray) -> None:
        if pts.coords.shape[1] != 2:
            raise InvalidPointError("cone coordinates must be (r, phi)")
        if np.any(pts.coords[:, 0] < -POINT_TOL):
            raise InvalidPointError("cone radius must be nonnegative")

    def canonicalize(self, pts: PointArray) -> PointArray:
        r = pts.coords[:, 0].copy()
        phi = np.mod(pts.coords[:, 1], self.angle)
        apex = r <= POINT_TOL
        r[apex] = np.abs(r[apex])
        phi[apex] = 0.0
        return PointArray(np.zeros(len(pts), dtype=np.int64),
                          np.stack([r, phi], axis=1))

    def _gap(self, a: PointArray, b: PointArray):
        """Angular separation along the shorter way, with its sign."""
        raw = np.mod(b.coords[:, 1] - a.coords[:, 1], self.angle)
        delta = np.minimum(raw, self.angle - raw)
        sign = np.where(raw <= self.angle - raw, 1.0, -1.0)
        return delta, sign

    def distance(self, a: PointArray, b: PointArray) -> np.ndarray:
        r1, r2 = a.coords[:, 0], b.coords[:, 0]
        delta, _ = self._gap(a, b)
        unrolled = np.sqrt(np.maximum(
            r1 ** 2 + r2 ** 2 - 2.0 * r1 * r2 * np.cos(np.minimum(delta, math.pi)),
            0.0))
        through_apex = r1 + r2
        return np.where(delta <= math.pi, unrolled, through_apex)

    def geodesic(self, a: PointArray, b: PointArray, t: np.ndarray) -> PointArray:
        a = self.canonicalize(a)
        b = self.canonicalize(b)
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            t = np.full(len(a), float(t))
        d = self.distance(a, b)
        if np.any(d >= math.pi):
            raise NonUniqueGeodesicError("cone endpoints at distance >= pi")
        r1, r2 = a.coords[:, 0], b.coords[:, 0]
        delta, sign = self._gap(a, b)
        out_r = np.empty(len(a))
        out_phi = np.empty(len(a))
        flat = delta < math.pi
        if flat.any():
            x1 = r1[flat]
            x2 = r2[flat] * np.cos(delta[flat])
            y2 = r2[flat] * np.sin(delta[flat])
            px = (1 - t[flat]) * x1 + t[flat] * x2
            py = t[flat] * y2
            out_r[flat] = np.hypot(px, py)
            psi = np.arctan2(py, px)
            out_phi[flat] = a.coords[flat, 1] + sign[flat] * psi
        through = ~flat
        if through.any():
            s = t[through] * d[through]
            first = s <= r1[through]
            rr = np.where(first, r1[through] - s, s - r1[through])
            ph = np.where(first, a.coords[through, 1], b.coords[through, 1])
            out_r[through] = rr
            out_phi[through] = ph
        return self.canonicalize(PointArray(np.zeros(len(a), dtype=np.int64),
                                            np.stack([out_r, out_phi], axis=1)))

    def random_points(self, rng: np.random.Generator, n: int,
                      rmax: float = 1.5) -> PointArray:
        r = rmax * np.sqrt(rng.random(n))
        phi = self.angle * rng.random(n)
        return PointArray(np.zeros(n, dtype=np.int64), np.stack([r, phi], axis=1))

    def sample_near(self, base: PointArray, eps: float,
                    rng: np.random.Generator) -> PointArray:
        n = len(base)
        ang = 2.0 * math.pi * rng.random(n)
        rad = eps * np.sqrt(rng.random(n))
        dx, dy = rad * np.cos(ang), rad * np.sin(ang)
        px = base.coords[:, 0] + dx
        py = dy
        r = np.hypot(px, py)
        psi = np.arctan2(py, px)
        return self.canonicalize(PointArray(
            np.zeros(n, dtype=np.int64),
            np.stack([r, base.coords[:, 1] + psi], axis=1)))

    def weighted_mean(self, pts: PointArray, weights: np.ndarray,
                      tol: float = MEAN_STEP_TOL) -> TargetPoint:
        pts = self.canonicalize(pts)
        w = np.asarray(weights, dtype=float)
        W = w.sum()
        start = pts.take(slice(int(np.argmax(w)), int(np.argmax(w)) + 1))
        cur = start.copy()
        for _ in range(MEAN_MAX_ITERS):
            c = PointArray(np.zeros(len(pts), dtype=np.int64),
                           np.tile(cur.coords, (len(pts), 1)))
            delta, sign = self._gap(c, pts)
            d = self.distance(c, pts)
            # unrolled chart at cur: cur sits at (r,0)
            ok = delta <= math.pi
            qx = np.where(ok, pts.coords[:, 0] * np.cos(delta), -(d - cur.coords[0, 0]))
            qy = np.where(ok, sign * pts.coords[:, 0] * np.sin(delta), 0.0)
            vx = (w * (qx - cur.coords[0, 0])).sum() / W
            vy = (w * qy).sum() / W
            step = math.hypot(vx, vy)
            px, py = cur.coords[0, 0] + vx, vy
            cur = self.canonicalize(PointArray(
                np.zeros(1, dtype=np.int64),
                np.array([[math.hypot(px, py),
                           cur.coords[0, 1] + math.atan2(py, px)]])))
            if step < tol:
                break
        cand = cur.point(0)
        # apex can beat the smooth stationary point when points surround it
        apex = TargetPoint(0, (0.0, 0.0))
        obj_c = float((w * self.distance(PointArray.tile(cand, len(pts)), pts) ** 2).sum())
        obj_a = float((w * (pts.coords[:, 0] ** 2)).sum())
        return apex if obj_a < obj_c - 1e-15 else cand


# ---------------------------------------------------------------------------
# Cone over a target space (Lemma 2.3 utility)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConePoint:
    """Point [base, height] of the metric cone C(X); height 0 is the apex."""

    base: TargetPoint
    height: float

    def __post_init__(self):
        if self.height < 0:
            raise InvalidPointError("cone height must be nonnegative")


def cone_distance(space: TargetSpace, a: ConePoint, b: ConePoint) -> float:
    """NPC cone metric D over a CAT(1) base:
    D^2([P,x],[Q,y]) = x^2 + y^2 - 2xy cos(min(d(P,Q), pi))."""
    x, y = a.height, b.height
    if x <= POINT_TOL or y <= POINT_TOL:
        return abs(x) + abs(y) if (x > POINT_TOL or y > POINT_TOL) else 0.0
    d = space.distance_pt(a.base, b.base)
    val = x * x + y * y - 2.0 * x * y * math.cos(min(d, math.pi))
    return math.sqrt(max(val, 0.0))


# ---------------------------------------------------------------------------
# Spec-level functional API
# ---------------------------------------------------------------------------

def make_space(kind: str, rho: float = RHO_DEFAULT, **params) -> TargetSpace:
    if kind == "sphere":
        return UnitSphere(rho=rho)
    if kind == "book":
        return SphericalBook(rho=rho, pages=int(params.get("pages", 3)))
    if kind == "cone":
        return FlatCone(rho=rho, angle=float(params.get("angle", 2.5 * math.pi)))
    raise InvalidPointError(f"unknown target kind {kind!r}")


def distance(space: TargetSpace, p: TargetPoint, q: TargetPoint) -> float:
    a, b = PointArray.single(p), PointArray.single(q)
    space.validate(a)
    space.validate(b)
    return float(space.distance(space.canonicalize(a), space.canonicalize(b))[0])


def geodesic_point(space: TargetSpace, p: TargetPoint, q: TargetPoint,
                   tau: float) -> TargetPoint:
    if not 0.0 <= tau <= 1.0:
        raise AdmissibilityError("tau must lie in [0, 1]")
    if distance(space, p, q) >= math.pi:
        raise NonUniqueGeodesicError("endpoints at distance >= pi")
    return space.geodesic(PointArray.single(p), PointArray.single(q),
                          np.array([tau])).point(0)


def ball_projection(space: TargetSpace, center: TargetPoint, sigma: float,
                    p: TargetPoint) -> TargetPoint:
    return space.project_ball(center, sigma, PointArray.single(p)).point(0)


def points_equal(space: TargetSpace, p: TargetPoint, q: TargetPoint,
                 tol: float = POINT_TOL) -> bool:
    return distance(space, p, q) <= tol
