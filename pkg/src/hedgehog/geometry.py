"""Jordan curves, periodic domains, the exponential covering, and set distances.

Curves are dense polylines (complex samples in cyclic order, default 4096 for
generated shapes) with an optional exact tag for shapes that admit closed-form
membership.  All values are immutable after construction and every operation
is a pure function.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import kernels

SNAP_TOL = 1e-9  # boundary snapping tolerance, w-plane units

INSIDE = 1
BOUNDARY = 0
OUTSIDE = -1


def cover(z):
    """Universal covering E(z) = exp(2*pi*i*z), upper half-plane onto punctured disk."""
    return np.exp(2j * np.pi * np.asarray(z, dtype=complex))


def cover_section(w, branch=0):
    """Right inverse of the covering: z with E(z) = w and Re z in [branch, branch+1).

    Raises ValueError at w = 0 (the covering has no preimage of 0).
    """
    w = np.asarray(w, dtype=complex)
    if np.any(w == 0):
        raise ValueError("covering has no preimage of 0")
    re = np.angle(w) / (2 * np.pi)
    re = np.mod(re, 1.0) + branch
    im = -np.log(np.abs(w)) / (2 * np.pi)
    out = re + 1j * im
    return out if out.shape else complex(out)


def _signed_area(samples):
    x, y = samples.real, samples.imag
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class JordanCurve:
    """Sampled boundary of a Jordan domain, positively oriented.

    ``tag`` marks exact shapes ('circle', 'keyhole', 'spiral-polyline') and
    ``tag_params`` carries their defining constants; tagged curves still keep
    full polyline samples so every generic operation works uniformly.
    """

    samples: np.ndarray
    tag: Optional[str] = None
    tag_params: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=complex)
        if len(s) < 3:
            raise ValueError("curve needs at least 3 samples")
        if np.any(np.abs(np.diff(s, append=s[:1])) == 0.0):
            raise ValueError("degenerate curve: repeated consecutive samples")
        if _signed_area(s) < 0:
            s = s[::-1]
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return len(self.samples)

    def is_simple(self):
        """Simplicity at sample resolution (delegates to shapely's C check)."""
        from shapely.geometry import LinearRing

        ring = LinearRing(np.column_stack([self.samples.real, self.samples.imag]))
        return ring.is_simple and ring.is_valid

    def validate(self, require_origin=False):
        """Raise ValueError on any violated curve invariant."""
        if not self.is_simple():
            raise ValueError("curve is not simple at sample resolution")
        if require_origin and winding_number(self, 0j) != 1:
            raise ValueError("origin is not interior (winding != 1)")

    def max_radius(self):
        return float(np.max(np.abs(self.samples)))

    def min_radius(self):
        return float(np.min(np.abs(self.samples)))

    def to_csv(self, path):
        """Curve exchange format: 're,im' rows in cyclic order."""
        np.savetxt(path, np.column_stack([self.samples.real, self.samples.imag]),
                   delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path, tag=None, tag_params=None):
        arr = np.loadtxt(path, delimiter=",", dtype=float)
        return cls(arr[:, 0] + 1j * arr[:, 1], tag=tag, tag_params=tag_params or {})


def circle(radius, n=4096, center=0j):
    th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return JordanCurve(center + radius * np.exp(1j * th), tag="circle",
                       tag_params={"radius": float(radius), "center": complex(center)})


def ellipse(a, b, n=4096):
    th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return JordanCurve(a * np.cos(th) + 1j * b * np.sin(th))


def resample(curve_or_samples, n):
    """Resample a closed polyline to n points, uniform in arc length."""
    s = curve_or_samples.samples if isinstance(curve_or_samples, JordanCurve) else \
        np.asarray(curve_or_samples, dtype=complex)
    closed = np.append(s, s[0])
    seg = np.abs(np.diff(closed))
    t = np.concatenate([[0.0], np.cumsum(seg)])
    total = t[-1]
    tq = np.linspace(0.0, total, n, endpoint=False)
    re = np.interp(tq, t, closed.real)
    im = np.interp(tq, t, closed.imag)
    return re + 1j * im


def winding_number(curve, pts):
    """Winding number of the curve around each point (vectorized)."""
    pts_arr = np.atleast_1d(np.asarray(pts, dtype=complex))
    wn = kernels.winding_number(curve.samples, pts_arr)
    return wn if np.ndim(pts) else int(wn[0])


def classify_points(curve, pts, tol=SNAP_TOL):
    """Three-state membership: INSIDE / BOUNDARY / OUTSIDE per point.

    Points within ``tol`` of the sampled boundary are BOUNDARY; otherwise the
    verdict is by winding number (1 means inside).
    """
    pts_arr = np.atleast_1d(np.asarray(pts, dtype=complex))
    wn = kernels.winding_number(curve.samples, pts_arr)
    out = np.where(wn == 1, INSIDE, OUTSIDE).astype(np.int8)
    d = kernels.segment_distance(curve.samples, pts_arr)
    out[d <= tol] = BOUNDARY
    return out if np.ndim(pts) else int(out[0])


def contains(curve, w, tol=SNAP_TOL):
    """True iff w is strictly interior (winding 1 and off the boundary band)."""
    c = classify_points(curve, w, tol=tol)
    return np.asarray(c == INSIDE) if np.ndim(w) else c == INSIDE


def hausdorff_distance(A, B):
    """Symmetric Hausdorff distance between two finite sample sets."""
    A = np.atleast_1d(np.asarray(A, dtype=complex))
    B = np.atleast_1d(np.asarray(B, dtype=complex))
    if len(A) == 0 or len(B) == 0:
        raise ValueError("hausdorff_distance of an empty set")
    ta = cKDTree(np.column_stack([A.real, A.imag]))
    tb = cKDTree(np.column_stack([B.real, B.imag]))
    d_ab = float(np.max(tb.query(np.column_stack([A.real, A.imag]))[0]))
    d_ba = float(np.max(ta.query(np.column_stack([B.real, B.imag]))[0]))
    return max(d_ab, d_ba)


def neighborhood_contains(A, B, eps):
    """True iff every point of B is within eps of some point of A."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    A = np.atleast_1d(np.asarray(A, dtype=complex))
    B = np.atleast_1d(np.asarray(B, dtype=complex))
    ta = cKDTree(np.column_stack([A.real, A.imag]))
    d = ta.query(np.column_stack([B.real, B.imag]))[0]
    return bool(np.max(d) <= eps)


@dataclass(frozen=True)
class HalfPlane:
    """Upper half-plane {Im z > level}."""

    level: float

    def contains(self, z):
        return np.asarray(z).imag > self.level


@dataclass(frozen=True)
class PeriodicDomain:
    """1-periodic domain Lambda = E^{-1}(D) for a Jordan domain D with 0 interior."""

    base: JordanCurve

    def __post_init__(self):
        if self.base.max_radius() >= 1.0:
            raise ValueError("base domain must lie in the open unit disk")
        if winding_number(self.base, 0j) != 1:
            raise ValueError("0 must be interior to the base domain")

    def classify_z(self, z, tol=SNAP_TOL):
        """Three-state membership of z-plane points in Lambda."""
        return classify_points(self.base, cover(z), tol=tol)

    def contains_z(self, z, tol=SNAP_TOL):
        c = self.classify_z(z, tol=tol)
        return np.asarray(c == INSIDE) if np.ndim(z) else c == INSIDE

    def boundary_strip(self, periods=1):
        """Lifted boundary polyline over `periods` periods, branch-continuous."""
        w = self.base.samples
        re = np.angle(w) / (2 * np.pi)
        re = np.unwrap(re, period=1.0)
        if re[-1] < re[0]:  # enforce increasing Re along positive orientation
            re = re[::-1]
            w = w[::-1]
        re = re - np.floor(re[0])
        im = -np.log(np.abs(w)) / (2 * np.pi)
        one = re + 1j * im
        return np.concatenate([one + k for k in range(periods)])

    def min_boundary_height(self):
        return float(-np.log(self.base.max_radius()) / (2 * np.pi))

    def max_boundary_height(self):
        return float(-np.log(self.base.min_radius()) / (2 * np.pi))


@dataclass(frozen=True)
class CrossCut:
    """Jordan arc in the closure of the complement, meeting the compact at its endpoints."""

    arc: np.ndarray

    def __post_init__(self):
        arc = np.asarray(self.arc, dtype=complex)
        if len(arc) < 2 or arc[0] == arc[-1]:
            raise ValueError("cross-cut needs distinct endpoints")
        arc.setflags(write=False)
        object.__setattr__(self, "arc", arc)

    @property
    def a(self):
        return complex(self.arc[0])

    @property
    def b(self):
        return complex(self.arc[-1])

    def validate_against(self, boundary, tol=1e-3):
        """Endpoints on the compact's boundary, interior samples off the compact."""
        d_ends = kernels.segment_distance(boundary.samples, np.array([self.a, self.b]))
        if np.max(d_ends) > tol:
            raise ValueError("cross-cut endpoints not on the boundary (beyond tolerance)")
        inner = self.arc[1:-1]
        if len(inner) and np.any(kernels.winding_number(boundary.samples, inner) == 1):
            raise ValueError("cross-cut crosses the compact")


@dataclass(frozen=True)
class BoundedSide:
    """Membership predicate for G(gamma, complement of K): the bounded side."""

    loop: np.ndarray          # gamma followed by the chosen boundary sub-arc
    boundary: JordanCurve     # boundary of the compact K
    gamma: CrossCut

    def __call__(self, pts, tol=SNAP_TOL):
        pts_arr = np.atleast_1d(np.asarray(pts, dtype=complex))
        enclosed = kernels.winding_number(self.loop, pts_arr) != 0
        in_K = kernels.winding_number(self.boundary.samples, pts_arr) == 1
        out = enclosed & ~in_K
        near = (kernels.segment_distance(self.boundary.samples, pts_arr) <= tol) | \
               (kernels.segment_distance(self.gamma.arc, pts_arr, closed=False) <= tol)
        out[near] = False
        return out if np.ndim(pts) else bool(out[0])


def bounded_side(gamma, boundary, interior_probe=None, tol=1e-3):
    """Select the bounded component G(gamma, C^ - K) as a predicate.

    The cross-cut is concatenated with each of the two boundary sub-arcs
    between its endpoints; the loop that does NOT enclose the compact's
    interior bounds G.
    """
    gamma.validate_against(boundary, tol=tol)
    if interior_probe is None:
        if kernels.winding_number(boundary.samples, np.array([0j]))[0] == 1:
            interior_probe = 0j
        else:
            interior_probe = complex(np.mean(boundary.samples))
    s = boundary.samples
    ia = int(np.argmin(np.abs(s - gamma.a)))
    ib = int(np.argmin(np.abs(s - gamma.b)))
    if ia == ib:
        raise ValueError("cross-cut endpoints snap to the same boundary sample")
    n = len(s)
    if ia < ib:
        arc1 = s[ia:ib + 1]
        arc2 = np.concatenate([s[ib:], s[:ia + 1]])
    else:
        arc1 = s[ib:ia + 1][::-1]
        arc2 = np.concatenate([s[ia:], s[:ib + 1]])[::-1]
    # each candidate sub-arc runs from the sample nearest a to the one nearest b
    probe = np.array([interior_probe])
    for sub in (arc1, arc2):
        loop = np.concatenate([gamma.arc, sub[::-1]])  # a -> b along gamma, b -> a along boundary
        if kernels.winding_number(loop, probe)[0] == 0:
            return BoundedSide(loop=loop, boundary=boundary, gamma=gamma)
    raise ValueError("no candidate loop excludes the compact interior; invalid cross-cut")
