"""Pullback vector fields X = (chain)_* Y and their flows exp(tX).

A chain is a forward composition of entire periodic maps and integer
scalings; its pullback field is X(z) = 1 / (chain)'(z), and the time-t flow
satisfies chain(F_t(z)) = chain(z) + t wherever the chain is injective.
Flows are evaluated two ways: a Newton solve of the straightening identity
(fast path) and adaptive Runge-Kutta integration of dz/ds = X(z); agreement
of the two is the pipeline's main numerical-correctness guard.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .runge import PSI_SANITY_CAP, PeriodicEntireMap


class FlowAbort(RuntimeError):
    """Trajectory left the certified region; carries the stage tag and time."""

    def __init__(self, stage, t, message):
        super().__init__(f"[{stage}] t={t}: {message}")
        self.stage = stage
        self.t = t


@dataclass(frozen=True)
class PullbackField:
    """X = 1/(chain)' for a forward composition chain.

    ``factors`` entries are PeriodicEntireMap instances or ("scale", a).
    ``stage`` tags abort errors.
    """

    factors: tuple
    stage: str = "field"

    def chain_value_derivative(self, z):
        val = np.asarray(z, dtype=complex)
        der = np.ones_like(val)
        for f in self.factors:
            if isinstance(f, tuple):
                a = f[1]
                der = der * a
                val = a * val
            else:
                der = der * f.derivative(val)
                val = f(val)
        return val, der

    def chain_value(self, z):
        return self.chain_value_derivative(z)[0]

    def __call__(self, z):
        _, der = self.chain_value_derivative(z)
        return 1.0 / der

    def guard(self, z, t=0.0):
        """Abort when evaluation leaves the numerically certified region."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        val = z
        for f in self.factors:
            if isinstance(f, tuple):
                val = f[1] * val
            else:
                ps = f.psi_part(val)
                if not np.all(np.isfinite(ps)) or np.any(np.abs(ps) > PSI_SANITY_CAP):
                    raise FlowAbort(self.stage, t, "trajectory exited certified region")
                val = val - 1j * f.C + ps


def pullback(chain, stage: str = "field") -> PullbackField:
    """Field with X(z) = 1/prod(derivatives along the chain)."""
    factors = []
    for f in chain:
        if isinstance(f, PeriodicEntireMap):
            factors.append(f)
        elif isinstance(f, tuple) and f[0] == "scale":
            factors.append(("scale", float(f[1])))
        elif isinstance(f, (int, float)):
            factors.append(("scale", float(f)))
        else:
            raise TypeError(f"unsupported chain factor {f!r}")
    if not factors:
        raise ValueError("empty chain")
    return PullbackField(factors=tuple(factors), stage=stage)


# Cash-Karp embedded 4(5) pair
_CK_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (3 / 10, -9 / 10, 6 / 5),
    (-11 / 54, 5 / 2, -70 / 27, 35 / 27),
    (1631 / 55296, 175 / 512, 575 / 13824, 44275 / 110592, 253 / 4096),
)
_CK_B5 = (37 / 378, 0.0, 250 / 621, 125 / 594, 0.0, 512 / 1771)
_CK_B4 = (2825 / 27648, 0.0, 18575 / 48384, 13525 / 55296, 277 / 14336, 1 / 4)


def integrate_flow(X, t, z, tol=1e-12, h0=None, max_steps=100000, stage=None):
    """Adaptive Cash-Karp RK45 for dz/ds = X(z), s from 0 to t (vectorized)."""
    stage = stage or getattr(X, "stage", "flow")
    z = np.asarray(z, dtype=complex).copy()
    if t == 0:
        return z
    s = 0.0
    sign = np.sign(t)
    h = sign * (abs(t) / 16 if h0 is None else h0)
    steps = 0
    while sign * (t - s) > 1e-16 * abs(t):
        steps += 1
        if steps > max_steps:
            raise FlowAbort(stage, t, "integrator exceeded step budget")
        if sign * (s + h - t) > 0:
            h = t - s
        k = []
        for i in range(6):
            zi = z
            for j, a in enumerate(_CK_A[i]):
                zi = zi + h * a * k[j]
            ki = X(zi)
            if not np.all(np.isfinite(ki)):
                raise FlowAbort(stage, t, "field evaluation left certified region")
            k.append(ki)
        z5 = z + h * sum(b * ki for b, ki in zip(_CK_B5, k))
        z4 = z + h * sum(b * ki for b, ki in zip(_CK_B4, k))
        err = float(np.max(np.abs(z5 - z4)))
        scale_tol = tol * max(1.0, float(np.max(np.abs(z))))
        if err <= scale_tol or abs(h) < 1e-14:
            s += h
            z = z5
            if err > 0:
                h *= min(4.0, 0.9 * (scale_tol / err) ** 0.2)
            else:
                h *= 4.0
        else:
            h *= max(0.1, 0.9 * (scale_tol / err) ** 0.25)
    return z


def rk4_fixed(X, t, z, n_steps):
    """Classic fixed-step RK4 (used by the integrator-order property test)."""
    z = np.asarray(z, dtype=complex).copy()
    h = t / n_steps
    for _ in range(n_steps):
        k1 = X(z)
        k2 = X(z + 0.5 * h * k1)
        k3 = X(z + 0.5 * h * k2)
        k4 = X(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return z


def newton_flow(X, t, z, tol=1e-13, max_iter=60, stage=None):
    """Fast path: solve chain(F) = chain(z) + t by Newton from F0 = z + t X(z).

    Returns None on non-convergence (caller falls back to integration).
    """
    z = np.asarray(z, dtype=complex)
    target, der0 = X.chain_value_derivative(z)
    target = target + t
    F = z + t / der0
    for _ in range(max_iter):
        val, der = X.chain_value_derivative(F)
        step = (val - target) / der
        if not np.all(np.isfinite(step)):
            return None
        F = F - step
        if float(np.max(np.abs(step))) < tol * max(1.0, float(np.max(np.abs(F)))):
            return F
    return None


@dataclass(frozen=True)
class FlowMap:
    """Time-t flow of a pullback field with dual-path evaluation."""

    field: PullbackField
    t: float
    tol: float = 1e-12
    cross_validate: bool = False
    cross_tol: float = 1e-9

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        self.field.guard(z, self.t)
        fast = newton_flow(self.field, self.t, z, stage=self.field.stage)
        if fast is None:
            return integrate_flow(self.field, self.t, z, tol=self.tol)
        if self.cross_validate:
            slow = integrate_flow(self.field, self.t, z, tol=self.tol)
            gap = float(np.max(np.abs(fast - slow)))
            if gap > self.cross_tol:
                raise FlowAbort(self.field.stage, self.t,
                                f"conjugacy and integration disagree ({gap:.3e})")
        return fast


def flow(X: PullbackField, t: float, z, validate: bool = False):
    """F_t(z); Newton fast path cross-checked against integration on demand."""
    return FlowMap(field=X, t=t, cross_validate=validate)(z)


@dataclass
class UnivalenceReport:
    n_points: int
    collisions: list = field(default_factory=list)
    winding_failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.collisions and not self.winding_failures


def check_univalent(evaluator, samples, min_sep_factor=0.5, n_boxes=4):
    """Pairwise image-collision check plus argument-principle windings.

    ``samples`` should be a 2-d grid (complex array shaped (ny, nx)); the
    winding check runs over a few sub-rectangle boundaries of the grid.
    """
    from . import kernels

    samples = np.asarray(samples, dtype=complex)
    grid = samples.ravel()
    images = np.asarray(evaluator(grid), dtype=complex)
    report = UnivalenceReport(n_points=len(grid))
    # collision scan: nearest-neighbor image distance vs domain separation
    order = np.lexsort((images.imag, images.real))
    si = images[order]
    sz = grid[order]
    d_img = np.abs(np.diff(si))
    d_dom = np.abs(np.diff(sz))
    med = float(np.median(d_img)) if len(d_img) else 0.0
    for i in np.flatnonzero((d_img < 1e-9 + 1e-9 * med) & (d_dom > 1e-6)):
        report.collisions.append((complex(sz[i]), complex(sz[i + 1])))
    if samples.ndim == 2 and min(samples.shape) >= 3:
        ny, nx = samples.shape
        for b in range(n_boxes):
            i0 = (b * (ny - 2)) // n_boxes
            j0 = (b * (nx - 2)) // n_boxes
            i1 = min(ny - 1, i0 + max(2, ny // 2))
            j1 = min(nx - 1, j0 + max(2, nx // 2))
            rect = np.concatenate([samples[i0, j0:j1], samples[i0:i1, j1],
                                   samples[i1, j1:j0:-1], samples[i1:i0:-1, j0]])
            if len(rect) < 8:
                continue
            center = samples[(i0 + i1) // 2, (j0 + j1) // 2]
            loop = np.asarray(evaluator(rect), dtype=complex)
            w0 = np.asarray(evaluator(np.array([center])), dtype=complex)
            wn = kernels.winding_number(loop, w0)[0]
            if wn != 1:
                report.winding_failures.append((complex(center), int(wn)))
    return report


@dataclass
class InvarianceReport:
    interior_violations: int
    boundary_residual: float
    n_interior: int
    n_boundary: int

    @property
    def ok(self):
        return self.interior_violations == 0 and self.boundary_residual < 1e-8


def check_invariant(omega, flow_map: FlowMap, interior_samples=None,
                    n_boundary=256) -> InvarianceReport:
    """Flow invariance of the carved domain for real t.

    Interior samples must stay inside; on the boundary trace the straightening
    level Im Psi_1 must be preserved (Im(chain o F_t) = Im(chain) for real t).
    """
    if interior_samples is None:
        tr = omega.trace
        interior_samples = tr + 1j * np.linspace(0.1, 1.0, 8)[:, None]
        interior_samples = interior_samples.ravel()[::max(1, len(tr) // 32)]
    interior_samples = np.asarray(interior_samples, dtype=complex)
    moved = flow_map(interior_samples)
    still_in = omega.contains(moved)
    idx = np.linspace(0, len(omega.trace) - 1, n_boundary).astype(int)
    tr = omega.trace[idx]
    moved_tr = flow_map(tr)
    lev0 = omega.level(tr)
    lev1 = omega.level(moved_tr)
    resid = float(np.max(np.abs(lev1 - lev0)))
    return InvarianceReport(interior_violations=int(np.sum(~still_in)),
                            boundary_residual=resid,
                            n_interior=len(interior_samples),
                            n_boundary=n_boundary)
