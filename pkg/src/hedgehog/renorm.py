"""Staged inverse-renormalization engine.

Builds stages (Psi_n, a_n, Omega_n) over supplied periodic domains, composes
Phi_n = M_{a_n} o Psi_n o ... o M_{a_0} o Psi_0, generates the exact rational
time sets A_n, evaluates the semi-flows F_{n,t}, and answers membership
queries for the nested domains D_n and their disk-plane compacts K_n.

Stage construction is strictly sequential; a built state is frozen and all
evaluation is pure, so queries are safe to run concurrently.
"""

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import geometry as geo
from .flow import FlowAbort, integrate_flow, newton_flow, pullback
from .geometry import BOUNDARY, INSIDE, OUTSIDE, PeriodicDomain
from .runge import (DeltaCertificate, LinearizerPack, OmegaDomain,
                    PeriodicEntireMap, PolynomialGerm, StageError,
                    approximate_linearizer)

A_CAP = 10 ** 6  # admissibility search cap for the integers a_n

BOUNDARY_BAND = 1e-7  # half-width of the K_n boundary band, in Im-Psi units


@dataclass(frozen=True)
class Stage:
    pack: LinearizerPack
    a: int
    M_hat: float


@dataclass(frozen=True)
class TimeRational:
    """Exact t = p / (a_0 ... a_n); never a float."""

    p: int
    stage: int
    denominator: int

    @property
    def value(self):
        return Fraction(self.p, self.denominator)

    def __float__(self):
        return self.p / self.denominator

    def digits(self, a_seq):
        """Centered digits eps_k with p = (((eps_0) a_1 + eps_1) a_2 + ...)."""
        p = self.p
        out = []
        for a in reversed(a_seq[1: self.stage + 1]):
            r = p % a
            eps = r if r <= a // 2 else r - a
            if eps not in (-1, 0, 1):
                raise ValueError(f"time {self} is not in A_{self.stage}")
            out.append(eps)
            p = (p - eps) // a
        if p not in (-1, 0, 1):
            raise ValueError(f"time {self} is not in A_{self.stage}")
        out.append(p)
        return out[::-1]  # eps_0 ... eps_n


@dataclass
class StageState:
    """Frozen-after-build induction state."""

    M_schedule: list
    stages: list = field(default_factory=list)
    build_options: dict = field(default_factory=dict)

    @property
    def n_stages(self):
        return len(self.stages)

    def a_seq(self):
        return [s.a for s in self.stages]

    def denominator(self, n):
        d = 1
        for s in self.stages[:n + 1]:
            d *= s.a
        return d

    def phi_factors(self, n):
        """Application-ordered factors of Phi_n = M_{a_n} o Psi_n o ... o Psi_0."""
        out = []
        for s in self.stages[:n + 1]:
            out.append(s.pack.psi)
            out.append(("scale", s.a))
        return out

    def chain_field(self, n):
        """X_n = (Phi_{n-1})_* (Psi_n)_* Y: straightening chain Psi_n o Phi_{n-1}."""
        factors = self.phi_factors(n - 1) if n >= 1 else []
        factors = factors + [self.stages[n].pack.psi]
        return pullback(factors, stage=f"stage{n}")

    def phi_eval(self, n, z, with_derivative=False):
        """Forward composition Phi_n(z) with overflow guard."""
        val = np.asarray(z, dtype=complex)
        der = np.ones_like(val)
        for s in self.stages[:n + 1]:
            if with_derivative:
                der = der * s.pack.psi.derivative(val)
            val = s.pack.psi(val)
            if np.any(np.abs(val.imag) > 1e6) or not np.all(np.isfinite(val)):
                raise StageError("phi_eval", "intermediate image exceeded overflow guard")
            val = s.a * val
            der = der * s.a
        return (val, der) if with_derivative else val

    def verified_depth(self, n):
        """Deepest half-plane level at which stage-n evaluations are certified."""
        d = min(self.M_schedule[: n + 2] or [1.0])
        for s in self.stages[: n + 1]:
            d = min(d, s.pack.delta.depth)
        return d

    def times(self, n):
        """A_n as exact rationals; |A_n| = 3^{n+1} before deduplication."""
        nums = [-1, 0, 1]
        for s in self.stages[1: n + 1]:
            nums = [p * s.a + eps for p in nums for eps in (-1, 0, 1)]
        den = self.denominator(n)
        uniq = sorted(set(nums))
        return [TimeRational(p=p, stage=n, denominator=den) for p in uniq]

    def semiflow(self, t: TimeRational, z, tol=1e-12, validate=False):
        """F_{n,t}(z) by the defining recursion: the stage-n factor acts first."""
        eps = t.digits(self.a_seq())
        val = np.asarray(z, dtype=complex)
        for k in range(t.stage, -1, -1):
            e = eps[k]
            if e == 0:
                continue
            X = self.chain_field(k)
            tk = e / self.stages[k].a
            fast = newton_flow(X, tk, val)
            if fast is None:
                fast = integrate_flow(X, tk, val, tol=tol)
            elif validate:
                slow = integrate_flow(X, tk, val, tol=tol)
                gap = float(np.max(np.abs(fast - slow)))
                if gap > 1e-9:
                    raise FlowAbort(f"stage{k}", tk,
                                    f"dual-path disagreement {gap:.3e}")
            val = fast
        return val

    def membership(self, n, w, band=BOUNDARY_BAND):
        """Three-state K_n membership for disk-plane points w.

        0 is INSIDE (the compacts contain the fixed point).  A point is
        BOUNDARY when every gate passes at least up to the band and some gate
        lands within the band.
        """
        w = np.atleast_1d(np.asarray(w, dtype=complex))
        out = np.full(w.shape, OUTSIDE, dtype=np.int8)
        at_zero = w == 0
        out[at_zero] = INSIDE
        live = ~at_zero & (np.abs(w) < 1.0)
        if not np.any(live):
            return out
        z = geo.cover_section(w[live], 0)
        verdict = self._membership_z(n, z, band=band)
        out[live] = verdict
        return out

    def membership_z(self, n, z, band=BOUNDARY_BAND):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        return self._membership_z(n, z, band=band)

    def _membership_z(self, n, z, band):
        verdict = np.full(z.shape, INSIDE, dtype=np.int8)
        on_band = np.zeros(z.shape, dtype=bool)
        cur = np.asarray(z, dtype=complex).copy()
        alive = np.ones(z.shape, dtype=bool)
        for k, s in enumerate(self.stages[:n + 1]):
            if not np.any(alive):
                break
            idx = np.flatnonzero(alive)
            zi = cur[idx]
            lam_state = s.pack.lam.classify_z(zi)
            psi1 = s.pack.psi1
            ps = psi1.psi_part(zi)
            good = np.isfinite(ps) & (np.abs(ps) < 1e6)
            lev = np.where(good, (zi - 1j * psi1.C + ps).imag, -np.inf)
            margin = lev - 2 * s.pack.kappa
            hard_out = (lam_state == OUTSIDE) | (margin < -band)
            soft = (lam_state == BOUNDARY) | (np.abs(margin) <= band)
            verdict[idx[hard_out]] = OUTSIDE
            alive[idx[hard_out]] = False
            on_band[idx[~hard_out & soft]] = True
            if k < n:
                keep = idx[~hard_out]
                cur[keep] = s.a * psi1.shifted(2 * s.pack.kappa)(cur[keep])
        verdict[alive & on_band & (verdict == INSIDE)] = BOUNDARY
        return verdict

    def boundary_ray_trace(self, n, n_rays=720, r_hi=0.999, tol=1e-12):
        """Points of the K_n boundary found by bisection along rays from 0.

        Rays whose bracket fails (no inside point below r_hi) are skipped and
        counted; returns (points, skipped).
        """
        th = 2 * np.pi * np.arange(n_rays) / n_rays
        dirs = np.exp(1j * th)
        lo = np.zeros(n_rays)
        hi = np.full(n_rays, r_hi)
        # bracket: walk inward until inside
        probe = np.geomspace(1e-6, r_hi, 40)
        inside_r = np.zeros(n_rays)
        found = np.zeros(n_rays, dtype=bool)
        for r in probe:
            m = self.membership(n, r * dirs) == INSIDE
            newly = m & ~found
            inside_r[newly] = r
            found |= newly
        ok = found
        lo = inside_r.copy()
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            m = self.membership(n, mid * dirs) == INSIDE
            lo = np.where(m, mid, lo)
            hi = np.where(m, hi, mid)
            if float(np.max(hi[ok] - lo[ok])) < tol if np.any(ok) else True:
                break
        pts = (0.5 * (lo + hi) * dirs)[ok]
        return pts, int(np.sum(~ok))


def _min_im_after_flow(state_or_field, X, t, depth_in, n_grid=20):
    """min Im of F_t over a grid on the line Im = depth_in (one period wide)."""
    xs = np.linspace(0.0, 1.0, n_grid, endpoint=False)
    z = xs + 1j * depth_in
    fast = newton_flow(X, t, z)
    if fast is None:
        fast = integrate_flow(X, t, z, tol=1e-11)
    return float(np.min(fast.imag))


def _select_a(X, delta: DeltaCertificate, depth_next, depth_cur, a_cap=A_CAP):
    """Minimal integer a >= 3 with 1/a < delta and the half-plane condition
    exp(tX): {Im > depth_next} -> {Im > depth_cur} verified on a grid for
    |t| <= 1/a."""
    a = max(3, int(np.floor(1.0 / delta.delta)) + 1)
    while a <= a_cap:
        ok = True
        for t in (1.0 / a, -1.0 / a):
            try:
                m = _min_im_after_flow(None, X, t, depth_next)
            except FlowAbort:
                ok = False
                break
            if m < depth_cur:
                ok = False
                break
        if ok:
            return a
        a = a + max(1, a // 4)
    raise StageError("select_a", f"no admissible a below cap {a_cap}")


def init_stage0(lam0: PeriodicDomain, eps0: float, M0: float, M1: float,
                **build_kwargs) -> StageState:
    """Stage 0: build the pack over Lambda_0, pick a_0, set D_0 = Omega_0."""
    if not (M0 > M1 > 0):
        raise StageError("init_stage0", "need M0 > M1 > 0")
    state = StageState(M_schedule=[M0, M1], build_options=dict(build_kwargs))
    pack = approximate_linearizer(lam0, eps0, M0, **build_kwargs)
    X0 = pullback([pack.psi], stage="stage0")
    depth_ver = min(M1, pack.delta.depth)
    a0 = _select_a(X0, pack.delta, -depth_ver, -min(M0, pack.delta.depth))
    state.stages.append(Stage(pack=pack, a=a0, M_hat=M0))
    return state


def compute_m_hat(state: StageState, M0: float) -> float:
    """Verified lower bound: Phi_{n-1}({Im > -M0}) subset {Im > -M_hat}.

    Uses per-factor coefficient bounds at the deepest evaluable level; when
    the series bound explodes below the axis the bound is taken at the
    certified depth instead (recorded by the caller).
    """
    y = -min(M0, state.verified_depth(state.n_stages - 1))
    for s in state.stages:
        psi = s.pack.psi
        b = psi.coefficient_bound(-y)  # sum |q'_k| ... bound uses dpsi
        # Im Psi(z) >= Im z - C - |psi(z)|; |psi| <= sum |q_k| e^{-2 pi k y}
        k = np.arange(1, len(psi.psi) + 1)
        with np.errstate(over="ignore"):
            bpsi = float(np.sum(np.abs(psi.psi) * np.exp(-2 * np.pi * k * y))) \
                if len(psi.psi) else 0.0
        if not np.isfinite(bpsi):
            raise StageError("advance_stage", "psi bound overflow when computing M_hat")
        y = s.a * (y - psi.C - bpsi)
    return -y


def advance_stage(state: StageState, lam_n: PeriodicDomain, eps_n: float,
                  M_next: float, **build_kwargs) -> StageState:
    """Append stage n: Psi_n over Lambda_n at level M_hat_n, pick a_n."""
    n = state.n_stages
    if n == 0:
        raise StageError("advance_stage", "call init_stage0 first")
    if not (M_next < state.M_schedule[-1]):
        raise StageError("advance_stage", "M schedule must strictly decrease")
    opts = dict(state.build_options)
    opts.update(build_kwargs)
    M_hat = compute_m_hat(state, state.M_schedule[0])
    pack = approximate_linearizer(lam_n, eps_n, M_hat, **opts)
    state.M_schedule.append(M_next)
    state.stages.append(Stage(pack=pack, a=3, M_hat=M_hat))  # placeholder a
    Xn = state.chain_field(n)
    depth_next = min(M_next, state.verified_depth(n))
    depth_cur = min(state.M_schedule[n], state.verified_depth(n))
    a_n = _select_a(Xn, pack.delta, -depth_next, -depth_cur)
    state.stages[n] = Stage(pack=pack, a=a_n, M_hat=M_hat)
    return state


@dataclass
class InductionReport:
    stage: int
    halfplane_residual: float      # hypothesis (1), at the verified depth
    verified_depth: float
    univalence_residual: float     # hypothesis (2): max |Im Phi_{n-1}| on boundary samples
    winding_ok: bool
    conjugacy_residual: float      # hypothesis (3)
    commutation_residual: float
    details: dict = field(default_factory=dict)

    def ok(self, tol_conj=1e-6, tol_comm=1e-7):
        return (self.halfplane_residual <= 1e-9 and self.winding_ok and
                self.conjugacy_residual < tol_conj and
                self.commutation_residual < tol_comm)


def check_induction(state: StageState, n: int, n_samples=200, seed=5) -> InductionReport:
    """Residuals for the three induction hypotheses at stage n."""
    rng = np.random.default_rng(seed)
    # (1): F_{n-1,t} maps {Im > -M_n} into {Im > -M_{n-1}} at the verified depth
    depth = state.verified_depth(n - 1) if n >= 1 else state.verified_depth(0)
    Mn = min(state.M_schedule[min(n, len(state.M_schedule) - 1)], depth)
    Mprev = min(state.M_schedule[max(n - 1, 0)], depth)
    resid1 = 0.0
    if n >= 1:
        for t in state.times(n - 1):
            tf = float(t)
            if tf == 0.0:
                continue
            z = rng.random(24) + 1j * (-Mn)
            img = state.semiflow(t, z)
            resid1 = max(resid1, max(0.0, float(-Mprev - np.min(img.imag))))
    # (2): Phi_{n-1} univalent onto H over D_{n-1}: boundary -> R, interior windings
    uni_resid = 0.0
    winding_ok = True
    m = n - 1 if n >= 1 else 0
    bdry, _ = state.boundary_ray_trace(m, n_rays=256)
    if len(bdry):
        zb = geo.cover_section(bdry, 0)
        img_b = state.phi_eval(m, zb)
        uni_resid = float(np.max(np.abs(img_b.imag)))
        # interior probes: distinct windings impossible to check cheaply for a
        # non-closed image; use injectivity of sorted images on a grid instead
        ys = np.exp(rng.uniform(np.log(0.05), np.log(2.0), n_samples))
        zz = rng.random(n_samples) + 1j * (state.stages[0].pack.omega.min_height() + ys)
        keep = state.membership_z(m, zz) == INSIDE
        imgs = state.phi_eval(m, zz[keep])
        order = np.lexsort((imgs.imag, imgs.real))
        d_img = np.abs(np.diff(imgs[order]))
        d_dom = np.abs(np.diff(zz[keep][order]))
        winding_ok = not np.any((d_img < 1e-10) & (d_dom > 1e-6))
    # (3): Phi_{n-1} semi-conjugates F_{n-1} to powers of T
    resid3 = 0.0
    if n >= 1:
        interior = _interior_samples(state, n - 1, n_samples // 2, rng)
        for t in state.times(n - 1):
            p = t.p
            img0 = state.phi_eval(n - 1, interior)
            img1 = state.phi_eval(n - 1, state.semiflow(t, interior))
            resid3 = max(resid3, float(np.max(np.abs(img1 - img0 - p))))
    # commutation of the current semi-flow family on a grid
    resid_c = 0.0
    if n >= 1:
        ts = [t for t in state.times(n) if t.p != 0][:4]
        grid = _interior_samples(state, n, 25, rng)
        for i in range(len(ts)):
            for j in range(i + 1, len(ts)):
                ab = state.semiflow(ts[i], state.semiflow(ts[j], grid))
                ba = state.semiflow(ts[j], state.semiflow(ts[i], grid))
                resid_c = max(resid_c, float(np.max(np.abs(ab - ba))))
    return InductionReport(stage=n, halfplane_residual=resid1,
                           verified_depth=depth,
                           univalence_residual=uni_resid, winding_ok=winding_ok,
                           conjugacy_residual=resid3, commutation_residual=resid_c)


def _interior_samples(state, n, count, rng):
    """Random points of D_n, rejection-sampled above the stage-0 floor."""
    out = []
    floor = state.stages[0].pack.omega.min_height()
    tries = 0
    while len(out) < count and tries < 60:
        tries += 1
        z = rng.random(4 * count) + 1j * (floor + np.exp(rng.uniform(np.log(0.02), np.log(3.0), 4 * count)))
        keep = state.membership_z(n, z) == INSIDE
        out.extend(z[keep][: count - len(out)].tolist())
    if not out:
        raise StageError("check_induction", f"could not sample interior of D_{n}")
    return np.asarray(out, dtype=complex)


def cross_stage_consistency(state: StageState, n: int, n_pts=40, seed=6):
    """max |F_{n,t} - F_{n+1,t}| over t in A_n (= A_n intersect A_{n+1})."""
    if n + 1 >= state.n_stages:
        raise StageError("consistency", "need stage n+1 built")
    rng = np.random.default_rng(seed)
    z = _interior_samples(state, n + 1, n_pts, rng)
    worst = 0.0
    a_next = state.stages[n + 1].a
    for t in state.times(n):
        t_up = TimeRational(p=t.p * a_next, stage=n + 1,
                            denominator=t.denominator * a_next)
        worst = max(worst, float(np.max(np.abs(state.semiflow(t, z) -
                                               state.semiflow(t_up, z)))))
    return worst


# ---------------------------------------------------------------------------
# serialization

def _carr(a):
    return [[float(c.real), float(c.imag)] for c in np.asarray(a, dtype=complex)]


def _cparse(lst):
    arr = np.asarray(lst, dtype=float)
    if arr.size == 0:
        return np.zeros(0, dtype=complex)
    return arr[:, 0] + 1j * arr[:, 1]


def save_state(state: StageState, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"version": 1, "M_schedule": state.M_schedule,
                "stages": [], "build_options": _jsonable(state.build_options)}
    for i, s in enumerate(state.stages):
        pack = s.pack
        rec = {
            "a": s.a, "M_hat": s.M_hat, "kappa": pack.kappa, "M": pack.M,
            "h_rho": pack.h_rho, "C": pack.psi.C,
            "delta": {"delta": pack.delta.delta, "depth": pack.delta.depth,
                      "requested_depth": pack.delta.requested_depth,
                      "bound": pack.delta.bound},
            "psi": _carr(pack.psi.psi), "dpsi": _carr(pack.psi.dpsi),
            "poly": _carr(pack.poly.coefficients),
            "poly_scale": pack.poly.scale,
            "poly_error": pack.poly.achieved_error,
            "lam_samples": _carr(pack.lam.base.samples),
            "lam_tag": pack.lam.base.tag,
            "lam_tag_params": _jsonable(pack.lam.base.tag_params),
            "omega_trace": _carr(pack.omega.trace),
            "diagnostics": _jsonable(pack.diagnostics),
        }
        fn = f"stage_{i:02d}.json"
        (outdir / fn).write_text(json.dumps(rec))
        manifest["stages"].append(fn)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_state(outdir) -> StageState:
    outdir = Path(outdir)
    manifest = json.loads((outdir / "manifest.json").read_text())
    if manifest.get("version") != 1:
        raise StageError("load_state", "unsupported bundle version")
    state = StageState(M_schedule=list(manifest["M_schedule"]),
                       build_options=manifest.get("build_options", {}))
    for fn in manifest["stages"]:
        rec = json.loads((outdir / fn).read_text())
        tag_params = rec.get("lam_tag_params") or {}
        if "center" in tag_params and isinstance(tag_params["center"], list):
            tag_params["center"] = complex(*tag_params["center"])
        curve = geo.JordanCurve(_cparse(rec["lam_samples"]), tag=rec.get("lam_tag"),
                                tag_params=tag_params)
        lam = PeriodicDomain(curve)
        C = rec["C"]
        kappa = rec["kappa"]
        psi = PeriodicEntireMap(C=C, psi=_cparse(rec["psi"]), dpsi=_cparse(rec["dpsi"]))
        psi1 = psi.shifted(-2 * kappa)
        omega = OmegaDomain(lam=lam, psi1=psi1, kappa=kappa,
                            trace=_cparse(rec["omega_trace"]))
        cert = DeltaCertificate(**rec["delta"])
        poly = PolynomialGerm(_cparse(rec["poly"]), scale=rec["poly_scale"],
                              achieved_error=rec["poly_error"])
        pack = LinearizerPack(psi=psi, psi1=psi1, kappa=kappa, omega=omega,
                              delta=cert, M=rec["M"], lam=lam,
                              h_rho=rec["h_rho"], poly=poly,
                              diagnostics=rec.get("diagnostics", {}))
        state.stages.append(Stage(pack=pack, a=rec["a"], M_hat=rec["M_hat"]))
    return state


def _jsonable(d):
    out = {}
    for k, v in dict(d).items():
        if isinstance(v, complex):
            out[k] = [v.real, v.imag]
        elif isinstance(v, (np.floating, np.integer)):
            out[k] = float(v)
        elif isinstance(v, (str, int, float, bool)) or v is None:
            out[k] = v
        else:
            out[k] = str(v)
    return out
