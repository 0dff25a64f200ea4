"""Parabola projections of transversal point sets.

A transversal vector w is projected to the V-coordinate of Ad(u_r) w,
``xi_r(w) = -w21 r^2 - 2 w11 r + w12``.  For fixed w the graph of
r -> xi_r(w) over [0, 1] is a parabola; the modules below measure how
point sets behave under this family of projections.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import lie_core as lc
from . import lattice_quotient as lq
from .lattice_quotient import QuotientPoint

ENERGY_CAP = 1e6
GENERAL_POSITION_R0 = (0.0, 0.1, 0.9)
GENERAL_POSITION_RATIO = 1e-3


class DuplicatePoints(ValueError):
    pass


class HypothesisFail(ValueError):
    pass


class CertificateMissing(ValueError):
    pass


class GeneralPositionFail(RuntimeError):
    pass


class RecurrenceFail(RuntimeError):
    pass


def xi(w, r):
    """V-coordinate of Ad(u_r) w, broadcasting over w (..., 3) and r."""
    w = np.asarray(w, dtype=float)
    r = np.asarray(r, dtype=float)
    return -w[..., 2] * r * r - 2 * w[..., 0] * r + w[..., 1]


def xi_matrix(F, rs):
    """xi_r(w) for every direction r (rows) and point w (columns)."""
    F = np.asarray(F, dtype=float)
    rs = np.asarray(rs, dtype=float)[:, None]
    return -F[None, :, 2] * rs * rs - 2 * F[None, :, 0] * rs + F[None, :, 1]


def _pairwise_norm(A, B):
    return np.max(np.abs(A[:, None, :] - B[None, :, :]), axis=-1)


def alpha_energy(F, alpha: float, chunk: int = 1024):
    """Per-point sums of |w - w'|^{-alpha} over the other points."""
    F = np.asarray(F, dtype=float)
    n = len(F)
    out = np.zeros(n)
    for i in range(0, n, chunk):
        d = _pairwise_norm(F[i:i + chunk], F)
        idx = np.arange(i, min(i + chunk, n))
        d[idx - i, idx] = np.inf
        if np.any(d == 0):
            raise DuplicatePoints("alpha-energy needs distinct points")
        out[i:i + chunk] = np.sum(d ** (-alpha), axis=1)
    return out


def energy_constant(F, alpha, eps):
    """Smallest D with every energy sum at most D (#F)^{1+eps}."""
    F = np.asarray(F, dtype=float)
    if len(F) < 2:
        return 0.0
    return float(np.max(alpha_energy(F, alpha)) / len(F) ** (1 + eps))


# --- regularity certificates -------------------------------------------------------

def dyadic_scales(b0, b1):
    """Dyadic b = b1 2^{-k} with b >= b0, largest first."""
    k = max(0, int(math.floor(math.log2(b1 / b0) + 1e-12)))
    return b1 * 2.0 ** -np.arange(k + 1)


def _ball_counts_at_points(E, b, chunk=1024):
    out = np.zeros(len(E), dtype=np.int64)
    for i in range(0, len(E), chunk):
        d = _pairwise_norm(E[i:i + chunk], E)
        out[i:i + chunk] = np.sum(d <= b * (1 + 1e-12), axis=1)
    return out


def _ball_counts_at_grid(E, b):
    """Counts of closed b-balls centred at grid vertices b Z^3 next to occupied cells.

    A ball centred at a vertex covers the 2x2x2 block of half-open cells of
    side b around it; points on the far faces are added by a direct check.
    """
    cells = np.floor(E / b).astype(np.int64)
    verts = np.unique((cells[:, None, :] + _CORNERS[None]).reshape(-1, 3), axis=0)
    best = 0
    for chunk in np.array_split(verts, max(1, len(verts) // 512 + 1)):
        centers = chunk * b
        d = _pairwise_norm(centers, E)
        best = max(best, int(np.max(np.sum(d <= b * (1 + 1e-12), axis=1))))
    return best


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def certificate_constant(E, b0, b1, exponent):
    """max over centres and dyadic b >= b0 of (#(E cap B(w,b))/#E) / (b/b1)^exponent."""
    E = np.asarray(E, dtype=float)
    n = len(E)
    worst = 0.0
    for b in dyadic_scales(b0, b1):
        top = max(int(np.max(_ball_counts_at_points(E, b))), _ball_counts_at_grid(E, b))
        worst = max(worst, top / n / (b / b1) ** exponent)
    return worst


@dataclass(eq=False)
class PointSetMeasure:
    """Uniform measure on a finite set in the transversal algebra, with a regularity certificate."""
    E: np.ndarray
    b0: float
    b1: float
    alpha: float
    upsilon: float | None = None
    center: np.ndarray | None = None

    def __post_init__(self):
        self.E = np.atleast_2d(np.asarray(self.E, dtype=float))
        if self.center is None:
            self.center = np.zeros(3)
        if np.any(np.max(np.abs(self.E - self.center), axis=1) > self.b1 * (1 + 1e-12)):
            raise ValueError("points must lie in the b1-ball around the centre")

    @property
    def weights(self):
        return np.full(len(self.E), 1.0 / len(self.E))

    def certify(self):
        self.upsilon = certificate_constant(self.E, self.b0, self.b1, self.alpha)
        return self.upsilon

    def verify(self) -> bool:
        if self.upsilon is None:
            return False
        return certificate_constant(self.E, self.b0, self.b1, self.alpha) <= self.upsilon * (1 + 1e-12)


# --- dyadic regularization ---------------------------------------------------------

@dataclass
class Regularization:
    w0: np.ndarray
    b1: float
    F_prime: np.ndarray
    certificate: PointSetMeasure
    k1: int
    k2: int
    k2_raw: int
    branching: list
    separated: int

    @property
    def C_prime(self):
        return self.certificate.upsilon


def _cube_ids(P, k):
    """Cube indices at level k, cubes of side 2^{1-k} tiling [-1, 1)^3."""
    return np.floor((P + 1.0) * 2.0 ** (k - 1)).astype(np.int64)


def _separated_subset(F, k1):
    """One point per leaf cube (side <= b0)."""
    ids = _cube_ids(F, k1)
    _, first = np.unique(ids, axis=0, return_index=True)
    return np.sort(first)


def _uniform_tree(P, k1):
    """Bottom-up pigeonholing to a tree with constant branching per level.

    Returns kept point indices and the branching numbers R_1..R_{k1}.
    """
    keep = np.arange(len(P))
    R = [1] * k1
    for k in range(k1 - 1, -1, -1):
        parent = _cube_ids(P[keep], k)
        child = _cube_ids(P[keep], k + 1)
        pkeys, pinv = np.unique(parent, axis=0, return_inverse=True)
        pinv = pinv.ravel()
        ckeys, cinv = np.unique(np.column_stack([parent, child]), axis=0, return_inverse=True)
        cinv = cinv.ravel()
        child_parent = np.zeros(len(ckeys), dtype=np.int64)
        child_parent[cinv] = pinv
        nchild = np.bincount(child_parent, minlength=len(pkeys))
        npts = np.bincount(pinv, minlength=len(pkeys))
        cls = np.floor(np.log2(np.maximum(nchild, 1))).astype(int)
        weight = np.bincount(cls, weights=npts)
        best = int(np.flatnonzero(weight == weight.max())[-1])
        Rk = 2**best
        R[k] = Rk
        good_parent = cls == best
        # keep the first Rk children (by index) of every good parent
        order = np.lexsort((np.arange(len(ckeys)), child_parent))
        rank = np.empty(len(ckeys), dtype=np.int64)
        starts = np.searchsorted(child_parent[order], np.arange(len(pkeys)))
        rank[order] = np.arange(len(ckeys)) - starts[child_parent[order]]
        good_child = good_parent[child_parent] & (rank < Rk)
        keep = keep[good_child[cinv]]
    return keep, R


def _cut_level(R, alpha, eps, k1):
    """Smallest k > floor(eps k1) whose running-average branching stays above alpha - 20 eps."""
    logs = np.log2(np.asarray(R, dtype=float))
    k0 = int(math.floor(k1 * eps))
    target = alpha - 20 * eps
    for k in range(k0 + 1, k1):
        csum = np.cumsum(logs[k:])
        avg = csum / np.arange(1, len(csum) + 1)
        if avg.min() >= target - 1e-12:
            return k
    return k1


def dyadic_regularize(F, alpha: float, eps: float, energy_cap: float = ENERGY_CAP) -> Regularization:
    """Localise F to a dyadic cube on which counting is regular at exponent alpha - 20 eps."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if np.any(np.abs(F) >= 1):
        raise ValueError("F must lie in the open unit ball")
    n = len(F)
    if n > 1:
        D = energy_constant(F, alpha, eps)
        if D > energy_cap:
            raise HypothesisFail(f"energy constant {D:.3g} exceeds cap {energy_cap:.3g}")
    L = math.log2(n) if n > 1 else 0.0
    b0 = 1.0 / n
    k1 = int(math.ceil(1 + L))
    sep = _separated_subset(F, k1)
    P = F[sep]
    keep, R = _uniform_tree(P, k1)
    F1 = P[keep]
    k2_raw = _cut_level(R, alpha, eps, k1)
    c = (3 - alpha + 5 * eps) / (3 - alpha + 20 * eps)
    lo = int(math.ceil(2 + eps * L - 1e-12))
    hi = int(math.floor(2 + c * L + 1e-12))
    hi = min(hi, k1)
    if lo > hi:
        raise HypothesisFail("set too small for the admissible range of cut levels")
    k2 = min(max(k2_raw, lo), hi)
    ids = _cube_ids(F1, k2)
    keys, inv, counts = np.unique(ids, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    j = int(np.argmax(counts))
    Fp = F1[inv == j]
    side = 2.0 ** (1 - k2)
    centre = keys[j] * side - 1.0 + side / 2
    w0 = Fp[np.argmin(np.max(np.abs(Fp - centre), axis=1))]
    b1 = 2.0 ** (2 - k2)
    cert = PointSetMeasure(Fp, b0, b1, alpha - 20 * eps, center=w0)
    cert.certify()
    return Regularization(w0, b1, Fp, cert, k1, k2, k2_raw, R, len(sep))


def b1_bounds(n, alpha, eps):
    c = (3 - alpha + 5 * eps) / (3 - alpha + 20 * eps)
    return n ** (-c), n ** (-eps)


def cantor_points(levels: int = 4):
    """Left endpoints of the middle-thirds construction after ``levels`` steps."""
    pts = np.array([0.0])
    for k in range(1, levels + 1):
        pts = np.concatenate([pts, pts + 2 * 3.0 ** -k])
    return pts


def synthetic_set(kind: str, levels: int = 4):
    """Test sets in [0, 1)^3: 16^3 grid, 4096 points on a segment, or a Cantor cube."""
    if kind == "grid":
        g = np.arange(16) / 16
        return np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    if kind == "segment":
        s = np.linspace(0, 0.999, 4096)
        return np.column_stack([s, 0.5 * s, 0.25 * s])
    if kind == "cantor":
        c = cantor_points(levels)
        return np.array(np.meshgrid(c, c, c, indexing="ij")).reshape(3, -1).T
    raise ValueError(f"unknown synthetic set {kind!r}")


# mass exponent for the Cantor cube; its box dimension is three times this
CANTOR_EXPONENT = math.log(2) / math.log(3)


# --- multiplicity and tube geometry -----------------------------------------------

def multiplicity(E: PointSetMeasure, q, b) -> float:
    """Fraction of points whose b-tube around the parabola contains q."""
    q1, q2 = float(q[0]), float(q[1])
    if not 0 <= q1 <= 1:
        raise ValueError("q1 must lie in [0, 1]")
    return float(np.mean(np.abs(q2 - xi(E.E, q1)) <= b))


def tangency(w, w2) -> float:
    d = np.asarray(w, dtype=float) - np.asarray(w2, dtype=float)
    return float(abs(-d[0] * d[0] - d[1] * d[2]))


def tube_intersection_diameter(w, w2, delta, step=None):
    """Diameter of the intersection of the two delta-tubes over q1 in [0, 1], by rasterisation."""
    step = step or delta / 4
    q1 = np.arange(0.0, 1.0 + step / 2, step)
    a = xi(np.asarray(w, dtype=float), q1)
    b = xi(np.asarray(w2, dtype=float), q1)
    lo = np.maximum(a, b) - delta
    hi = np.minimum(a, b) + delta
    hit = lo <= hi
    if not hit.any():
        return 0.0
    x = np.concatenate([q1[hit], q1[hit]])
    y = np.concatenate([lo[hit], hi[hit]])
    pts = np.column_stack([x, y])
    if len(pts) > 4000:
        pts = pts[np.linspace(0, len(pts) - 1, 4000).astype(int)]
    d = np.sqrt(np.sum((pts[:, None] - pts[None]) ** 2, axis=-1))
    return float(d.max())


def diameter_ratio(w, w2, delta):
    """Intersection diameter over sqrt((Delta + delta) / (|w - w'| + delta))."""
    diam = tube_intersection_diameter(w, w2, delta)
    nrm = float(lc.lie_norm(np.asarray(w) - np.asarray(w2)))
    return diam / math.sqrt((tangency(w, w2) + delta) / (nrm + delta))


def phi(x, y):
    """Phi(x, y) = y2 + 2 x1 y1 + x2 y1^2; the parabola of w is Phi((w11, w21), y) = w12."""
    return y[..., 1] + 2 * x[..., 0] * y[..., 0] + x[..., 1] * y[..., 0] ** 2


def cinematic_sum(x, y1):
    """|d Phi / d y1| + |d^2 Phi / d y1^2|."""
    x = np.asarray(x, dtype=float)
    return np.abs(2 * x[..., 0] + 2 * x[..., 1] * y1) + np.abs(2 * x[..., 1])


CINEMATIC_LOWER = 1 / 3
CINEMATIC_UPPER = 6.0


def cinematic_check(x, y1, lower=CINEMATIC_LOWER, upper=CINEMATIC_UPPER):
    s = cinematic_sum(x, y1)
    m = np.max(np.abs(np.asarray(x, dtype=float)), axis=-1)
    return (lower * m <= s * (1 + 1e-12)) & (s <= upper * m * (1 + 1e-12))


# --- projection theorem verification -----------------------------------------------

@dataclass
class ProjectionReport:
    alpha: float
    kappa: float
    b1: float
    exponent: float
    directions: np.ndarray
    scales: np.ndarray
    worst: np.ndarray               # (directions, points) max over b of the normalised count
    fitted_C: float
    good_directions: np.ndarray
    good_points: list
    good_direction_fraction: float
    good_point_fraction_min: float
    collision: bool
    passed: bool
    seed: int = 0
    grid_spec: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "alpha": self.alpha, "kappa": self.kappa, "b1": self.b1,
            "good_direction_fraction": self.good_direction_fraction,
            "good_point_fraction_min": self.good_point_fraction_min,
            "fitted_C": self.fitted_C, "grid_spec": self.grid_spec, "seed": self.seed,
        })


def projection_counts(E, rs, b):
    """For each direction and point, #{w': |xi_r(w') - xi_r(w)| <= b}."""
    X = xi_matrix(E, rs)
    out = np.empty(X.shape, dtype=np.int64)
    for i, row in enumerate(X):
        s = np.sort(row)
        tol = b * (1 + 1e-12)
        out[i] = np.searchsorted(s, row + tol, side="right") - np.searchsorted(s, row - tol, side="left")
    return out


def verify_projection_theorem(E: PointSetMeasure, kappa: float, J=(0.0, 1.0), b_grid=None,
                              n_directions: int = 64, quantile: float = 0.9, seed: int = 0,
                              collision_share: float = 0.5) -> ProjectionReport:
    """Normalised projection multiplicities over a direction grid, with C_kappa fitted so
    that 90% of directions have 90% of points below it."""
    if E.upsilon is None:
        raise CertificateMissing("run certify() on the point set first")
    lo, hi = J
    if hi - lo < 1e-6 * 2.0 ** -10:
        raise ValueError("direction interval too short")
    rs = lo + (hi - lo) * (np.arange(n_directions) + 0.5) / n_directions
    scales = np.asarray(b_grid if b_grid is not None else dyadic_scales(E.b0, E.b1), dtype=float)
    exponent = E.alpha - 7 * kappa
    n = len(E.E)
    worst = np.zeros((len(rs), n))
    small = None
    for b in scales:
        c = projection_counts(E.E, rs, b)
        worst = np.maximum(worst, c / n / (b / E.b1) ** exponent)
        if small is None or b < small[0]:
            small = (b, c)
    per_dir = np.quantile(worst, quantile, axis=1, method="higher")
    fitted = float(np.quantile(per_dir, quantile, method="higher"))
    good_dirs = per_dir <= fitted
    good_points = [np.nonzero(worst[i] <= fitted)[0] for i in range(len(rs))]
    dir_frac = float(good_dirs.mean())
    pt_frac = float(min(len(good_points[i]) / n for i in np.nonzero(good_dirs)[0]))
    collided = np.max(small[1], axis=1) > collision_share * n
    collision = bool(n > 1 and collided.mean() >= quantile)
    passed = bool(np.isfinite(fitted) and dir_frac >= quantile and pt_frac >= quantile)
    spec = {"J": [float(lo), float(hi)], "n_directions": int(n_directions),
            "scales": [float(b) for b in scales], "quantile": quantile}
    return ProjectionReport(E.alpha, kappa, E.b1, exponent, rs, scales, worst, fitted,
                            rs[good_dirs], good_points, dir_frac, pt_frac, collision, passed,
                            seed, spec)


def recheck_report(E: PointSetMeasure, report: ProjectionReport, max_points: int = 256) -> bool:
    """Independent recount by direct differences: every reported good (r, w) obeys the
    fitted bound at every scale.  At most ``max_points`` evenly spaced good points per
    direction are rechecked."""
    n = len(E.E)
    good = set(np.round(report.good_directions, 15))
    for i, r in enumerate(report.directions):
        if round(float(r), 15) not in good:
            continue
        idx = report.good_points[i]
        if len(idx) > max_points:
            idx = idx[np.linspace(0, len(idx) - 1, max_points).astype(int)]
        vals = xi(E.E, r)
        diff = np.abs(vals[idx][:, None] - vals[None, :])
        for b in report.scales:
            cnt = np.sum(diff <= b * (1 + 1e-12), axis=1)
            if np.any(cnt / n > report.fitted_C * (b / E.b1) ** report.exponent * (1 + 1e-9)):
                return False
    return True


# --- full pipeline ------------------------------------------------------------------

def general_position(E, r0s=GENERAL_POSITION_R0, ratio=GENERAL_POSITION_RATIO):
    """First r0 whose rotation keeps a quarter of the points with |w12| >= ratio |w|."""
    E = np.asarray(E, dtype=float)
    for r0 in r0s:
        rot = lc.sl2_coords(lc.u_matrix(r0) @ lc.sl2_matrix(E) @ lc.u_matrix(-r0))
        ok = np.abs(rot[:, 1]) >= ratio * lc.lie_norm(rot)
        if ok.sum() * 4 >= len(E):
            return r0, rot, ok
    raise GeneralPositionFail("no rotation keeps a quarter of the points in general position")


@dataclass(frozen=True)
class PipelineConfig:
    size_floor: float = 0.9           # (#F)^{-eps} must not exceed this
    eta: float = 1e-3                 # recurrence target: inj >= eta
    window: float = 1e-4              # directions r with |r| <= window
    n_directions: int = 64
    energy_cap: float = ENERGY_CAP


@dataclass
class PipelineResult:
    x2: QuotientPoint
    I: np.ndarray
    b1: float
    rho: np.ndarray
    report: dict


def interval_regularity(I, rho, exponent, floor):
    """max rho(J)/|J|^exponent over dyadic intervals (and their half shifts) of length >= floor."""
    I = np.asarray(I, dtype=float)
    worst = 0.0
    L = 1.0
    while L >= floor * (1 - 1e-12):
        for shift in (0.0, 0.5):
            ids = np.floor(I / L - shift).astype(np.int64)
            _, inv = np.unique(ids, return_inverse=True)
            mass = np.bincount(inv.ravel(), weights=rho)
            worst = max(worst, float(mass.max()) / L**exponent)
        L /= 2
    return worst


def project_pipeline(F, x1: QuotientPoint, alpha: float, eps: float,
                     config: PipelineConfig = PipelineConfig(), seed: int = 0) -> PipelineResult:
    """Localise F, rotate into general position, pick a good recurrent direction, and push
    the localised set to a finite subset I of [0, 1] on the V-orbit of x2."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n = len(F)
    if n ** (-eps) > config.size_floor:
        raise HypothesisFail(f"#F={n} below the size floor")
    reg = dyadic_regularize(F, alpha, eps, config.energy_cap)
    amb = x1.ambient
    # E: h exp(w) = exp(w') exp(-w0)
    g = lc.exp_r(amb, reg.F_prime) @ lc.exp_r(amb, -reg.w0)
    hs, E = lc.decompose_transversal(amb, g, radius=None)
    r0, rot, ok = general_position(E)
    Ebar = rot[ok]
    idx = np.nonzero(ok)[0]
    center = np.zeros(3)
    b1e = max(float(np.max(lc.lie_norm(Ebar))), 1e-300)
    meas = PointSetMeasure(Ebar, 1.0 / n, b1e, alpha - 20 * eps, center=center)
    meas.certify()
    rep = verify_projection_theorem(meas, eps, (-config.window, config.window), None,
                                    config.n_directions, seed=seed)
    x2p = lc.exp_r(amb, reg.w0) @ x1.rep
    x2pp = lc.embed_h(amb, lc.u_matrix(r0)) @ x2p
    search = lq.search_cache(x1.lattice)
    cand = rep.good_directions[np.argsort(np.abs(rep.good_directions))]
    chosen = None
    for r in cand:
        i_dir = int(np.argmin(np.abs(rep.directions - r)))
        good = rep.good_points[i_dir]
        vals = xi(Ebar[good], r)
        spread = float(vals.max() - vals.min())
        if spread <= 0:
            continue
        t = -math.log(spread)          # stretches the projected set onto [0, 1]
        pt, _, _ = lq.act(x1.lattice, lc.a_matrix(t) @ lc.u_matrix(r), x2pp[None])
        inj, _ = lq.injectivity_batch(pt, search)
        if inj[0] >= config.eta:
            chosen = float(r)
            break
    if chosen is None:
        raise RecurrenceFail(f"no good direction among {len(cand)} returns to inj >= {config.eta}")
    lo = float(vals.min())
    s = np.clip(math.exp(t) * (vals - lo), 0.0, 1.0)
    rho = np.full(len(s), 1.0 / len(s))
    x2g = lc.embed_h(amb, lc.a_matrix(t) @ lc.u_matrix(chosen)) @ x2pp
    x2g = lc.v_elem(amb, math.exp(t) * lo) @ x2g
    reps, _, _ = lq.reduce_batch(x1.lattice, x2g[None])
    x2 = QuotientPoint(reps[0], x1.lattice, True, 0.0)
    # membership witnesses: v_s x2 against a_t u_{r + r0} exp(w') x1 in G
    Fp = reg.F_prime[idx[good]]
    P = lc.v_elem(amb, s) @ x2g
    Q = lc.embed_h(amb, lc.a_matrix(t) @ lc.u_matrix(chosen + r0)) @ lc.exp_r(amb, Fp) @ x1.rep
    dist = lq.chart_distance(P @ lc.inv2(Q), x1.lattice.variant)
    floor = n ** (-15 * eps / (3 - alpha + 20 * eps))
    reg_c = interval_regularity(s, rho, alpha - 30 * eps, floor)
    report = {
        "alpha": alpha, "eps": eps, "b1": reg.b1, "b1_bounds": list(b1_bounds(n, alpha, eps)),
        "k2": reg.k2, "k2_raw": reg.k2_raw, "r0": r0, "direction": chosen, "t": t,
        "points": int(len(s)), "membership_C": float(np.max(dist) / reg.b1),
        "regularity_C": reg_c, "interval_floor": floor, "certificate_C": float(reg.C_prime),
        "projection_C": rep.fitted_C, "in_unit_interval": bool(np.all((s >= 0) & (s <= 1))),
    }
    return PipelineResult(x2, s, reg.b1, rho, report)
