"""Margulis functions on sheet sets, random-walk contraction, and the
dimension-increment bootstrap.

The random walk is the law of ``a_m u_r`` with ``r`` uniform on [0, 1]; its
ell-fold convolution is supported on ``a_{ell m} u_rhat`` with
``rhat = sum_j e^{-j m} r_{j+1}``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from . import lie_core as lc
from . import lattice_quotient as lq
from .lattice_quotient import QuotientPoint
from .rng import mc_chunks, stream

M_CAP = 200
TARGET = math.exp(-1.0)
TARGET_SLACK = 1e-6
_GL_HI = np.polynomial.legendre.leggauss(20)
_GL_LO = np.polynomial.legendre.leggauss(10)


class QuadratureFail(RuntimeError):
    pass


class NotFound(RuntimeError):
    pass


class EmptyCovering(RuntimeError):
    pass


# --- contraction integrals --------------------------------------------------------

class _Part:
    """One traceless 3-vector in vertex form: Ad(a_m u_r) w has coordinates
    (b d, e^m (q - b d^2), e^{-m} b) with d = r - vertex when b = w21 != 0.
    """

    def __init__(self, w, m):
        self.w11, self.w12, self.w21 = (float(v) for v in w)
        self.m = m
        self.em = math.exp(m)
        b = self.w21
        if b != 0.0:
            self.vertex = -self.w11 / b
            q = self.w12 + self.w11 * self.w11 / b
            # a determinant at roundoff level is treated as exactly nilpotent
            if abs(q) <= 4e-16 * (abs(self.w12) + self.w11 * self.w11 / abs(b)):
                q = 0.0
            self.q = q
        else:
            self.vertex = self.w12 / (2 * self.w11) if self.w11 != 0.0 else 0.0
            self.q = 0.0

    def norm(self, d):
        """Norm at r = vertex + d."""
        b, em = self.w21, self.em
        if b != 0.0:
            lin = np.abs(b * d)
            v = em * np.abs(self.q - b * d * d)
            return np.maximum(np.maximum(lin, v), abs(b) / em)
        if self.w11 != 0.0:
            return np.maximum(abs(self.w11), em * np.abs(2 * self.w11 * d))
        return np.full_like(d, em * abs(self.w12))

    def breaks(self):
        """Kinks of the norm as offsets d from the vertex."""
        b, q, em = self.w21, self.q, self.em
        if b == 0.0:
            if self.w11 == 0.0:
                return [0.0]
            return [0.0, 1 / (2 * em), -1 / (2 * em)]
        out = [0.0, 1 / em, -1 / em]
        for c in (q / b, q / b + 1 / (em * em), q / b - 1 / (em * em)):
            if c >= 0:
                out += [math.sqrt(c), -math.sqrt(c)]
        # |b d| = e^m |q - b d^2|  <=>  e^m d^2 +- d - e^m q/b = 0
        for sgn in (1.0, -1.0):
            out += _quadratic_roots(em, sgn, -em * q / b)
        return out


def _quadratic_roots(a, b, c):
    disc = b * b - 4 * a * c
    if disc < 0:
        return []
    sq = math.sqrt(disc)
    t = -0.5 * (b + math.copysign(sq, b))
    if t == 0.0:
        return [0.0]
    return [t / a, c / t]


def _parts(w, m):
    w = np.asarray(w, dtype=float)
    chunks = [w] if w.shape == (3,) else [w[:3], w[3:]]
    return [_Part(p, m) for p in chunks if np.any(p != 0)]


def _ladder_depth(m):
    return 60 + int(math.ceil(m / math.log(2)))


def _quadrature_grid(parts, m):
    """Cell boundaries in the offset variable d = r - c around the primary vertex c.

    The primary part is the one with the smallest norm minimum; its spike is
    resolved in d directly, the other parts are shifted into d.
    """
    probe = np.linspace(0.0, 1.0, 1025)
    mins = [float(np.min(p.norm(probe - p.vertex))) for p in parts]
    main = parts[int(np.argmin(mins))]
    c = main.vertex
    pts = [d for d in main.breaks()]
    for p in parts:
        if p is not main:
            pts += [d + (p.vertex - c) for d in p.breaks()]
    lo, hi = -c, 1.0 - c
    anchors = sorted({d for d in pts if lo < d < hi} | {lo, hi})
    ladder = 2.0 ** -np.arange(0, _ladder_depth(m))
    grid = [np.array(anchors)]
    for p in anchors:
        grid.append(p + ladder)
        grid.append(p - ladder)
    g = np.unique(np.clip(np.concatenate(grid), lo, hi))
    shifts = [p.vertex - c for p in parts]

    def fn(d):
        out = parts[0].norm(d - shifts[0])
        for p, sh in zip(parts[1:], shifts[1:]):
            out = np.maximum(out, p.norm(d - sh))
        return out

    return g, fn


def contraction_integral(w, alpha: float, m: float):
    """Integral over r in [0, 1] of |Ad(a_m u_r) w|^{-alpha}, with an error estimate.

    Graded subdivision: geometric ladders around every kink of the max-norm,
    worked in the offset from the vertex of the quadratic coordinate, then
    fixed Gauss-Legendre on each cell.
    """
    parts = _parts(w, m)
    if not parts:
        raise ValueError("w must be nonzero")
    g, fn = _quadrature_grid(parts, m)
    a = g[:-1]
    h = np.diff(g)

    def rule(nodes_weights):
        x, wt = nodes_weights
        d = a[:, None] + (x[None] + 1) / 2 * h[:, None]
        return float(np.sum(h[:, None] / 2 * wt[None] * fn(d) ** (-alpha)))

    hi = rule(_GL_HI)
    lo = rule(_GL_LO)
    return hi, abs(hi - lo)


@dataclass(frozen=True)
class ContractionResult:
    lhs: float
    bound: float            # C5 e^{-alpha_hat m}/(2 - 2^alpha) |w|^{-alpha}
    passed: bool            # lhs <= bound
    ratio: float            # lhs * |w|^alpha, to compare with e^{-1}
    error: float


def alpha_hat(alpha):
    return (1 - alpha) / 4


def contraction_check(w, alpha: float, m: float, c5: float | None = None) -> ContractionResult:
    w = np.asarray(w, dtype=float)
    nrm = float(lc.lie_norm(w))
    if nrm == 0:
        raise ValueError("w must be nonzero")
    lhs, err = contraction_integral(w, alpha, m)
    if c5 is None:
        from .constants import C5
        c5 = C5
    bound = c5 * math.exp(-alpha_hat(alpha) * m) / (2 - 2**alpha) * nrm ** (-alpha)
    # tiny values only need accuracy relative to the quantities they are compared with
    scale = max(lhs, 1e-6 * min(bound, math.exp(-1) * nrm ** (-alpha)))
    if err > 1e-6 * scale:
        raise QuadratureFail(f"error estimate {err:.3g} vs value {lhs:.3g}")
    return ContractionResult(lhs, bound, lhs <= bound, lhs * nrm**alpha, err)


def nilpotent_direction(r0):
    """Unit direction Ad(u_{-r0}) E21, whose norm spike sits at r = r0."""
    w = np.array([-r0, -r0 * r0, 1.0])
    return w / np.max(np.abs(w))


def random_unit(rng, n):
    w = rng.normal(size=(n, 3))
    return w / np.max(np.abs(w), axis=1, keepdims=True)


def direction_samples(samples: int, seed: int = 0):
    """Structured adversarial directions plus seeded random unit vectors."""
    rng = stream(seed, "m-alpha-samples")
    fixed = [np.array(v, dtype=float) for v in ((0, 0, 1), (1, 0, 0), (0, 1, 0), (1, 1, 1), (1, 0, 1))]
    fixed += [nilpotent_direction(r0) for r0 in np.linspace(0, 1, 65)]
    return np.vstack(fixed + [random_unit(rng, samples)])


def _refine(alpha, m, starts):
    """Local maximisation of the ratio over unit directions normalised by w21 = 1."""
    from scipy.optimize import minimize

    best = 0.0
    for w in starts:
        if w[2] == 0:
            continue
        x0 = np.array([w[0] / w[2], w[1] / w[2]])

        def neg(x):
            v = np.array([x[0], x[1], 1.0])
            v = v / np.max(np.abs(v))
            return -contraction_integral(v, alpha, m)[0]

        res = minimize(neg, x0, method="Nelder-Mead",
                       options=dict(xatol=1e-9, fatol=1e-13, maxiter=400))
        best = max(best, -res.fun)
    return best


@lru_cache(maxsize=32)
def _solve(alpha, samples, seed, cap):
    ws = direction_samples(samples, seed)
    target = TARGET * (1 + TARGET_SLACK)
    worst = list(range(8))
    for m in range(1, cap + 1):
        if any(contraction_integral(ws[i], alpha, m)[0] > target for i in worst):
            continue
        vals = np.array([contraction_integral(w, alpha, m)[0] for w in ws])
        order = np.argsort(vals)[::-1]
        worst = list(order[:8])
        if vals[order[0]] > target:
            continue
        if _refine(alpha, m, ws[order[:4]]) > target:
            continue
        return m, float(vals[order[0]])
    raise NotFound(f"no m <= {cap} contracts every sampled direction for alpha={alpha}")


def solve_m_alpha(alpha: float, samples: int = 128, seed: int = 0, cap: int = M_CAP) -> int:
    """Smallest integer m with integral ratio <= e^{-1} over the sampled unit directions."""
    if not 1 / 3 < alpha < 1:
        raise ValueError("alpha must lie in (1/3, 1)")
    return _solve(float(alpha), int(samples), int(seed), int(cap))[0]


def worst_ratio(alpha: float, m: float, samples: int = 128, seed: int = 0) -> float:
    ws = direction_samples(samples, seed)
    return max(contraction_integral(w, alpha, m)[0] for w in ws)


def fit_c5(alpha: float, ms=range(0, 41), samples: int = 16, seed: int = 0) -> float:
    """Smallest C5 making the exponential bound hold on the sampled (w, m) grid."""
    ws = direction_samples(samples, seed)
    best = 0.0
    for m in ms:
        for w in ws:
            lhs = contraction_integral(w, alpha, m)[0]
            best = max(best, lhs * (2 - 2**alpha) * math.exp(alpha_hat(alpha) * m))
    return best


# --- random walk ------------------------------------------------------------------

@dataclass(frozen=True)
class RandomWalk:
    alpha: float
    m: float
    depth: int = 1

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")


def walk_endpoint(m, r):
    """a_{ell m} u_rhat for step parameters r of shape (..., ell)."""
    r = np.asarray(r, dtype=float)
    ell = r.shape[-1]
    weights = np.exp(-m * np.arange(ell))
    rhat = r @ weights
    return lc.a_matrix(ell * m) @ lc.u_matrix(rhat), rhat


def walk_product(m, r):
    """The same element as an explicit product h_ell ... h_1 with h_j = a_m u_{r_j}."""
    r = np.asarray(r, dtype=float)
    out = np.broadcast_to(np.eye(2), r.shape[:-1] + (2, 2)).copy()
    for j in range(r.shape[-1]):
        out = lc.a_matrix(m) @ lc.u_matrix(r[..., j]) @ out
    return out


def walk_points(lat, reps, m, r):
    """Reduced representatives after each walk step; list of arrays, one per step."""
    out = []
    cur = reps
    for j in range(r.shape[-1]):
        h = lc.a_matrix(m) @ lc.u_matrix(r[..., j])
        cur, _, _ = lq.act(lat, h, cur)
        out.append(cur)
    return out


# --- sheet sets -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SheetSet:
    """Union of local H-boxes E.exp(w) y0 for w in F, with E = B^H_beta u_{[-0.1 eta, 0.1 eta]}."""
    base: QuotientPoint
    F: np.ndarray
    beta: float
    eta: float

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        object.__setattr__(self, "F", F)
        if F.shape[1] != 3:
            raise ValueError("F must hold transversal 3-vectors")
        if not np.any(np.all(F == 0, axis=1)):
            raise ValueError("F must contain 0")
        if np.any(lc.lie_norm(F) > self.beta * (1 + 1e-9)):
            raise ValueError("F must lie in the beta-ball")
        if self.beta > self.eta**2 * (1 + 1e-12):
            raise ValueError("beta must not exceed eta^2")

    @property
    def size(self):
        return len(self.F)

    @property
    def u_range(self):
        return self.beta + 0.1 * self.eta

    def base_ok(self, search=None) -> bool:
        """Whether the base point lies in X_{2 eta}; reported rather than enforced."""
        return lq.injectivity_radius(self.base, search) >= 2 * self.eta

    @cached_property
    def pair_tables(self):
        """exp(w_j) exp(-w_i) = H[i, j] exp(V[i, j]) for all sheet pairs."""
        n = self.size
        wj = np.broadcast_to(self.F[None, :, :], (n, n, 3))
        wi = np.broadcast_to(self.F[:, None, :], (n, n, 3))
        amb = self.base.ambient
        g = lc.exp_r(amb, wj) @ lc.exp_r(amb, -wi)
        h, v = lc.decompose_transversal(amb, g)
        return h, v

    def in_box(self, m):
        s, t, r, ok = lc.bruhat_coords(m)
        b = self.beta * (1 + 1e-12)
        return ok & (np.abs(s) <= b) & (np.abs(t) <= b) & (np.abs(r) <= self.u_range * (1 + 1e-12))

    def sample(self, rng, n):
        """mu_E samples: (sheet index, box matrix)."""
        sheet = rng.integers(0, self.size, n)
        s = rng.uniform(-self.beta, self.beta, n)
        t = rng.uniform(-self.beta, self.beta, n)
        r = rng.uniform(-self.beta, self.beta, n) + rng.uniform(-0.1 * self.eta, 0.1 * self.eta, n)
        return sheet, lc.um_matrix(s) @ lc.a_matrix(t) @ lc.u_matrix(r)

    def point_reps(self, sheet, ez):
        """Reduced representatives of z = e_z exp(w_sheet) y0."""
        amb = self.base.ambient
        g = lc.embed_h(amb, ez) @ lc.exp_r(amb, self.F[sheet]) @ self.base.rep
        reps, _, _ = lq.reduce_batch(self.base.lattice, g)
        return reps


def displacement_candidates(E: SheetSet, sheet, ez, h):
    """Transversal displacements before the injectivity cutoff.

    Returns V of shape (N, #F, 3) and a validity mask: sheet j contributes
    when the box coordinate e_z H[i, j]^{-1} stays inside the box.
    """
    H, V = E.pair_tables
    sheet = np.asarray(sheet)
    Hij = H[sheet]                                  # (N, n, 2, 2)
    Vij = V[sheet]
    eprime = ez[:, None] @ lc.inv2(Hij)
    valid = E.in_box(eprime)
    valid[np.arange(len(sheet)), sheet] = False
    he = (h @ ez)[:, None]
    out = lc.sl2_coords(he @ lc.sl2_matrix(Vij) @ lc.inv2(he))
    return out, valid


def _f_psi(alpha, V, valid, inj):
    nrm = lc.lie_norm(V)
    keep = valid & (nrm < inj[:, None]) & (nrm > 0)
    count = keep.sum(axis=1)
    with np.errstate(divide="ignore"):
        s = np.where(keep, nrm, 1.0) ** (-alpha)
    total = np.sum(np.where(keep, s, 0.0), axis=1)
    fallback = inj ** (-alpha)
    f = np.where(count > 0, total, fallback)
    psi = np.maximum(count, 1) * fallback
    return f, psi, count


def _as_h(h, n):
    h = np.asarray(h, dtype=float)
    if h.ndim == 2:
        h = np.broadcast_to(h, (n, 2, 2))
    return h


def evaluate(E: SheetSet, alpha, h, sheet, ez, search=None, reps=None):
    """f, psi and displacement counts at points z = (sheet, e_z) translated by h.

    ``reps`` may carry already reduced representatives of h z (for walks
    that were reduced step by step).
    """
    sheet = np.atleast_1d(sheet)
    ez = np.asarray(ez, dtype=float).reshape(-1, 2, 2)
    h = _as_h(h, len(sheet))
    search = search or lq.search_cache(E.base.lattice)
    if reps is None:
        z = E.point_reps(sheet, ez)
        reps, _, _ = lq.act(E.base.lattice, h, z)
    inj, _ = lq.injectivity_batch(reps, search)
    V, valid = displacement_candidates(E, sheet, ez, h)
    return _f_psi(alpha, V, valid, inj)


def transversal_displacements(E: SheetSet, h, z, search=None):
    """List of displacements v with 0 < |v| < inj(hz) and exp(v) hz in h E."""
    sheet, ez = z
    h = np.asarray(h, dtype=float).reshape(1, 2, 2)
    ez = np.asarray(ez, dtype=float).reshape(1, 2, 2)
    search = search or lq.search_cache(E.base.lattice)
    zr = E.point_reps(np.array([sheet]), ez)
    reps, _, _ = lq.act(E.base.lattice, h, zr)
    inj, _ = lq.injectivity_batch(reps, search)
    V, valid = displacement_candidates(E, np.array([sheet]), ez, h)
    nrm = lc.lie_norm(V[0])
    keep = valid[0] & (nrm < inj[0]) & (nrm > 0)
    return [V[0, j] for j in np.nonzero(keep)[0]]


def margulis_f(E: SheetSet, alpha, h, z, search=None) -> float:
    f, _, _ = evaluate(E, alpha, np.asarray(h, dtype=float), np.array([z[0]]),
                       np.asarray(z[1]).reshape(1, 2, 2), search)
    return float(f[0])


def psi(E: SheetSet, alpha, h, z, search=None) -> float:
    _, p, _ = evaluate(E, alpha, np.asarray(h, dtype=float), np.array([z[0]]),
                       np.asarray(z[1]).reshape(1, 2, 2), search)
    return float(p[0])


def pairwise_energy(F, alpha):
    """sum_{w' != w} |w - w'|^{-alpha} for every w in F."""
    F = np.asarray(F, dtype=float)
    d = lc.lie_norm(F[:, None, :] - F[None, :, :])
    np.fill_diagonal(d, np.inf)
    return np.sum(d ** (-alpha), axis=1)


# --- Margulis inequality ----------------------------------------------------------------

@dataclass
class MargulisReport:
    ell: int
    alpha: float
    m: float
    samples: int
    f0: float
    lhs: float
    lhs_err: float
    psi_means: list
    psi_errs: list
    c13_fit: float
    c13_upper: float
    c13_fixture: float
    rel_err: float
    passed: bool

    def to_dict(self):
        return {k: (float(v) if isinstance(v, (np.floating, float)) else v)
                for k, v in self.__dict__.items()}


def verify_margulis_inequality(E: SheetSet, walk: RandomWalk, mc_samples: int = 100_000,
                               seed: int = 0, z=None, c13_fixture: float | None = None,
                               error_bar: float = 0.05, search=None) -> MargulisReport:
    """Monte Carlo check of int f dnu^ell <= e^{-ell} f(e,z) + C13 sum_j e^{j-ell} int psi dnu^j."""
    if c13_fixture is None:
        from .constants import C13_FIXTURE
        c13_fixture = C13_FIXTURE
    search = search or lq.search_cache(E.base.lattice)
    if z is None:
        z = (0, np.eye(2))
    sheet0 = np.array([z[0]])
    ez0 = np.asarray(z[1], dtype=float).reshape(1, 2, 2)
    f0 = float(evaluate(E, walk.alpha, np.eye(2), sheet0, ez0, search)[0][0])
    ell = walk.depth
    if ell == 0:
        return MargulisReport(0, walk.alpha, walk.m, 0, f0, f0, 0.0, [], [], 0.0, 0.0,
                              c13_fixture, 0.0, True)
    zrep = E.point_reps(sheet0, ez0)

    def chunk(rng, n):
        r = rng.uniform(0, 1, (n, ell))
        reps_by_step = walk_points(E.base.lattice, np.repeat(zrep, n, axis=0), walk.m, r)
        sums = np.zeros((2, ell))
        sq = np.zeros((2, ell))
        for j in range(1, ell + 1):
            h, _ = walk_endpoint(walk.m, r[:, :j])
            f, p, _ = evaluate(E, walk.alpha, h, np.repeat(sheet0, n), np.repeat(ez0, n, axis=0),
                               search, reps=reps_by_step[j - 1])
            sums[:, j - 1] = f.sum(), p.sum()
            sq[:, j - 1] = (f**2).sum(), (p**2).sum()
        return sums, sq

    parts = mc_chunks(seed, ("margulis", ell, E.size), mc_samples, chunk)
    sums = sum(p[0] for p in parts)
    sq = sum(p[1] for p in parts)
    mean = sums / mc_samples
    var = np.maximum(sq / mc_samples - mean**2, 0.0)
    err = np.sqrt(var / mc_samples)
    lhs, lhs_err = mean[0, ell - 1], err[0, ell - 1]
    psi_means = mean[1]
    psi_errs = err[1]
    weights = np.exp(np.arange(1, ell + 1) - ell)
    denom = float(weights @ psi_means)
    denom_lo = float(weights @ np.maximum(psi_means - 2 * psi_errs, 0))
    head = math.exp(-ell) * f0
    c13 = max(0.0, (lhs - head) / denom)
    c13_up = max(0.0, (lhs + 2 * lhs_err - head) / max(denom_lo, 1e-300))
    rel = float(max(lhs_err / lhs, np.max(psi_errs / psi_means)))
    passed = rel <= error_bar and c13_up <= c13_fixture
    return MargulisReport(ell, walk.alpha, walk.m, mc_samples, f0, float(lhs), float(lhs_err),
                          [float(v) for v in psi_means], [float(v) for v in psi_errs],
                          float(c13), float(c13_up), float(c13_fixture), rel, bool(passed))


# --- bootstrap --------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapConfig:
    selection_p: float = 2.0          # #F_1 = ceil(beta^p #F); the asymptotic rule uses p = 10
    mass_exponent: float = 13.0       # box mass threshold beta^13 e^{-ell m0}
    kappa7: float | None = None       # defaults to 1/(8 m0)
    i_max_cap: int = 6
    samples_per_sheet: int = 32
    covering_scale: float | None = None   # defaults to beta^2
    eta: float = 0.004
    beta: float = 1e-6
    m0: int | None = None
    alpha_samples: int = 128
    base_samples: int = 512


@dataclass
class BootstrapState:
    iteration: int
    sheets: SheetSet
    M: float
    n: float
    ell: int
    m0: float
    alpha: float
    eps: float
    kappa7: float
    history: list = field(default_factory=list)
    last_record: "TraceRecord | None" = None
    last_step: dict = field(default_factory=dict)

    @property
    def i_max(self):
        return int(math.floor((6 * self.M - 3) / (4 * self.kappa7 * self.eps))) + 1

    @property
    def f_bound(self):
        return math.exp(self.M * self.n)


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    num_sheets: int
    beta: float
    max_f: float
    branch: str
    seed: int
    measured_max_f: float = float("nan")
    ell: int = 0

    def to_json(self):
        max_f = None if math.isnan(self.max_f) else self.max_f
        return json.dumps({"iter": self.iter, "num_sheets": self.num_sheets, "beta": self.beta,
                           "max_f": max_f, "branch": self.branch, "seed": self.seed},
                          sort_keys=False)


def selection_count(n_sheets, beta, p):
    """ceil(beta^p #F), at least one sheet."""
    x = beta**p * n_sheets
    return max(1, int(math.ceil(x * (1 - 1e-12))))


def max_f_over(E: SheetSet, alpha, rng, per_sheet, search=None):
    sheet, ez = E.sample(rng, per_sheet * E.size)
    f, _, _ = evaluate(E, alpha, np.eye(2), sheet, ez, search)
    return float(f.max())


def covering_cells(E: SheetSet, h0, sheet, ez, scale, ell_m0):
    """Integer cell index of h0 z relative to h0 y0 in a grid of Q^G-boxes.

    h0 z = (h0 e_z h0^{-1}) exp(Ad(h0) w_sheet) h0 y0 exactly, so the cell is
    read off from the Bruhat coordinates of the first factor and the
    transversal vector of the second.
    """
    q = h0 @ ez @ lc.inv2(h0)
    s, t, r, ok = lc.bruhat_coords(q)
    w = lc.sl2_coords(h0 @ lc.sl2_matrix(E.F[sheet]) @ lc.inv2(h0))
    tw = min(2 * scale, E.beta / 2)
    sizes = np.array([scale * math.exp(-ell_m0), scale, scale, tw, tw, tw])
    coords = np.column_stack([s, t, r, w])
    return np.floor(coords / sizes).astype(np.int64), ok


def bootstrap_step(state: BootstrapState, h0, covering_scale=None, config: BootstrapConfig = BootstrapConfig(),
                   seed: int = 0, search=None) -> BootstrapState:
    """One covering-and-selection step.

    The returned state carries the trace record in ``last_record`` and the
    chosen covering box in ``last_step``.
    """
    E = state.sheets
    h0 = np.asarray(h0, dtype=float)
    ell_m0 = state.ell * state.m0
    s, t, _, ok = lc.bruhat_coords(h0)
    if not ok or abs(s) > 1e-9 or abs(t - ell_m0) > 1e-9:
        raise ValueError("h0 must have the form a_{ell m0} u_r")
    search = search or lq.search_cache(E.base.lattice)
    if E.size == 1:
        rec = TraceRecord(state.iteration + 1, 1, E.beta, state.f_bound, "trivial", seed,
                          ell=state.ell)
        return _advance(state, E, state.M, rec, {})
    scale = covering_scale or config.covering_scale or E.beta**2
    rng = stream(seed, "bootstrap-step", state.iteration)
    sheet, ez = E.sample(rng, config.samples_per_sheet * E.size)
    cells, ok = covering_cells(E, h0, sheet, ez, scale, ell_m0)
    keys, inverse, counts = np.unique(cells[ok], axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    mass = counts / len(sheet)
    heavy = mass >= E.beta**config.mass_exponent * math.exp(-ell_m0)
    need = selection_count(E.size, E.beta, config.selection_p)
    okidx = np.nonzero(ok)[0]
    best = None
    for k in np.nonzero(heavy)[0]:
        members = okidx[inverse == k]
        distinct = np.unique(sheet[members])
        cand = (len(distinct), counts[k], tuple(-keys[k]))
        if len(distinct) >= need and (best is None or cand > best[0]):
            best = (cand, k, members, distinct)
    if best is None:
        raise EmptyCovering(f"no covering box carries {need} sheets above the mass threshold")
    _, k, members, distinct = best
    reps = np.array([members[np.argmax(sheet[members] == i)] for i in distinct])
    offsets = _selected_offsets(E, h0, sheet[reps], ez[reps])
    inside = lc.lie_norm(offsets) <= E.beta
    if inside.sum() < need:
        raise EmptyCovering("selected box sheets leave the beta-ball after translation")
    chosen = np.nonzero(inside)[0][:need]
    F1 = offsets[chosen]
    z1 = reps[chosen[0]]
    amb = E.base.ambient
    base_g = lc.embed_h(amb, ez[z1]) @ lc.exp_r(amb, E.F[sheet[z1]]) @ E.base.rep
    y1_rep = _translate_stepwise(E.base.lattice, base_g[None], h0, state.ell, state.m0)
    y1 = QuotientPoint(y1_rep[0], E.base.lattice, True, 0.0)
    E1 = SheetSet(y1, F1, E.beta, E.eta)
    fmax = max_f_over(E1, state.alpha, stream(seed, "bootstrap-eval", state.iteration + 1),
                      config.samples_per_sheet, search)
    energy_cap = 2 * E1.size ** (1 + state.eps)
    drop = 2 * state.kappa7 * state.eps / 3
    M = state.M
    if E1.size == 1:
        branch = "trivial"
    elif fmax <= energy_cap:
        branch = "energy"
    elif fmax <= math.exp((state.M - drop) * state.n):
        branch = "improve"
        M = state.M - drop
    else:
        branch = "none"
    rec = TraceRecord(state.iteration + 1, E1.size, E.beta, math.exp(M * state.n), branch, seed,
                      measured_max_f=fmax, ell=state.ell)
    info = {"box": tuple(int(v) for v in keys[k]), "box_sheets": int(len(distinct)),
            "selected": int(need), "scale": float(scale), "sheet": sheet, "ez": ez}
    return _advance(state, E1, M, rec, info)


def _advance(state, E1, M, rec, info):
    hist = state.history + [(E1.size, rec.max_f, rec.measured_max_f, rec.branch)]
    return BootstrapState(state.iteration + 1, E1, M, state.n, state.ell, state.m0, state.alpha,
                          state.eps, state.kappa7, hist, rec, info)


def _selected_offsets(E: SheetSet, h0, sheets, ezs):
    """Transversal parts w_{i1} of (h0 z_i)(h0 z_1)^{-1} for the selected points."""
    amb = E.base.ambient
    g = lc.embed_h(amb, ezs) @ lc.exp_r(amb, E.F[sheets])
    rel = g @ lc.inv2(g[0])
    _, w = lc.decompose_transversal(amb, rel, radius=None)
    out = lc.sl2_coords(h0 @ lc.sl2_matrix(w) @ lc.inv2(h0))
    out[0] = 0.0
    return out


def _translate_stepwise(lat, reps, h0, ell, m0):
    _, _, r, _ = lc.bruhat_coords(h0)
    cur, _, _ = lq.act(lat, lc.u_matrix(r), reps)
    for _ in range(ell):
        cur, _, _ = lq.act(lat, lc.a_matrix(m0), cur)
    return cur


def base_sheet_set(x0: QuotientPoint, t: float, eta: float, beta: float, samples: int,
                   seed: int = 0, search=None):
    """Desk-scale base case: sheets of the orbit piece a_t u_[0,eta] x0 near a point of X_{2 eta}.

    The reference y0 is the first sampled a_t u_r x0 with inj >= 2 eta; other
    sample points are matched to y0 through the neighbour cache and kept when
    their H-offset lies in the box and the transversal offset is below
    min(beta, inj(y0)).
    """
    lat = x0.lattice
    search = search or lq.search_cache(lat)
    rng = stream(seed, "bootstrap-base")
    r = np.sort(rng.uniform(0.0, 1.0, samples))
    reps, _, _ = lq.orbit_points(x0, t, r)
    inj, _ = lq.injectivity_batch(reps, search)
    good = np.nonzero(inj >= 2 * eta)[0]
    if len(good) == 0:
        raise EmptyCovering("no sampled orbit point lies in X_{2 eta}")
    i0 = good[0]
    y0 = QuotientPoint(reps[i0], lat, True, 0.0)
    window = (r >= r[i0]) & (r <= r[i0] + eta)
    others = reps[~window]
    F = [np.zeros(3)]
    nb = lq.neighbor_cache(lat)
    if len(others):
        amb = lat.ambient
        cand = others[:, None] @ nb.mats[None] @ lc.inv2(y0.rep)[None, None]
        cand = cand.reshape((-1,) + cand.shape[2:])
        close = lq.chart_distance(cand, lat.variant) < 0.5
        for g in cand[close]:
            try:
                hm, w = lc.decompose_transversal(amb, g, radius=None)
            except (lc.OutOfNeighborhood, lc.NonConvergence):
                continue
            s_, t_, u_, ok = lc.bruhat_coords(hm)
            if not ok or abs(s_) > beta or abs(t_) > beta or abs(u_) > beta + 0.1 * eta:
                continue
            if 0 < lc.lie_norm(w) < min(beta, inj[i0]):
                F.append(w)
    F = np.unique(np.round(np.array(F), 15), axis=0)
    return SheetSet(y0, F, beta, eta)


def bootstrap_run(x0: QuotientPoint, t: float, alpha: float, eps: float,
                  config: BootstrapConfig = BootstrapConfig(), seed: int = 0):
    """Iterate bootstrap steps from the base sheet set of x0.  Returns (SheetSet or None, trace)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    lat = x0.lattice
    search = lq.search_cache(lat)
    if lq.periodic_flag(x0, 1e-8, search):
        return None, [TraceRecord(0, 0, config.beta, float("nan"), "periodic", seed)]
    m0 = config.m0 or solve_m_alpha(alpha, config.alpha_samples)
    kappa7 = config.kappa7 or 1 / (8 * m0)
    n = max(1.0, float(t))
    ell = max(1, int(math.floor(kappa7 * eps * n)))
    E = base_sheet_set(x0, t, config.eta, config.beta, config.base_samples, seed, search)
    fmax = max_f_over(E, alpha, stream(seed, "bootstrap-eval", 0), config.samples_per_sheet, search)
    M = math.log(fmax) / n
    state = BootstrapState(0, E, M, n, ell, float(m0), alpha, eps, kappa7)
    trace = [TraceRecord(0, E.size, E.beta, math.exp(M * n), "base", seed, fmax, ell)]
    i_max = min(state.i_max, config.i_max_cap)
    rng = stream(seed, "bootstrap-walk")
    for _ in range(max(i_max, 0)):
        h0, _ = walk_endpoint(m0, rng.uniform(0, 1, ell))
        state = bootstrap_step(state, h0, config=config, seed=seed, search=search)
        rec = state.last_record
        trace.append(rec)
        if rec.branch in ("energy", "trivial"):
            break
    return state.sheets, trace


def energy_constant(E: SheetSet, alpha, eps):
    if E.size < 2:
        return 0.0
    return float(np.max(pairwise_energy(E.F, alpha)) / E.size ** (1 + eps))


# --- periodic orbits --------------------------------------------------------------

def periodic_displacements(rep, lat, cache, cutoff):
    """Transversal w with 0 < |w| < cutoff and exp(w) y on the orbit H.e Gamma, y = rep Gamma."""
    amb = lat.ambient
    q = rep[None] @ cache.mats
    if amb is lc.Ambient.SL2C:
        m = q[:, 0] @ lc.inv2(np.conj(q[:, 0]))
    else:
        m = q[:, 0] @ lc.inv2(q[:, 1])
    half = 0.5 * (m[:, 0, 0] + m[:, 1, 1]).real
    close = (np.max(np.abs(m - np.eye(2)), axis=(-2, -1)) < 4 * cutoff + 1.0) & (half > 0)
    if not close.any():
        return np.zeros((0, 3))
    _, wbar = lc.decompose_transversal_left(amb, q[close])
    w = -wbar
    nrm = lc.lie_norm(w)
    w = w[(nrm > 1e-9) & (nrm < cutoff)]
    if len(w) == 0:
        return w
    return np.unique(np.round(w, 9), axis=0)


@dataclass
class PeriodicStats:
    alpha: float
    samples: int
    mean_f: float
    mean_err: float
    max_count: int
    volume: float
    c16: float


SL2Z_COVOLUME = math.pi / 3


def ergodic_sample(y: QuotientPoint, n: int, m: float, seed: int = 0, burn: int = 20):
    """Points of the H-orbit of y along a nu-random-walk trajectory."""
    rng = stream(seed, "ergodic")
    r = rng.uniform(0, 1, burn + n)
    cur = y.rep[None]
    out = []
    for j in range(burn + n):
        cur, _, _ = lq.act(y.lattice, lc.a_matrix(m) @ lc.u_matrix(r[j]), cur)
        if j >= burn:
            out.append(cur[0])
    return [QuotientPoint(g, y.lattice, True, 0.0) for g in out]


def periodic_orbit_f(Y_sample, alpha, delta0: float = 100.0, cache=None, search=None,
                     volume: float = SL2Z_COVOLUME) -> PeriodicStats:
    """Empirical mean of f_Y and the count bound #I(y) <= C16 v on the sample."""
    lat = Y_sample[0].lattice
    cache = cache or lq.load_cache(lat, 4)
    search = search or lq.search_cache(lat)
    reps = np.array([y.rep for y in Y_sample])
    inj, _ = lq.injectivity_batch(reps, search)
    fvals = []
    counts = []
    for rep, ij in zip(reps, inj):
        w = periodic_displacements(rep, lat, cache, delta0 * ij)
        counts.append(len(w))
        if len(w):
            fvals.append(float(np.sum(lc.lie_norm(w) ** (-alpha))))
        else:
            fvals.append(float(ij ** (-alpha)))
    fvals = np.array(fvals)
    n = len(fvals)
    err = float(fvals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    mc = int(max(counts))
    return PeriodicStats(alpha, n, float(fvals.mean()), err, mc, volume, mc / volume)
