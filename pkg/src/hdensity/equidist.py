"""Sparse horospherical averages and orbit density scans."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import lie_core as lc
from . import lattice_quotient as lq
from .lattice_quotient import LatticeCache, QuotientPoint
from .rng import mc_chunks, stream

_GL_X, _GL_W = np.polynomial.legendre.leggauss(200)


def _bump(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


BUMP_MASS = float(np.sum(_GL_W * _bump(_GL_X)))


def _mod_center(cache: LatticeCache):
    """Cached matrices with one representative per coset of the centre."""
    var = cache.lattice.variant
    central = [np.array(c, dtype=np.int64) for c in lq.central_elements(var)]
    seen = set()
    keep = []
    for i, e in enumerate(cache.elements):
        key = min(tuple(int(v) for v in lq.exact_mul(var, c, e)) for c in central)
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return cache.mats[np.array(keep)]


@lru_cache(maxsize=8)
def _periodizer(lat_name: str, depth: int):
    lat = lq.Lattice.by_name(lat_name)
    return _mod_center(lq.load_cache(lat, depth))


def _canonical_sign(q, per_factor):
    tr = (q[..., 0, 0] + q[..., 1, 1]).real
    if per_factor:
        sgn = np.where(tr < 0, -1.0, 1.0)
    else:
        sgn = np.where(tr[..., :1] < 0, -1.0, 1.0) * np.ones_like(tr)
    return q * sgn[..., None, None]


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Periodised tensor bump in box coordinates (u^-, a, u, transversal) around a centre.

    Supported in the box of half-width 0.1 * radius; the bump integrates to
    ``volume`` against Lebesgue measure in those coordinates.  ``profile="constant"``
    gives the constant function ``value``.
    """
    __test__ = False

    center: QuotientPoint
    radius: float
    profile: str = "bump"
    value: float = 1.0
    volume: float = 1.0
    depth: int = 2

    @property
    def half_width(self):
        return 0.1 * self.radius

    @property
    def norm(self):
        return self.volume / (self.half_width * BUMP_MASS) ** 6

    def __call__(self, reps):
        reps = np.asarray(reps, dtype=complex)
        if self.profile == "constant":
            return np.full(len(reps), float(self.value))
        lat = self.center.lattice
        amb = lat.ambient
        gams = _periodizer(lat.variant.value, self.depth)
        cinv = lc.inv2(self.center.rep)
        per_factor = lat.variant is lq.Variant.SL2Z2
        out = np.zeros(len(reps))
        hw = self.half_width
        for i in range(0, len(reps), 256):
            q = reps[i:i + 256, None] @ gams[None] @ cinv[None, None]
            q = _canonical_sign(q, per_factor)
            near = np.max(np.abs(q - np.eye(2)), axis=(-3, -2, -1)) < 4 * hw + 0.05
            near &= lc.splittable(amb, q)
            if not near.any():
                continue
            pi, gi = np.nonzero(near)
            h, w = lc.decompose_transversal(amb, q[pi, gi], radius=None, check=False)
            s, t, r, ok = lc.bruhat_coords(h)
            coords = np.column_stack([s, t, r, w]) / hw
            val = np.where(ok, np.prod(_bump(np.nan_to_num(coords, nan=2.0)), axis=1), 0.0)
            np.add.at(out, i + pi, val * self.norm)
        return out


@dataclass
class SparseMeasure:
    """Finite probability measure on [0, 1] with a regularity record rho(J) <= C |J|^exponent."""
    support: np.ndarray
    weights: np.ndarray | None = None
    exponent: float = 1.0
    constant: float = 2.0
    floor: float = 0.0

    def __post_init__(self):
        self.support = np.atleast_1d(np.asarray(self.support, dtype=float))
        if self.weights is None:
            self.weights = np.full(len(self.support), 1.0 / len(self.support))
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any((self.support < 0) | (self.support > 1)):
            raise ValueError("support must lie in [0, 1]")
        if abs(self.weights.sum() - 1) > 1e-12:
            raise ValueError("weights must sum to 1")

    @classmethod
    def uniform_grid(cls, n, exponent=1.0, constant=2.0):
        return cls((np.arange(n) + 0.5) / n, None, exponent, constant, 1.0 / n)

    @classmethod
    def dirac(cls, s):
        return cls(np.array([s]), np.array([1.0]), 1.0, 2.0, 0.0)

    @property
    def scale(self):
        """Resolution b of the measure: the regularity floor, or 1/#I when unset."""
        return self.floor if self.floor > 0 else 1.0 / len(self.support)

    def verify(self):
        return rho_regularity_check(self, self.exponent, self.floor or 1.0 / len(self.support),
                                    self.constant)[0]


def dyadic_intervals(floor):
    L = 1.0
    while L >= floor * (1 - 1e-12):
        n = int(round(1 / L))
        for k in range(n):
            yield k * L, (k + 1) * L
        L /= 2


def rho_regularity_check(rho: SparseMeasure, exponent: float, floor: float, constant: float | None = None):
    """Scan dyadic intervals of length >= floor.  Returns (passed, worst_interval, worst_ratio)."""
    C = rho.constant if constant is None else constant
    s = rho.support
    worst = (0.0, None)
    L = 1.0
    while L >= floor * (1 - 1e-12):
        n = int(round(1 / L))
        ids = np.minimum(np.floor(s / L).astype(np.int64), n - 1)
        mass = np.bincount(ids, weights=rho.weights, minlength=n)
        k = int(np.argmax(mass))
        ratio = float(mass[k]) / L**exponent
        if ratio > worst[0]:
            worst = (ratio, (k * L, (k + 1) * L))
        L /= 2
    return worst[0] <= C * (1 + 1e-12), worst[1], worst[0]


# --- averages ----------------------------------------------------------------------

@dataclass(frozen=True)
class Estimate:
    mean: float
    error: float
    samples: int


def _reduce(lat, g):
    reps, _, _ = lq.reduce_batch(lat, g)
    return reps


def _as_family(f):
    return (list(f), False) if isinstance(f, (list, tuple)) else ([f], True)


def _estimates(parts, samples, single):
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / samples
    var = np.maximum(s2 / samples - mean**2, 0.0)
    out = [Estimate(float(m), math.sqrt(v / samples), samples) for m, v in zip(mean, var)]
    return out[0] if single else out


def horospherical_average(f, x: QuotientPoint, t: float, samples: int = 20_000, seed: int = 0):
    """Monte Carlo average of f over a_t n(r, s) x with (r, s) uniform in [0, 1]^2.

    ``f`` may be a list of test functions sharing the same samples; a list of
    estimates is returned in that case.
    """
    fs, single = _as_family(f)
    lat = x.lattice
    amb = lat.ambient

    def chunk(rng, n):
        r = rng.uniform(0, 1, n)
        s = rng.uniform(0, 1, n)
        g = lc.embed_h(amb, lc.a_matrix(t)) @ lc.n_elem(amb, r, s) @ x.rep
        reps = _reduce(lat, g)
        v = np.stack([fn(reps) for fn in fs], axis=1)
        return v.sum(axis=0), (v**2).sum(axis=0)

    return _estimates(mc_chunks(seed, ("horo", t), samples, chunk), samples, single)


def window(b):
    lb = abs(math.log(b))
    return lb / 4, lb / 2


def sparse_average(f, x: QuotientPoint, t: float, rho: SparseMeasure,
                   samples: int = 4096, seed: int = 0):
    """Average of f(a_t u_r v_s x) over r uniform (Monte Carlo) and s ~ rho (exact sum)."""
    lo, hi = window(rho.scale)
    if not lo <= t <= hi:
        warnings.warn(f"t={t} outside the window [{lo:.3g}, {hi:.3g}] for b={rho.scale:.3g}",
                      stacklevel=2)
    fs, single = _as_family(f)
    lat = x.lattice
    amb = lat.ambient
    vs = lc.v_elem(amb, rho.support) @ x.rep               # (I, k, 2, 2)
    step = max(1, 8192 // len(vs))

    def chunk(rng, n):
        r = rng.uniform(0, 1, n)
        h = lc.embed_h(amb, lc.a_matrix(t) @ lc.u_matrix(r))   # (n, k, 2, 2)
        rows = np.zeros((n, len(fs)))
        for i in range(0, n, step):
            g = h[i:i + step, None] @ vs[None]
            reps = _reduce(lat, g.reshape((-1,) + g.shape[2:]))
            for j, fn in enumerate(fs):
                rows[i:i + step, j] = fn(reps).reshape(-1, len(vs)) @ rho.weights
        return rows.sum(axis=0), (rows**2).sum(axis=0)

    return _estimates(mc_chunks(seed, ("sparse", t), samples, chunk), samples, single)


@dataclass
class SweepRow:
    t: float
    b: float
    discrepancy: float
    mc_error: float


def discrepancy_sweep(f, x: QuotientPoint, rho: SparseMeasure, ts, haar,
                      samples: int = 4096, seed: int = 0):
    """|sparse - haar| per t, averaged over the test family when f is a list."""
    fs, single = _as_family(f)
    haar = [haar] if single else list(haar)
    rows = []
    for t in ts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = sparse_average(fs, x, t, rho, samples, seed)
        disc = np.mean([abs(e.mean - h.mean) for e, h in zip(est, haar)])
        err = np.mean([math.hypot(e.error, h.error) for e, h in zip(est, haar)])
        rows.append(SweepRow(float(t), rho.scale, float(disc), float(err)))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "b", "discrepancy", "mc_error"])
    for r in rows:
        w.writerow([repr(r.t), repr(r.b), repr(r.discrepancy), repr(r.mc_error)])
    return buf.getvalue()


def decays(rows, slack: float = 2.0) -> bool:
    """Discrepancy strictly decreasing along the sweep, beyond the recorded MC error."""
    d = [r.discrepancy for r in rows]
    e = [r.mc_error for r in rows]
    steps = all(d[i + 1] < d[i] for i in range(len(d) - 1))
    return bool(steps and d[0] - d[-1] > slack * (e[0] + e[-1]))


# --- density scans -----------------------------------------------------------------

def sample_p_ball(rng, T, n):
    """Elements of P with |g - I| <= T: log-uniform diagonal, uniform unipotent coordinate."""
    la = rng.uniform(-math.log(T + 1), math.log(T + 1), n)       # log of the (1,1) entry
    a = np.exp(la)
    lim = np.minimum(T, (T + 1) - 1 / a) / a
    r = rng.uniform(-1, 1, n) * np.maximum(lim, 0.0)
    return lc.a_matrix(2 * la) @ lc.u_matrix(r)


def sample_grid(lat, n, eta, seed=0, spread=1.0, max_tries=50):
    """Reduced points of X_eta from seeded random group elements."""
    rng = stream(seed, "test-grid")
    search = lq.search_cache(lat)
    amb = lat.ambient
    out = []
    for _ in range(max_tries):
        w = rng.normal(size=(4 * n, 6)) * spread
        g = lc.exp_alg(amb, w)
        reps = _reduce(lat, g)
        inj, _ = lq.injectivity_batch(reps, search)
        out.extend(reps[inj >= eta])
        if len(out) >= n:
            break
    return np.array(out[:n])


@dataclass
class DensityRow:
    T: float
    covering_radius: float
    n_samples: int
    seed: int


def cloud(x0: QuotientPoint, T: float, n: int, seed: int = 0):
    """x0 itself followed by n reduced samples of B_P(e, T).x0."""
    lat = x0.lattice

    def chunk(rng, m):
        g = lc.embed_h(lat.ambient, sample_p_ball(rng, T, m)) @ x0.rep
        return _reduce(lat, g)

    return np.concatenate([x0.rep[None]] + mc_chunks(seed, ("p-ball", float(T)), n, chunk))


def covering_radius(points, cloud_reps, cache):
    d = lq.distance_matrix(points, cloud_reps, cache)
    return float(np.max(np.min(d, axis=1)))


def density_scan(x0: QuotientPoint, T_grid, test_points, samples: int = 4096, seed: int = 0,
                 cache: LatticeCache | None = None, nested: bool = True):
    """Covering radius of the test points by the sampled P-ball orbit cloud, per T.

    With ``nested`` the cloud for T keeps the samples drawn for every smaller T
    on the grid.  Those points lie in the larger ball too, so the estimate stays
    an upper bound for the distance to the orbit piece and is nonincreasing in T.
    """
    cache = cache or lq.neighbor_cache(x0.lattice)
    rows = []
    best = np.full(len(test_points), np.inf)
    for T in sorted(T_grid):
        c = cloud(x0, T, samples, seed)
        d = np.min(lq.distance_matrix(test_points, c, cache), axis=1)
        best = np.minimum(best, d) if nested else d
        n = samples * (len(rows) + 1) if nested else samples
        rows.append(DensityRow(float(T), float(np.max(best)), n, seed))
    return rows


def density_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "covering_radius", "n_samples", "seed"])
    for r in rows:
        w.writerow([repr(r.T), repr(r.covering_radius), r.n_samples, r.seed])
    return buf.getvalue()


def distance_to_orbit(reps, lat, cache: LatticeCache | None = None):
    """Transversal distance from each point to the orbit H.e Gamma, over the cache."""
    cache = cache or lq.neighbor_cache(lat)
    amb = lat.ambient
    out = np.full(len(reps), np.inf)
    for i, g in enumerate(reps):
        q = g[None] @ cache.mats
        if amb is lc.Ambient.SL2C:
            m = q[:, 0] @ lc.inv2(np.conj(q[:, 0]))
        else:
            m = q[:, 0] @ lc.inv2(q[:, 1])
        half = 0.5 * (m[:, 0, 0] + m[:, 1, 1]).real
        ok = half > 0
        if not ok.any():
            continue
        _, w = lc.decompose_transversal_left(amb, q[ok])
        out[i] = float(np.min(lc.lie_norm(w)))
    return out


def decay_exponent(rows):
    """Least-squares slope of log covering radius against log T."""
    T = np.log([r.T for r in rows])
    R = np.log([max(r.covering_radius, 1e-300) for r in rows])
    return float(-np.polyfit(T, R, 1)[0])
