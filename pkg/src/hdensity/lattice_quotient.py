"""Arithmetic lattices, reduction to fundamental domains, injectivity radius,
height functions and recurrence statistics.

Three lattices are built in:

* ``SL2_GaussianIntegers``: SL2(Z[i]) inside SL2(C), reduced to the Picard
  domain ``|Re z| <= 1/2, 0 <= Im z <= 1/2, |z|^2 + y^2 >= 1`` of upper half
  space.
* ``SL2Z_x_SL2Z``: SL2(Z) x SL2(Z) inside SL2(R) x SL2(R), reduced factorwise
  to the modular domain.
* ``SL2_ZSqrt2``: SL2(Z[sqrt 2]) embedded by its two real places; reduction
  is a best-effort height maximisation and is always flagged unreduced.

A point ``x = g Gamma`` is reduced when the symmetric-space point
``g^{-1} . o`` lies in the fundamental domain, where ``o`` is the base point
``j`` of upper half space (or ``(i, i)`` for the product).

Lattice elements are stored exactly as 8-tuples of integers: the four
entries ``a, b, c, d`` as pairs (Gaussian or quadratic integers), or the two
integer matrices of the product lattice.
"""
from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import lie_core as lc
from .lie_core import Ambient
from .rng import mc_chunks, stream

INJ_CAP = 0.01
# inj = min(INJ_CAP, INJ_SCALE * min |g gamma g^-1 - I|).  Elements of
# (B^G_{10 beta})^-1 B^G_{10 beta} satisfy |b - I| <= ~40 beta, so a
# displacement above 50 beta certifies injectivity on that box.
INJ_SCALE = 0.02
WORD_LENGTH_CAP = 14
CACHE_ENV = "HDENSITY_CACHE_DIR"
SQRT2 = np.sqrt(2.0)
UNIT = 1.0 + SQRT2


class CapExceeded(ValueError):
    pass


class Variant(str, Enum):
    GAUSS = "SL2_GaussianIntegers"
    SL2Z2 = "SL2Z_x_SL2Z"
    ZSQRT2 = "SL2_ZSqrt2"
    SL2Z = "SL2Z"          # one real factor, used for enumeration only


# --- exact arithmetic -------------------------------------------------------------

def _pair_mul(x, y, d):
    # (x0 + x1 q)(y0 + y1 q) with q^2 = d
    return (x[0] * y[0] + d * x[1] * y[1], x[0] * y[1] + x[1] * y[0])


def _pair_add(x, y):
    return (x[0] + y[0], x[1] + y[1])


def _mat_mul_pairs(g, h, d):
    a, b, c, e = (g[0:2], g[2:4], g[4:6], g[6:8])
    p, q, r, s = (h[0:2], h[2:4], h[4:6], h[6:8])
    out = (_pair_add(_pair_mul(a, p, d), _pair_mul(b, r, d)),
           _pair_add(_pair_mul(a, q, d), _pair_mul(b, s, d)),
           _pair_add(_pair_mul(c, p, d), _pair_mul(e, r, d)),
           _pair_add(_pair_mul(c, q, d), _pair_mul(e, s, d)))
    return tuple(v for pair in out for v in pair)


def _int_mat_mul(g, h):
    return (g[0] * h[0] + g[1] * h[2], g[0] * h[1] + g[1] * h[3],
            g[2] * h[0] + g[3] * h[2], g[2] * h[1] + g[3] * h[3])


def _square(variant):
    return {Variant.GAUSS: -1, Variant.SL2Z: -1, Variant.ZSQRT2: 2}[variant]


def exact_mul(variant, g, h):
    if variant is Variant.SL2Z2:
        return _int_mat_mul(g[:4], h[:4]) + _int_mat_mul(g[4:], h[4:])
    return _mat_mul_pairs(g, h, _square(variant))


def exact_inv(variant, g):
    if variant is Variant.SL2Z2:
        a, b, c, d = g[:4]
        p, q, r, s = g[4:]
        return (d, -b, -c, a, s, -q, -r, p)
    return (g[6], g[7], -g[2], -g[3], -g[4], -g[5], g[0], g[1])


def exact_identity(variant):
    if variant is Variant.SL2Z2:
        return (1, 0, 0, 1, 1, 0, 0, 1)
    return (1, 0, 0, 0, 0, 0, 1, 0)


def central_elements(variant):
    if variant is Variant.SL2Z2:
        return {(s, 0, 0, s, t, 0, 0, t) for s in (1, -1) for t in (1, -1)}
    return {(s, 0, 0, 0, 0, 0, s, 0) for s in (1, -1)}


def to_float(variant, elems):
    """Exact 8-tuples (array of shape (N, 8)) to group arrays (N, k, 2, 2)."""
    e = np.asarray(elems, dtype=float).reshape(-1, 8)
    if variant in (Variant.GAUSS, Variant.SL2Z):
        m = (e[:, 0::2] + 1j * e[:, 1::2]).reshape(-1, 1, 2, 2)
        return m
    if variant is Variant.SL2Z2:
        return e.reshape(-1, 2, 2, 2).astype(complex)
    s1 = e[:, 0::2] + SQRT2 * e[:, 1::2]
    s2 = e[:, 0::2] - SQRT2 * e[:, 1::2]
    return np.stack([s1.reshape(-1, 2, 2), s2.reshape(-1, 2, 2)], axis=1).astype(complex)


# --- lattices ---------------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    variant: Variant
    generators: tuple

    @property
    def ambient(self) -> Ambient:
        if self.variant in (Variant.GAUSS, Variant.SL2Z):
            return Ambient.SL2C
        return Ambient.SL2RxSL2R

    @property
    def id(self) -> str:
        return self.variant.value

    @classmethod
    def gaussian(cls):
        gens = ((1, 0, 1, 0, 0, 0, 1, 0),      # T
                (1, 0, 0, 1, 0, 0, 1, 0),      # translation by i
                (0, 0, -1, 0, 1, 0, 0, 0),     # S
                (0, 1, 0, 0, 0, 0, 0, -1))     # diag(i, -i)
        return cls(Variant.GAUSS, gens)

    @classmethod
    def sl2z_pair(cls):
        S = (0, -1, 1, 0)
        T = (1, 1, 0, 1)
        one = (1, 0, 0, 1)
        return cls(Variant.SL2Z2, (S + one, T + one, one + S, one + T))

    @classmethod
    def zsqrt2(cls):
        gens = ((1, 0, 1, 0, 0, 0, 1, 0),      # translation by 1
                (1, 0, 0, 1, 0, 0, 1, 0),      # translation by sqrt 2
                (0, 0, -1, 0, 1, 0, 0, 0),     # S
                (1, 1, 0, 0, 0, 0, -1, 1))     # diag(1 + sqrt2, -1 + sqrt2)
        return cls(Variant.ZSQRT2, gens)

    @classmethod
    def sl2z(cls):
        return cls(Variant.SL2Z, ((0, 0, -1, 0, 1, 0, 0, 0), (1, 0, 1, 0, 0, 0, 1, 0)))

    @classmethod
    def by_name(cls, name: str):
        table = {Variant.GAUSS.value: cls.gaussian, Variant.SL2Z2.value: cls.sl2z_pair,
                 Variant.ZSQRT2.value: cls.zsqrt2, Variant.SL2Z.value: cls.sl2z}
        if name not in table:
            raise ValueError(f"unknown lattice {name!r}")
        return table[name]()


@dataclass
class LatticeCache:
    lattice: Lattice
    depth: int
    elements: np.ndarray              # (N, 8) int64, lexicographically sorted
    lengths: np.ndarray               # word length of each element
    mats: np.ndarray = field(init=False, repr=False)
    nontrivial: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mats = to_float(self.lattice.variant, self.elements)
        central = central_elements(self.lattice.variant)
        self.nontrivial = np.array([tuple(int(v) for v in e) not in central
                                    for e in self.elements], dtype=bool)

    def __len__(self):
        return len(self.elements)

    def subset(self, max_length: int) -> "LatticeCache":
        keep = self.lengths <= max_length
        return LatticeCache(self.lattice, min(self.depth, max_length),
                            self.elements[keep], self.lengths[keep])

    def to_text(self) -> str:
        lines = [f"lattice={self.lattice.id} depth={self.depth} count={len(self)}"]
        lines += [" ".join(str(int(v)) for v in e) for e in self.elements]
        return "\n".join(lines) + "\n"


def _bfs(lat: Lattice, word_length: int, allowed=None):
    var = lat.variant
    gens = list(lat.generators) + [exact_inv(var, g) for g in lat.generators]
    gens = list(dict.fromkeys(gens))
    start = exact_identity(var)
    seen = {start: 0}
    frontier = [start]
    for depth in range(1, word_length + 1):
        nxt = []
        for g in frontier:
            for s in gens:
                h = exact_mul(var, g, s)
                if h in seen or (allowed is not None and h not in allowed):
                    continue
                seen[h] = depth
                nxt.append(h)
        frontier = nxt
    return seen


def _make_cache(lat, depth, seen):
    keys = sorted(seen)
    elems = np.array(keys, dtype=np.int64).reshape(-1, 8)
    lengths = np.array([seen[k] for k in keys], dtype=np.int64)
    return LatticeCache(lat, depth, elems, lengths)


def enumerate_lattice(lat: Lattice, word_length: int, cap: int = WORD_LENGTH_CAP) -> LatticeCache:
    """All elements of word length <= word_length in the generators and their inverses."""
    if word_length < 0:
        raise ValueError("word_length must be nonnegative")
    if word_length > cap:
        raise CapExceeded(f"word length {word_length} exceeds cap {cap}")
    return _make_cache(lat, word_length, _bfs(lat, word_length))


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "hdensity"))


def cache_path(lat: Lattice, depth: int) -> Path:
    return cache_dir() / f"{lat.id}-depth{depth}.txt"


def parse_cache(lat: Lattice, text: str) -> LatticeCache:
    lines = text.splitlines()
    header = dict(tok.split("=", 1) for tok in lines[0].split())
    if header.get("lattice") != lat.id:
        raise ValueError(f"cache is for {header.get('lattice')}, not {lat.id}")
    depth = int(header["depth"])
    elems = {tuple(int(v) for v in ln.split()) for ln in lines[1:] if ln.strip()}
    if len(elems) != int(header["count"]):
        raise ValueError("cache count mismatch")
    # word lengths are not stored; recover them by a BFS confined to the file
    seen = _bfs(lat, depth, allowed=elems)
    return _make_cache(lat, depth, seen)


_memory_caches: dict = {}


def load_cache(lat: Lattice, depth: int) -> LatticeCache:
    """Read the on-disk cache, building and writing it when missing."""
    key = (lat.id, depth)
    if key in _memory_caches:
        return _memory_caches[key]
    path = cache_path(lat, depth)
    if path.exists():
        cache = parse_cache(lat, path.read_text())
    else:
        cache = enumerate_lattice(lat, depth)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        tmp.write_text(cache.to_text())
        tmp.replace(path)
    _memory_caches[key] = cache
    return cache


# default search depths: enough to contain every short element that matters
# for reduced points
SEARCH_DEPTH = {Variant.GAUSS: 3, Variant.SL2Z2: 4, Variant.ZSQRT2: 4, Variant.SL2Z: 4}
NEIGHBOR_DEPTH = {Variant.GAUSS: 2, Variant.SL2Z2: 3, Variant.ZSQRT2: 2, Variant.SL2Z: 3}


def search_cache(lat: Lattice) -> LatticeCache:
    return load_cache(lat, SEARCH_DEPTH[lat.variant])


def neighbor_cache(lat: Lattice) -> LatticeCache:
    return load_cache(lat, NEIGHBOR_DEPTH[lat.variant])


# --- quotient points and reduction ------------------------------------------------

@dataclass(frozen=True)
class QuotientPoint:
    rep: np.ndarray                   # (k, 2, 2) complex
    lattice: Lattice
    reduced: bool = True
    quality: float = 0.0              # iterations used by the reduction

    @property
    def ambient(self):
        return self.lattice.ambient


def symmetric_point(variant, g):
    """Symmetric-space point g^{-1}.o as (z, y) arrays; product lattices give one per factor."""
    g = np.asarray(g)
    m = lc.inv2(g)
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    den = np.abs(c) ** 2 + np.abs(d) ** 2
    if variant in (Variant.GAUSS, Variant.SL2Z):
        z = (a * np.conj(c) + b * np.conj(d)) / den
        return z[..., 0], 1.0 / den[..., 0]
    # real factors: z = (ai + b)/(ci + d)
    z = ((a * c + b * d).real + 1j) / den.real
    return z.real, 1.0 / den.real


def _upper(n):
    out = np.zeros(np.shape(n) + (2, 2), dtype=complex)
    out[..., 0, 0] = 1
    out[..., 1, 1] = 1
    out[..., 0, 1] = n
    return out


_S_INV = np.array([[0, 1], [-1, 0]], dtype=complex)
_FLIP_INV = np.array([[-1j, 0], [0, 1j]])


def _canonical_sign(g, per_factor):
    """Fix the +-I ambiguity: the leading large entry gets positive real part."""
    g = g.copy()
    factors = range(g.shape[-3]) if per_factor else [0]
    for k in factors:
        flat = g[..., k, :, :].reshape(g.shape[:-3] + (4,))
        mod = np.abs(flat)
        lead = np.argmax(mod >= 0.5 * mod.max(axis=-1, keepdims=True), axis=-1)
        e = np.take_along_axis(flat, lead[..., None], axis=-1)[..., 0]
        tol = 1e-9 * np.abs(e)
        neg = (e.real < -tol) | ((np.abs(e.real) <= tol) & (e.imag < 0))
        if per_factor:
            g[..., k, :, :][neg] *= -1
        else:
            g[neg] *= -1
    return g


def _reduce_gauss(g, max_iter):
    g = g.copy()
    active = np.ones(len(g), dtype=bool)
    iters = np.zeros(len(g))
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        h = g[idx, 0]
        z, y = symmetric_point(Variant.GAUSS, h[:, None])
        n = np.round(z.real) + 1j * np.round(z.imag)
        moved = n != 0
        h = np.where(moved[:, None, None], h @ _upper(n), h)
        z = z - n
        flip = z.imag < -1e-13
        h[flip] = h[flip] @ _FLIP_INV
        z = np.where(flip, -z, z)
        inv = np.abs(z) ** 2 + y ** 2 < 1 - 1e-12
        h[inv] = h[inv] @ _S_INV
        g[idx, 0] = h
        iters[idx] += 1
        active[idx] = moved | flip | inv
    return g, ~active, iters


def _reduce_modular(g, max_iter):
    g = g.copy()
    active = np.ones(g.shape[:2], dtype=bool)   # per point and factor
    iters = np.zeros(len(g))
    for _ in range(max_iter):
        pi, fi = np.nonzero(active)
        if len(pi) == 0:
            break
        h = g[pi, fi]
        z, y = symmetric_point(Variant.SL2Z2, h[:, None])
        z = z[:, 0] + 1j * y[:, 0]
        n = np.round(z.real)
        moved = n != 0
        h = np.where(moved[:, None, None], h @ _upper(n), h)
        z = z - n
        inv = np.abs(z) ** 2 < 1 - 1e-12
        h[inv] = h[inv] @ _S_INV
        g[pi, fi] = h
        np.add.at(iters, pi, 1)
        active[pi, fi] = moved | inv
    return g, ~active.any(axis=1), iters


def _embed_pair(x, y):
    # sigma images of x + y sqrt 2 as a length-2 array
    return np.stack([x + SQRT2 * y, x - SQRT2 * y], axis=-1)


def _reduce_zsqrt2(g, max_iter):
    """Best-effort: translate by the ring, balance by units, invert when heights grow."""
    g = g.copy()
    active = np.ones(len(g), dtype=bool)
    iters = np.zeros(len(g))
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        h = g[idx]
        z, y = symmetric_point(Variant.ZSQRT2, h)
        x = z
        m = np.round((x[:, 0] + x[:, 1]) / 2)
        k = np.round((x[:, 0] - x[:, 1]) / (2 * SQRT2))
        b = _embed_pair(m, k)
        moved = (m != 0) | (k != 0)
        h = np.where(moved[:, None, None, None], h @ _upper(b), h)
        x = x - b
        # unit balancing: diag(u^p, u^-p) scales heights by u^{2p} and u^{-2p}
        p = np.round(-np.log(y[:, 0] / y[:, 1]) / (4 * np.log(UNIT)))
        bal = p != 0
        if bal.any():
            u1 = UNIT ** p[bal]
            u2 = (1 - SQRT2) ** p[bal]
            d = np.zeros((bal.sum(), 2, 2, 2), dtype=complex)
            d[:, 0, 0, 0] = 1 / u1
            d[:, 0, 1, 1] = u1
            d[:, 1, 0, 0] = 1 / u2
            d[:, 1, 1, 1] = u2
            h[bal] = h[bal] @ d
            z2, y2 = symmetric_point(Variant.ZSQRT2, h[bal])
            x[bal] = z2
            y[bal] = y2
        modsq = x**2 + y**2
        inv = modsq[:, 0] * modsq[:, 1] < 1 - 1e-12
        h[inv] = h[inv] @ _S_INV
        g[idx] = h
        iters[idx] += 1
        active[idx] = moved | bal | inv
    return g, np.zeros(len(g), dtype=bool), iters


def reduce_batch(lat: Lattice, g, max_iter: int = 400):
    """Reduce many representatives at once.  Returns (reps, reduced_flags, iterations)."""
    g = np.asarray(g, dtype=complex).reshape((-1,) + (lat.ambient.nfactors, 2, 2))
    if lat.variant is Variant.GAUSS:
        out, ok, it = _reduce_gauss(g, max_iter)
        return _canonical_sign(out, False), ok, it
    if lat.variant is Variant.SL2Z2:
        out, ok, it = _reduce_modular(g, max_iter)
        return _canonical_sign(out, True), ok, it
    if lat.variant is Variant.ZSQRT2:
        out, ok, it = _reduce_zsqrt2(g, max_iter)
        return _canonical_sign(out, False), ok, it
    raise ValueError(f"no reduction for {lat.variant}")


def reduce_point(g, lat: Lattice, max_iter: int = 400) -> QuotientPoint:
    reps, ok, it = reduce_batch(lat, g, max_iter)
    return QuotientPoint(reps[0], lat, bool(ok[0]), float(it[0]))


def domain_check(lat: Lattice, g, tol=1e-9):
    """True where the symmetric-space point satisfies the fundamental domain inequalities."""
    z, y = symmetric_point(lat.variant, g)
    if lat.variant is Variant.GAUSS:
        return ((np.abs(z.real) <= 0.5 + tol) & (z.imag >= -tol) & (z.imag <= 0.5 + tol)
                & (np.abs(z) ** 2 + y**2 >= 1 - tol))
    if lat.variant is Variant.SL2Z2:
        return np.all((np.abs(z) <= 0.5 + tol) & (z**2 + y**2 >= 1 - tol), axis=-1)
    raise ValueError("no exact domain for this lattice")


def height(lat: Lattice, g):
    """Height of the symmetric-space point (minimum over factors for products)."""
    _, y = symmetric_point(lat.variant, g)
    return y if y.ndim == np.ndim(g) - 3 else np.min(y, axis=-1)


def act(lat: Lattice, h, x_reps):
    """Left-translate representatives by H-matrices (broadcast) and reduce."""
    g = lc.embed_h(lat.ambient, h) @ x_reps
    return reduce_batch(lat, g)


# --- displacement geometry --------------------------------------------------------

def _signed_dist(variant, c):
    """|C - I| modulo the center, per element (max over factors)."""
    dm = np.max(np.abs(c - np.eye(2)), axis=(-2, -1))
    dp = np.max(np.abs(c + np.eye(2)), axis=(-2, -1))
    if variant is Variant.SL2Z2:
        return np.max(np.minimum(dm, dp), axis=-1)
    return np.minimum(np.max(dm, axis=-1), np.max(dp, axis=-1))


def conjugation_displacements(g, cache: LatticeCache, chunk: int = 512):
    """Matrix of |g gamma g^-1 - I| (mod center) over nontrivial cached gamma."""
    g = np.asarray(g, dtype=complex).reshape((-1,) + cache.mats.shape[1:])
    gam = cache.mats[cache.nontrivial]
    out = np.empty((len(g), len(gam)))
    for i in range(0, len(g), chunk):
        gi = g[i:i + chunk]
        c = gi[:, None] @ gam[None] @ lc.inv2(gi)[:, None]
        out[i:i + chunk] = _signed_dist(cache.lattice.variant, c)
    return out


def injectivity_batch(g, cache: LatticeCache, raw: bool = False):
    """Injectivity radius proxy for reduced representatives.

    Returns (values, low_confidence) where low_confidence marks points whose
    minimizing element has maximal word length in the cache.
    """
    disp = conjugation_displacements(g, cache)
    j = np.argmin(disp, axis=1)
    vals = INJ_SCALE * disp[np.arange(len(disp)), j]
    lengths = cache.lengths[cache.nontrivial][j]
    flag = lengths >= cache.depth
    if not raw:
        flag &= vals < INJ_CAP
        vals = np.minimum(INJ_CAP, vals)
    return vals, flag


def injectivity_radius(x: QuotientPoint, search: LatticeCache | None = None, raw: bool = False):
    search = search or search_cache(x.lattice)
    v, flag = injectivity_batch(x.rep[None], search, raw)
    return float(v[0])


def injectivity_flagged(x: QuotientPoint, search: LatticeCache | None = None):
    search = search or search_cache(x.lattice)
    v, flag = injectivity_batch(x.rep[None], search)
    return float(v[0]), bool(flag[0])


def _cusp_columns(cache: LatticeCache):
    cols = cache.mats[:, :, :, 0]               # first columns, (M, k, 2)
    return cols


def omega_batch(lat: Lattice, g, cache: LatticeCache, chunk: int = 1024):
    """Height function built from the orbit of the cusp vector.

    The cusp vector is realised as the rank-one matrix e1 e1^* on which G acts
    by g X g^*; its max norm after translation is |g gamma e1|_inf^2.  For the
    irreducible lattice the vector is the wedge of the two E12 copies, whose
    norm factorises as 2 sqrt2 |Ad(g1 gamma1) E12| |Ad(g2 gamma2) E12|.
    """
    g = np.asarray(g, dtype=complex).reshape((-1,) + cache.mats.shape[1:])
    cols = _cusp_columns(cache)
    out = np.empty(len(g))
    for i in range(0, len(g), chunk):
        gi = g[i:i + chunk]
        v = np.einsum("nkab,mkb->nmka", gi, cols)
        nrm = np.max(np.abs(v), axis=-1) ** 2     # (n, m, k)
        if lat.variant is Variant.ZSQRT2:
            vec = 2 * SQRT2 * nrm[..., 0] * nrm[..., 1]
            out[i:i + chunk] = np.max(1.0 / vec, axis=1)
        elif lat.variant is Variant.SL2Z2:
            out[i:i + chunk] = np.max(1.0 / nrm, axis=(1, 2))
        else:
            out[i:i + chunk] = np.max(1.0 / nrm[..., 0], axis=1)
    return np.maximum(2.0, out)


def omega(x: QuotientPoint, cache: LatticeCache | None = None) -> float:
    cache = cache or search_cache(x.lattice)
    return float(omega_batch(x.lattice, x.rep[None], cache)[0])


def chart_distance(c, variant):
    """Right-invariant metric log(1 + 2|C - I|) (mod center); subadditive."""
    return np.log1p(2 * _signed_dist(variant, c))


def distance_matrix(ga, gb, cache: LatticeCache, chunk: int = 64):
    """Pairwise quotient distances min_gamma d(g_a gamma g_b^{-1}) over the cache."""
    shape = cache.mats.shape[1:]
    ga = np.asarray(ga, dtype=complex).reshape((-1,) + shape)
    gb = np.asarray(gb, dtype=complex).reshape((-1,) + shape)
    gbinv = lc.inv2(gb)
    var = cache.lattice.variant
    out = np.empty((len(ga), len(gb)))
    left = ga[:, None] @ cache.mats[None]             # (Na, M, k, 2, 2)
    for j in range(0, len(gb), chunk):
        c = left[:, :, None] @ gbinv[None, None, j:j + chunk]
        out[:, j:j + chunk] = np.min(chart_distance(c, var), axis=1)
    return out


def distance_X(x: QuotientPoint, y: QuotientPoint, cache: LatticeCache | None = None) -> float:
    if x.lattice.id != y.lattice.id:
        raise ValueError("points belong to different lattices")
    cache = cache or neighbor_cache(x.lattice)
    return float(distance_matrix(x.rep[None], y.rep[None], cache)[0, 0])


# --- near-stabilizer search -------------------------------------------------------

_TRIPLES = list(itertools.combinations(range(6), 3))


def _ad_matrix(amb, g):
    basis = np.eye(6)
    cols = lc.adjoint(amb, np.asarray(g)[..., None, :, :, :], basis)   # (..., 6, 6) rows=basis
    return np.swapaxes(cols, -1, -2)


def _plucker(a):
    # 3x3 minors of (..., 6, 3)
    idx = np.array(_TRIPLES)
    sub = a[..., idx, :]                           # (..., 20, 3, 3)
    return np.linalg.det(sub)


def h_wedge(amb, g):
    """Plucker coordinates of g^{-1} v_H, v_H spanning the top wedge of the H-algebra."""
    ad = _ad_matrix(amb, lc.inv2(np.asarray(g)))
    return _plucker(ad[..., :, :3])


def near_stabilizer_search(x: QuotientPoint, tol: float, cache: LatticeCache):
    """Cached gamma (mod center) fixing g^{-1} v_H up to sign within tol, sorted by residual."""
    amb = x.ambient
    a = _ad_matrix(amb, lc.inv2(x.rep))[:, :3]
    p0 = _plucker(a)
    scale = np.max(np.abs(p0))
    gam = cache.mats
    moved = _plucker(_ad_matrix(amb, gam) @ a)
    res = np.minimum(np.max(np.abs(moved - p0), axis=-1),
                     np.max(np.abs(moved + p0), axis=-1)) / scale
    hits = []
    seen = set()
    central = central_elements(cache.lattice.variant)
    for i in np.argsort(res, kind="stable"):
        if res[i] > tol:
            break
        e = tuple(int(v) for v in cache.elements[i])
        if e in central:
            continue
        key = e if cache.lattice.variant is Variant.SL2Z2 else min(e, tuple(-v for v in e))
        if key in seen:
            continue
        seen.add(key)
        hits.append((e, float(res[i])))
    return hits


def noncommuting_pair(variant, hits) -> bool:
    """True when two hits fail to commute modulo the center."""
    elems = [h[0] for h in hits]
    for g, h in itertools.combinations(elems, 2):
        gh = exact_mul(variant, g, h)
        hg = exact_mul(variant, h, g)
        if gh != hg and gh != tuple(-v for v in hg):
            return True
    return False


def periodic_flag(x: QuotientPoint, tol: float = 1e-8, cache: LatticeCache | None = None) -> bool:
    cache = cache or search_cache(x.lattice)
    return noncommuting_pair(x.lattice.variant, near_stabilizer_search(x, tol, cache))


@dataclass
class HeightFit:
    slope: float          # of log omega against -2 log inj
    correlation: float
    constant: float       # smallest C with inj^2 >= 1 / (C omega) on the sample
    samples: int


def omega_injectivity_fit(lat: Lattice, samples: int = 400, seed: int = 0, t_max: float = 8.0,
                          floor: float = 2.5) -> HeightFit:
    """Compare the height function with the uncapped injectivity proxy on cusp excursions.

    Points are a_t exp(w) with t uniform in [0, t_max] and Gaussian w, reduced;
    only points with omega above ``floor`` enter the fit.
    """
    rng = stream(seed, "height-fit")
    w = rng.normal(size=(samples, 6)) * 0.5
    t = rng.uniform(0.0, t_max, samples)
    g = lc.embed_h(lat.ambient, lc.a_matrix(t)) @ lc.exp_alg(lat.ambient, w)
    reps, _, _ = reduce_batch(lat, g)
    cache = search_cache(lat)
    om = omega_batch(lat, reps, cache)
    inj, _ = injectivity_batch(reps, cache, raw=True)
    sel = om > floor
    x = -2 * np.log(inj[sel])
    y = np.log(om[sel])
    slope = float(np.polyfit(x, y, 1)[0])
    corr = float(np.corrcoef(x, y)[0, 1])
    const = float(np.max(1.0 / (om * inj**2)))
    return HeightFit(slope, corr, const, int(sel.sum()))


# --- recurrence -------------------------------------------------------------------

def orbit_points(x: QuotientPoint, t: float, r):
    """Reduced representatives of a_t u_r x for an array of r."""
    h = lc.a_matrix(t) @ lc.u_matrix(np.asarray(r, dtype=float))
    return act(x.lattice, h, x.rep[None])


def recurrence_fraction(x: QuotientPoint, t: float, interval, eps: float, samples: int = 10_000,
                        seed: int = 0, search: LatticeCache | None = None, inj_fn=None) -> float:
    """Monte Carlo fraction of r in the interval with inj(a_t u_r x) < eps^2."""
    lo, hi = interval
    search = search or search_cache(x.lattice)

    def chunk(rng, n):
        r = rng.uniform(lo, hi, n)
        if inj_fn is not None:
            vals = inj_fn(x, t, r)
        else:
            reps, _, _ = orbit_points(x, t, r)
            vals, _ = injectivity_batch(reps, search)
        return int(np.sum(vals < eps**2))

    hits = mc_chunks(seed, ("recurrence", t, eps), samples, chunk)
    return sum(hits) / samples


def orbit_injectivity(x: QuotientPoint, t: float, samples: int, seed: int = 0,
                      interval=(0.0, 1.0), search: LatticeCache | None = None):
    """Injectivity radii along a_t u_r x for seeded uniform r (shared draws for all thresholds)."""
    search = search or search_cache(x.lattice)

    def chunk(rng, n):
        r = rng.uniform(interval[0], interval[1], n)
        reps, _, _ = orbit_points(x, t, r)
        return injectivity_batch(reps, search)[0]

    return np.concatenate(mc_chunks(seed, ("orbit-inj", t), samples, chunk))


@dataclass
class RecurrenceProfile:
    eps: list
    fractions: list
    errors: list
    saturated: list       # eps^2 above the injectivity cap: every point counts
    slope: float
    passed: bool


def recurrence_profile(x: QuotientPoint, t: float, eps_grid=(0.02, 0.05, 0.1, 0.2),
                       samples: int = 20_000, seed: int = 0,
                       search: LatticeCache | None = None) -> RecurrenceProfile:
    """Cusp-excursion fractions along a_t u_r x against a single linear slope in eps.

    The slope is the largest fraction/eps ratio among unsaturated thresholds.
    The profile fails on super-linear blow-up: the ratio at the smallest eps
    exceeding the ratio at the largest unsaturated eps by more than three
    standard errors.
    """
    vals = orbit_injectivity(x, t, samples, seed, search=search)
    eps = [float(e) for e in sorted(eps_grid)]
    frac = [float(np.mean(vals < e * e)) for e in eps]
    err = [math.sqrt(max(f * (1 - f), 1.0 / samples) / samples) for f in frac]
    sat = [e * e >= INJ_CAP for e in eps]
    live = [i for i in range(len(eps)) if not sat[i]]
    if not live:
        return RecurrenceProfile(eps, frac, err, sat, math.nan, False)
    ratios = [frac[i] / eps[i] for i in live]
    slope = max(ratios)
    lo, hi = live[0], live[-1]
    passed = ratios[0] <= ratios[-1] + 3 * (err[lo] / eps[lo] + err[hi] / eps[hi])
    passed &= all(frac[i] <= 1.0 for i in range(len(eps)))
    return RecurrenceProfile(eps, frac, err, sat, slope, bool(passed))


def identity_point(lat: Lattice) -> QuotientPoint:
    return QuotientPoint(lc.identity(lat.ambient), lat, True, 0.0)
