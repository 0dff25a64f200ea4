"""Independent reference computations used by the tests."""
from __future__ import annotations

import itertools

import mpmath as mp
import numpy as np
from scipy.linalg import expm, logm


def ad_coords(w, r, m):
    """Coordinates of Ad(a_m u_r) w for w = (w11, w12, w21), as mpmath numbers."""
    w11, w12, w21 = (mp.mpf(float(v)) for v in w)
    em = mp.e ** m
    return (w11 + w21 * r, em * (w12 - 2 * w11 * r - w21 * r * r), w21 / em)


def _kinks(w, m):
    """Points of [0, 1] where a coordinate vanishes or two moduli cross."""
    w11, w12, w21 = (mp.mpf(float(v)) for v in w)
    em = mp.e ** m
    # coordinates as polynomials in r (highest degree first)
    polys = [[w21, w11], [-em * w21, -2 * em * w11, em * w12], [w21 / em]]
    out = {mp.mpf(0), mp.mpf(1)}

    def roots(c):
        while c and c[0] == 0:
            c = c[1:]
        if len(c) < 2:
            return []
        return mp.polyroots(c, maxsteps=200, extraprec=200)

    for p in polys:
        out.update(roots(p))
    for p, q in itertools.combinations(polys, 2):
        n = max(len(p), len(q))
        p = [0] * (n - len(p)) + p
        q = [0] * (n - len(q)) + q
        for sgn in (1, -1):
            out.update(roots([a - sgn * b for a, b in zip(p, q)]))
    real = sorted(mp.re(x) for x in out if abs(mp.im(x)) < mp.mpf(10) ** (-20))
    return [x for x in real if 0 <= x <= 1]


def contraction_integral(w, alpha, m, dps=30):
    """int_0^1 |Ad(a_m u_r) w|^{-alpha} dr in the max-norm, by tanh-sinh between kinks."""
    with mp.workdps(dps):
        a = mp.mpf(alpha)

        def f(r):
            return max(abs(c) for c in ad_coords(w, r, m)) ** (-a)

        pts = _kinks(w, m)
        return float(mp.quad(f, pts))


def ratio(w, alpha, m):
    nrm = float(np.max(np.abs(w)))
    return contraction_integral(w, alpha, m) * nrm**alpha


# --- matrix functions -------------------------------------------------------------

def expm_ref(x):
    return expm(np.asarray(x, dtype=complex))


def logm_ref(g):
    return logm(np.asarray(g, dtype=complex))


# --- counting ---------------------------------------------------------------------

def ball_fraction_max(E, b):
    """max over points w of #{w' : |w' - w|_max <= b} / #E, by plain loops."""
    pts = [tuple(map(float, p)) for p in E]
    best = 0
    for p in pts:
        c = sum(1 for q in pts if max(abs(x - y) for x, y in zip(p, q)) <= b * (1 + 1e-12))
        best = max(best, c)
    return best / len(pts)


def dyadic_max_mass(points, weights, L):
    """Largest weight in a half-open dyadic interval [k L, (k+1) L) of [0, 1]."""
    n = int(round(1 / L))
    mass = [0.0] * n
    for s, wt in zip(points, weights):
        k = min(int(s // L), n - 1)
        mass[k] += wt
    return max(mass)


# --- word enumeration ---------------------------------------------------------------

def sl2z_ball_sizes(depth):
    """Sizes of word-length balls in SL2(Z) for S, T and inverses, by plain BFS."""

    def mul(a, b):
        return (a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3])

    gens = [(0, -1, 1, 0), (0, 1, -1, 0), (1, 1, 0, 1), (1, -1, 0, 1)]
    seen = {(1, 0, 0, 1)}
    frontier = list(seen)
    sizes = [1]
    for _ in range(depth):
        nxt = []
        for g in frontier:
            for s in gens:
                h = mul(g, s)
                if h not in seen:
                    seen.add(h)
                    nxt.append(h)
        frontier = nxt
        sizes.append(len(seen))
    return sizes
