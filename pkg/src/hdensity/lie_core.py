"""Small-matrix kernel for the ambient groups SL2(C) and SL2(R) x SL2(R).

Group elements are numpy arrays of shape ``(..., k, 2, 2)`` with complex
dtype, where ``k = 1`` for SL2(C) and ``k = 2`` for the product group.  The
embedded copy of SL2(R) (called H) is the real subgroup in the first case and
the diagonal copy in the second.

Lie algebra vectors use coordinates ``(w11, w12, w21)`` of a traceless real
2x2 matrix ``[[w11, w12], [w21, -w11]]``.  A full algebra vector is a length 6
array ``(h11, h12, h21, r11, r12, r21)`` holding the H-part and the
transversal part.  Transversal-only vectors are length 3 arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np


class Ambient(str, Enum):
    SL2C = "SL2C"
    SL2RxSL2R = "SL2RxSL2R"

    @property
    def nfactors(self) -> int:
        return 1 if self is Ambient.SL2C else 2


class OutOfNeighborhood(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


BETA0 = 1e-2
NEIGHBORHOOD_RADIUS = 0.5
RESIDUAL_TOL = 1e-10

_EYE = np.eye(2, dtype=complex)


def sl2_matrix(c):
    """Traceless 2x2 matrix from (w11, w12, w21) coordinates."""
    c = np.asarray(c)
    out = np.empty(c.shape[:-1] + (2, 2), dtype=c.dtype)
    out[..., 0, 0] = c[..., 0]
    out[..., 0, 1] = c[..., 1]
    out[..., 1, 0] = c[..., 2]
    out[..., 1, 1] = -c[..., 0]
    return out


def sl2_coords(m):
    m = np.asarray(m)
    return np.stack([m[..., 0, 0], m[..., 0, 1], m[..., 1, 0]], axis=-1)


def lie_norm(w):
    """Coordinate max norm; works for 3-vectors and 6-vectors alike."""
    return np.max(np.abs(np.asarray(w)), axis=-1)


def max_norm(g):
    """Entrywise max norm of a group-shaped array (all factors)."""
    return np.max(np.abs(g), axis=(-3, -2, -1))


# --- closed-form exp/log for 2x2 traceless matrices ---------------------------------

def _cosh_sinhc(d):
    # cosh(sqrt d) and sinh(sqrt d)/sqrt d, both entire in d
    d = np.asarray(d, dtype=complex)
    small = np.abs(d) < 1e-3
    s = np.sqrt(np.where(small, 1.0, d))
    c_big = np.cosh(s)
    sc_big = np.sinh(s) / s
    c_small = 1 + d / 2 + d**2 / 24 + d**3 / 720 + d**4 / 40320
    sc_small = 1 + d / 6 + d**2 / 120 + d**3 / 5040 + d**4 / 362880
    return np.where(small, c_small, c_big), np.where(small, sc_small, sc_big)


def expm2(x):
    """exp of traceless 2x2 matrices (batched)."""
    x = np.asarray(x, dtype=complex)
    d = x[..., 0, 0] ** 2 + x[..., 0, 1] * x[..., 1, 0]
    c, sc = _cosh_sinhc(d)
    return c[..., None, None] * _EYE + sc[..., None, None] * x


def logm2(g):
    """Principal log of unimodular 2x2 matrices with positive real half-trace."""
    g = np.asarray(g, dtype=complex)
    half_tr = 0.5 * (g[..., 0, 0] + g[..., 1, 1])
    if np.any(half_tr.real <= 0):
        raise OutOfNeighborhood("logarithm requested far from the identity")
    p = g - half_tr[..., None, None] * _EYE
    sig2 = p[..., 0, 0] ** 2 + p[..., 0, 1] * p[..., 1, 0]
    small = np.abs(sig2) < 1e-3
    sig = np.sqrt(np.where(small, 1.0, sig2))
    ratio_big = np.arcsinh(sig) / sig
    ratio_small = (1 - sig2 / 6 + 3 * sig2**2 / 40 - 15 * sig2**3 / 336
                   + 105 * sig2**4 / 3456)
    ratio = np.where(small, ratio_small, ratio_big)
    return ratio[..., None, None] * p


def inv2(g):
    """Inverse of unimodular 2x2 matrices via the adjugate."""
    out = np.empty_like(g)
    out[..., 0, 0] = g[..., 1, 1]
    out[..., 1, 1] = g[..., 0, 0]
    out[..., 0, 1] = -g[..., 0, 1]
    out[..., 1, 0] = -g[..., 1, 0]
    return out


def det2(g):
    return g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]


# --- group elements ---------------------------------------------------------------

def identity(amb: Ambient, shape=()):
    return np.broadcast_to(_EYE, tuple(shape) + (amb.nfactors, 2, 2)).copy()


def embed_h(amb: Ambient, m):
    """Embed real 2x2 matrices of SL2(R) into G."""
    m = np.asarray(m, dtype=complex)[..., None, :, :]
    return np.repeat(m, amb.nfactors, axis=-3)


def h_matrix(amb: Ambient, g, tol=1e-9):
    """Return the real SL2(R) matrix of g if g lies in H, else None."""
    if amb is Ambient.SL2C:
        if np.max(np.abs(g[..., 0, :, :].imag)) > tol * max(1.0, np.max(np.abs(g))):
            return None
        return g[..., 0, :, :].real.copy()
    if np.max(np.abs(g[..., 0, :, :] - g[..., 1, :, :])) > tol * max(1.0, np.max(np.abs(g))):
        return None
    return g[..., 1, :, :].real.copy()


def a_matrix(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (2, 2))
    out[..., 0, 0] = np.exp(t / 2)
    out[..., 1, 1] = np.exp(-t / 2)
    return out


def u_matrix(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros(r.shape + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    out[..., 0, 1] = r
    return out


def um_matrix(s):
    """Lower unipotent [[1, 0], [s, 1]]."""
    s = np.asarray(s, dtype=float)
    out = np.zeros(s.shape + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    out[..., 1, 0] = s
    return out


def a_elem(amb: Ambient, t):
    return embed_h(amb, a_matrix(t))


def u_elem(amb: Ambient, r):
    return embed_h(amb, u_matrix(r))


def um_elem(amb: Ambient, s):
    return embed_h(amb, um_matrix(s))


def n_elem(amb: Ambient, r, s):
    """n(r, s) = u_r v_s."""
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    r, s = np.broadcast_arrays(r, s)
    g = identity(amb, r.shape)
    if amb is Ambient.SL2C:
        g[..., 0, 0, 1] = r + 1j * s
    else:
        g[..., 0, 0, 1] = r + s
        g[..., 1, 0, 1] = r
    return g


def v_elem(amb: Ambient, s):
    return n_elem(amb, 0.0, s)


# --- Lie algebra ------------------------------------------------------------------

def to_matrix(amb: Ambient, w):
    """Matrix realization of a 6-vector (H-part, transversal part)."""
    w = np.asarray(w, dtype=float)
    mh = sl2_matrix(w[..., :3])
    mr = sl2_matrix(w[..., 3:])
    if amb is Ambient.SL2C:
        return (mh + 1j * mr)[..., None, :, :]
    return np.stack([mh + mr, mh], axis=-3).astype(complex)


def from_matrix(amb: Ambient, x):
    x = np.asarray(x)
    if amb is Ambient.SL2C:
        m = x[..., 0, :, :]
        return np.concatenate([sl2_coords(m.real), sl2_coords(m.imag)], axis=-1)
    h = sl2_coords(x[..., 1, :, :].real)
    r = sl2_coords((x[..., 0, :, :] - x[..., 1, :, :]).real)
    return np.concatenate([h, r], axis=-1)


def r_vector(wr):
    """Lift a transversal 3-vector to a full 6-vector."""
    wr = np.asarray(wr, dtype=float)
    return np.concatenate([np.zeros_like(wr), wr], axis=-1)


def h_vector(wh):
    wh = np.asarray(wh, dtype=float)
    return np.concatenate([wh, np.zeros_like(wh)], axis=-1)


def exp_alg(amb: Ambient, w):
    return expm2(to_matrix(amb, w))


def exp_r(amb: Ambient, wr):
    return exp_alg(amb, r_vector(wr))


def log_group(amb: Ambient, g):
    return from_matrix(amb, logm2(g))


def adjoint(amb: Ambient, g, w):
    """Ad(g) w for full 6-vectors w."""
    x = to_matrix(amb, w)
    return from_matrix(amb, g @ x @ inv2(g))


def adjoint_h(m, c):
    """Ad of a real SL2(R) matrix on a single traceless 3-vector.

    H preserves both summands and acts on each one by the same conjugation,
    so this is the restriction of ``adjoint`` to either part.
    """
    x = sl2_matrix(np.asarray(c, dtype=float))
    return sl2_coords(m @ x @ inv2(m))


def xi(wr, r):
    """V-component of Ad(u_r) w for a transversal vector w."""
    wr = np.asarray(wr, dtype=float)
    r = np.asarray(r, dtype=float)
    return -wr[..., 2] * r**2 - 2 * wr[..., 0] * r + wr[..., 1]


# --- transversal decomposition ----------------------------------------------------

def _check_neighborhood(amb, g, radius):
    if radius is None:
        return
    dist = max_norm(g - _EYE)
    if np.any(dist > radius):
        raise OutOfNeighborhood(f"|g - I| = {np.max(dist):.3g} exceeds {radius}")


def splittable(amb: Ambient, g):
    """Mask of elements for which the closed-form transversal split is defined."""
    g = np.asarray(g, dtype=complex)
    if amb is Ambient.SL2C:
        m = inv2(np.conj(g[..., 0, :, :])) @ g[..., 0, :, :]
    else:
        m = inv2(g[..., 1, :, :]) @ g[..., 0, :, :]
    return 0.5 * (m[..., 0, 0] + m[..., 1, 1]).real > 0


def decompose_transversal(amb: Ambient, g, radius=NEIGHBORHOOD_RADIUS, check: bool = True):
    """Split g = h exp(w) with h in H (as a real 2x2 matrix) and w transversal.

    Pass ``radius=None`` to skip the neighborhood check; the formulas stay
    valid whenever g is close to H in the transversal direction.  With
    ``check=False`` the reconstruction residual is not tested.
    """
    g = np.asarray(g, dtype=complex)
    _check_neighborhood(amb, g, radius)
    if amb is Ambient.SL2C:
        g0 = g[..., 0, :, :]
        # conj(h exp(iX)) = h exp(-iX), hence conj(g)^-1 g = exp(2iX)
        lg = logm2(inv2(np.conj(g0)) @ g0)
        wr = 0.5 * sl2_coords(lg.imag)
        hm = g0 @ expm2(-1j * sl2_matrix(wr))
        h = hm.real
    else:
        g1 = g[..., 0, :, :]
        g2 = g[..., 1, :, :]
        wr = sl2_coords(logm2(inv2(g2) @ g1).real)
        h = g2.real
    if not check:
        return h, wr
    recon = embed_h(amb, h) @ exp_r(amb, wr)
    resid = max_norm(recon - g) / np.maximum(1.0, max_norm(g))
    if np.any(resid > RESIDUAL_TOL):
        raise NonConvergence(f"transversal split residual {np.max(resid):.3g}")
    return h, wr


def decompose_transversal_left(amb: Ambient, g):
    """Split g = exp(w) h with h in H; no neighborhood check."""
    g = np.asarray(g, dtype=complex)
    if amb is Ambient.SL2C:
        g0 = g[..., 0, :, :]
        lg = logm2(g0 @ inv2(np.conj(g0)))
        wr = 0.5 * sl2_coords(lg.imag)
        h = (expm2(-1j * sl2_matrix(wr)) @ g0).real
    else:
        g1 = g[..., 0, :, :]
        g2 = g[..., 1, :, :]
        wr = sl2_coords(logm2(g1 @ inv2(g2)).real)
        h = g2.real
    return h, wr


def bch_difference(amb: Ambient, w1, w2, beta0=BETA0):
    """Write exp(w1) exp(-w2) = h exp(w) for transversal w1, w2."""
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    if np.any(lie_norm(w1) > beta0) or np.any(lie_norm(w2) > beta0):
        raise OutOfNeighborhood("bch_difference inputs exceed beta0")
    g = exp_r(amb, w1) @ exp_r(amb, -w2)
    return decompose_transversal(amb, g)


# --- boxes ------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxParams:
    beta: float
    eta: float = 1.0
    t: float = 0.0
    m: float = 0.0
    transversal: float | None = None   # radius of the exp(B_r) factor; default 2*beta for QG, beta for BG


class Membership(NamedTuple):
    member: bool
    chart_singular: bool = False

    def __bool__(self):
        return bool(self.member)


def bruhat_coords(m):
    """(s, t, r) with m = u^-_s a_t u_r, or None when m[0,0] <= 0."""
    m = np.asarray(m, dtype=float)
    a = m[..., 0, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = m[..., 1, 0] / a
        t = 2 * np.log(a)
        r = m[..., 0, 1] / a
    return s, t, r, a > 0


def _le(x, bound):
    return np.abs(x) <= bound * (1 + 1e-12) + 1e-15


def _h_box(kind, s, t, r, box: BoxParams):
    if kind == "BH":
        return _le(s, box.beta) & _le(t, box.beta) & _le(r, box.beta)
    if kind == "QH":
        return (_le(s, box.beta * np.exp(-box.m)) & _le(t, box.beta)
                & _le(r, box.eta))
    if kind == "E":
        slack = box.beta * np.exp(-box.t)
        return (_le(s, box.beta) & _le(t - box.t, box.beta)
                & (r >= -slack * (1 + 1e-12) - 1e-15)
                & (r <= (box.eta + slack) * (1 + 1e-12) + 1e-15))
    raise ValueError(f"unknown box kind {kind!r}")


def box_membership(amb: Ambient, g, box: BoxParams, kind: str) -> Membership:
    """Membership of a single element g in one of the boxes BH, BG, E, QH, QG."""
    g = np.asarray(g, dtype=complex)
    if kind in ("BG", "QG"):
        try:
            hm, wr = decompose_transversal(amb, g)
        except (OutOfNeighborhood, NonConvergence):
            return Membership(False)
        rad = box.transversal
        if rad is None:
            rad = box.beta if kind == "BG" else 2 * box.beta
        if lie_norm(wr) > rad * (1 + 1e-12):
            return Membership(False)
        hkind = "BH" if kind == "BG" else "QH"
    else:
        hm = h_matrix(amb, g)
        if hm is None:
            return Membership(False)
        hkind = kind
    s, t, r, ok = bruhat_coords(hm)
    if not ok:
        return Membership(False, chart_singular=True)
    return Membership(bool(_h_box(hkind, s, t, r, box)))


def sample_box_h(rng, box: BoxParams, kind: str, size):
    """Uniform samples of H-boxes in Bruhat coordinates, as real matrices."""
    if kind == "BH":
        s, t, r = (rng.uniform(-box.beta, box.beta, size) for _ in range(3))
    elif kind == "QH":
        s = rng.uniform(-1, 1, size) * box.beta * np.exp(-box.m)
        t = rng.uniform(-box.beta, box.beta, size)
        r = rng.uniform(-box.eta, box.eta, size)
    else:
        raise ValueError(kind)
    return um_matrix(s) @ a_matrix(t) @ u_matrix(r)
