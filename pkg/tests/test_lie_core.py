import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hdensity import lie_core as lc

from oracles import expm_ref, logm_ref

AMBIENTS = [lc.Ambient.SL2C, lc.Ambient.SL2RxSL2R]
finite = st.floats(-1.0, 1.0, allow_nan=False, allow_subnormal=False)
vec6 = arrays(float, 6, elements=finite)
vec3 = arrays(float, 3, elements=finite)


@pytest.mark.parametrize("amb", AMBIENTS)
@given(w=vec6)
@settings(max_examples=200, deadline=None)
def test_exp_matches_scipy(amb, w):
    x = lc.to_matrix(amb, w)
    g = lc.expm2(x)
    for k in range(amb.nfactors):
        assert np.allclose(g[k], expm_ref(x[k]), atol=1e-12, rtol=1e-12)


@pytest.mark.parametrize("amb", AMBIENTS)
@given(w=vec6)
@settings(max_examples=200, deadline=None)
def test_log_inverts_exp(amb, w):
    g = lc.exp_alg(amb, 0.5 * w)
    assert np.allclose(lc.log_group(amb, g), 0.5 * w, atol=1e-12)
    x = lc.logm2(g)
    for k in range(amb.nfactors):
        assert np.allclose(x[k], logm_ref(g[k]), atol=1e-10)


def test_log_far_from_identity_raises():
    g = np.array([[[-2.0, 0.0], [0.0, -0.5]]], dtype=complex)
    with pytest.raises(lc.OutOfNeighborhood):
        lc.logm2(g)


@pytest.mark.parametrize("amb", AMBIENTS)
@given(w=vec6)
@settings(max_examples=100, deadline=None)
def test_det_one(amb, w):
    g = lc.exp_alg(amb, 2 * w)
    assert np.allclose(lc.det2(g), 1.0, atol=1e-12)


@pytest.mark.parametrize("amb", AMBIENTS)
@given(a=vec6, b=vec6, w=vec6)
@settings(max_examples=100, deadline=None)
def test_adjoint_is_homomorphism(amb, a, b, w):
    g = lc.exp_alg(amb, a)
    h = lc.exp_alg(amb, b)
    lhs = lc.adjoint(amb, g @ h, w)
    rhs = lc.adjoint(amb, g, lc.adjoint(amb, h, w))
    assert np.allclose(lhs, rhs, atol=1e-11)


@pytest.mark.parametrize("amb", AMBIENTS)
@given(c=vec3, w=vec6)
@settings(max_examples=100, deadline=None)
def test_h_preserves_split(amb, c, w):
    m = lc.expm2(lc.sl2_matrix(c)).real
    out = lc.adjoint(amb, lc.embed_h(amb, m), w)
    assert np.allclose(out[:3], lc.adjoint_h(m, w[:3]), atol=1e-12)
    assert np.allclose(out[3:], lc.adjoint_h(m, w[3:]), atol=1e-12)


@given(w=vec3, r=st.floats(-2, 2))
def test_xi_is_adjoint_entry(w, r):
    ad = lc.adjoint_h(lc.u_matrix(r), w)
    assert abs(ad[1] - lc.xi(w, r)) <= 1e-12 * max(1.0, abs(ad[1]))


def test_xi_spot_values():
    assert lc.xi(np.array([0.0, 1.0, 0.0]), 0.7) == 1.0
    assert lc.xi(np.array([1.0, 0.0, 0.0]), 0.5) == -1.0
    assert lc.xi(np.array([0.0, 0.0, 1.0]), 2.0) == -4.0


@pytest.mark.parametrize("amb", AMBIENTS)
@given(h=vec3, w=vec3)
@settings(max_examples=200, deadline=None)
def test_decomposition_reconstructs(amb, h, w):
    m = lc.expm2(lc.sl2_matrix(0.2 * h)).real
    g = lc.embed_h(amb, m) @ lc.exp_r(amb, 0.1 * w)
    hm, wr = lc.decompose_transversal(amb, g)
    assert np.allclose(hm, m, atol=1e-12)
    assert np.allclose(wr, 0.1 * w, atol=1e-12)


def test_decomposition_out_of_neighborhood():
    g = lc.a_elem(lc.Ambient.SL2C, 4.0)
    with pytest.raises(lc.OutOfNeighborhood):
        lc.decompose_transversal(lc.Ambient.SL2C, g)


@pytest.mark.parametrize("amb", AMBIENTS)
@given(w1=vec3, w2=vec3)
@settings(max_examples=200, deadline=None)
def test_bch_difference_comparable(amb, w1, w2):
    beta = 1e-3
    w1, w2 = beta * w1, beta * w2
    d = lc.lie_norm(w1 - w2)
    _, w = lc.bch_difference(amb, w1, w2)
    n = lc.lie_norm(w)
    # absolute slack at roundoff level for w1 close to w2
    assert 0.5 * d <= n * (1 + 1e-9) + 1e-15
    assert n <= 2 * d * (1 + 1e-9) + 1e-15


def test_bch_difference_rejects_large_inputs():
    with pytest.raises(lc.OutOfNeighborhood):
        lc.bch_difference(lc.Ambient.SL2C, np.array([0.1, 0, 0]), np.zeros(3))


@given(s=st.floats(-1, 1), t=st.floats(-3, 3), r=st.floats(-1, 1))
def test_bruhat_roundtrip(s, t, r):
    m = lc.um_matrix(s) @ lc.a_matrix(t) @ lc.u_matrix(r)
    s2, t2, r2, ok = lc.bruhat_coords(m)
    assert ok
    assert np.allclose([s2, t2, r2], [s, t, r], atol=1e-10)


def test_box_membership_examples():
    amb = lc.Ambient.SL2C
    box = lc.BoxParams(beta=0.01)
    assert lc.box_membership(amb, lc.identity(amb), box, "BG")
    assert not lc.box_membership(amb, lc.exp_r(amb, np.array([0.0, 0.02, 0.0])), box, "BG")
    assert lc.box_membership(amb, lc.exp_r(amb, np.array([0.0, 0.02, 0.0])), box, "QG")
    flip = lc.embed_h(amb, np.array([[0.0, 1.0], [-1.0, 0.0]]))
    res = lc.box_membership(amb, flip, box, "BH")
    assert not res and res.chart_singular
