import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hdensity import lattice_quotient as lq
from hdensity import lie_core as lc

from oracles import sl2z_ball_sizes

GAUSS = lq.Lattice.gaussian()
PAIR = lq.Lattice.sl2z_pair()
vec6 = arrays(float, 6, elements=st.floats(-2, 2, allow_nan=False, allow_subnormal=False))


def test_word_length_zero_is_identity():
    c = lq.enumerate_lattice(lq.Lattice.sl2z(), 0)
    assert len(c) == 1
    assert tuple(c.elements[0]) == lq.exact_identity(lq.Variant.SL2Z)


def test_sl2z_word_length_one():
    c = lq.enumerate_lattice(lq.Lattice.sl2z(), 1)
    mats = {tuple(np.round(m[0].real).astype(int).ravel()) for m in c.mats}
    assert mats == {(1, 0, 0, 1), (0, -1, 1, 0), (0, 1, -1, 0), (1, 1, 0, 1), (1, -1, 0, 1)}


def test_ball_sizes_match_plain_bfs():
    sizes = [len(lq.enumerate_lattice(lq.Lattice.sl2z(), d)) for d in range(6)]
    assert sizes == sl2z_ball_sizes(5)


def test_gaussian_ball_sizes_fixture():
    sizes = [len(lq.enumerate_lattice(GAUSS, d)) for d in range(4)]
    assert sizes == [1, 9, 44, 160]
    assert sizes == sorted(sizes)


def test_word_length_cap():
    with pytest.raises(lq.CapExceeded):
        lq.enumerate_lattice(GAUSS, lq.WORD_LENGTH_CAP + 1)


def test_cache_roundtrip(tmp_path, monkeypatch):
    monkeypatch.setenv(lq.CACHE_ENV, str(tmp_path))
    monkeypatch.setattr(lq, "_memory_caches", {})
    a = lq.load_cache(GAUSS, 2)
    path = lq.cache_path(GAUSS, 2)
    first = path.read_bytes()
    monkeypatch.setattr(lq, "_memory_caches", {})
    b = lq.load_cache(GAUSS, 2)
    assert path.read_bytes() == first
    assert np.array_equal(a.elements, b.elements)
    assert np.array_equal(a.lengths, b.lengths)


def test_identity_reduces_to_itself():
    x = lq.reduce_point(lc.identity(GAUSS.ambient), GAUSS)
    assert x.reduced
    assert np.allclose(x.rep, lc.identity(GAUSS.ambient))


@given(w=vec6)
@settings(max_examples=60, deadline=None)
def test_reduction_is_gamma_invariant(w):
    g = lc.exp_alg(GAUSS.ambient, w)
    T = lq.to_float(GAUSS.variant, np.array([GAUSS.generators[0]]))[0]
    a = lq.reduce_point(g, GAUSS)
    b = lq.reduce_point(g @ T, GAUSS)
    assert lq.distance_X(a, b) <= 1e-10


@pytest.mark.parametrize("lat", [GAUSS, PAIR])
def test_reduced_points_satisfy_domain(lat):
    rng = np.random.default_rng(5)
    w = rng.normal(size=(200, 6)) * 3
    reps, ok, _ = lq.reduce_batch(lat, lc.exp_alg(lat.ambient, w))
    assert ok.all()
    assert lq.domain_check(lat, reps).all()


def test_identity_injectivity_is_capped():
    assert lq.injectivity_radius(lq.identity_point(GAUSS)) == lq.INJ_CAP


def test_injectivity_decreases_into_cusp():
    vals = [lq.injectivity_radius(lq.reduce_point(lc.a_elem(GAUSS.ambient, t), GAUSS), raw=True)
            for t in (2.0, 4.0, 6.0, 8.0, 10.0)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


@given(w=vec6)
@settings(max_examples=40, deadline=None)
def test_injectivity_and_omega_bounds(w):
    x = lq.reduce_point(lc.exp_alg(GAUSS.ambient, w), GAUSS)
    assert 0 < lq.injectivity_radius(x) <= lq.INJ_CAP
    assert lq.omega(x) >= 2.0


def test_omega_grows_into_cusp():
    om = [lq.omega(lq.reduce_point(lc.a_elem(GAUSS.ambient, t), GAUSS)) for t in (4.0, 6.0, 8.0)]
    ratios = [om[1] / om[0], om[2] / om[1]]
    assert np.allclose(ratios, np.exp(2.0), rtol=1e-6)


def test_height_fit_irreducible():
    fit = lq.omega_injectivity_fit(lq.Lattice.zsqrt2())
    assert 0.8 <= fit.slope <= 1.2
    assert fit.correlation >= 0.9
    assert np.isfinite(fit.constant)


def test_distance_axioms():
    rng = np.random.default_rng(3)
    reps, _, _ = lq.reduce_batch(GAUSS, lc.exp_alg(GAUSS.ambient, rng.normal(size=(30, 6)) * 0.4))
    cache = lq.neighbor_cache(GAUSS)
    D = lq.distance_matrix(reps, reps, cache)
    assert np.allclose(np.diag(D), 0.0, atol=1e-12)
    assert np.max(np.abs(D - D.T)) <= 1e-12
    # triangle inequality over all triples of the sample
    assert np.all(D[:, None, :] <= D[:, :, None] + D[None, :, :] + 1e-12)


def test_near_stabilizer_identity_coset():
    x = lq.identity_point(GAUSS)
    hits = lq.near_stabilizer_search(x, 1e-8, lq.search_cache(GAUSS))
    central = lq.central_elements(GAUSS.variant)
    assert hits and all(h[0] not in central for h in hits)
    assert lq.noncommuting_pair(GAUSS.variant, hits)
    assert lq.periodic_flag(x)


def test_near_stabilizer_generic_empty():
    g = lc.exp_alg(GAUSS.ambient, np.array([np.pi / 10, np.e / 7, -np.sqrt(2) / 9,
                                            np.sqrt(3) / 11, -np.log(2) / 13, 1 / np.pi]))
    x = lq.reduce_point(g, GAUSS)
    assert lq.near_stabilizer_search(x, 1e-8, lq.load_cache(GAUSS, 4)) == []


def test_recurrence_fraction_monotone_in_eps():
    x = lq.identity_point(GAUSS)
    f = [lq.recurrence_fraction(x, 6.0, (0, 1), e, samples=2000) for e in (0.02, 0.05, 0.08)]
    assert f[0] <= f[1] <= f[2]


def test_recurrence_profile_shape():
    prof = lq.recurrence_profile(lq.identity_point(GAUSS), 8.0, samples=4000)
    assert prof.saturated == [False, False, True, True]
    assert prof.fractions[2] == prof.fractions[3] == 1.0
    assert prof.passed
