import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdensity import cli
from hdensity import equidist as eq
from hdensity import lattice_quotient as lq

from oracles import dyadic_max_mass

GAUSS = lq.Lattice.gaussian()
X0 = lq.identity_point(GAUSS)
GENERIC = cli.generic_point(GAUSS)


def bump(radius=4.0, seed=0):
    z = eq.sample_grid(GAUSS, 1, 0.005, seed=seed)[0]
    return eq.TestFunction(lq.QuotientPoint(z, GAUSS, True, 0.0), radius)


def test_constant_function_exact():
    f = eq.TestFunction(X0, 1.0, profile="constant", value=2.5)
    est = eq.horospherical_average(f, GENERIC, 3.0, samples=500)
    assert est.mean == 2.5 and est.error == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sp = eq.sparse_average(f, GENERIC, 3.0, eq.SparseMeasure.uniform_grid(8), samples=500)
    assert sp.mean == 2.5


def test_bump_is_nonnegative_and_bounded():
    f = bump()
    reps = eq.sample_grid(GAUSS, 300, 0.005, seed=3)
    v = f(reps)
    assert np.all(v >= 0)
    assert np.all(v <= f.norm * 1.0 + 1e-12)


def test_bump_peaks_at_centre():
    # small support: no other lattice translate of the centre reaches it
    f = bump(radius=0.5)
    assert f(f.center.rep[None])[0] == pytest.approx(f.norm * np.exp(-6.0), rel=1e-9)


def test_average_is_linear_in_family():
    f, g = bump(seed=0), bump(seed=1)
    a, b = eq.horospherical_average([f, g], GENERIC, 2.0, samples=2000)
    fa = eq.horospherical_average(f, GENERIC, 2.0, samples=2000)
    assert a.mean == fa.mean and a.error == fa.error
    assert b.mean >= 0


def test_deterministic_under_seed():
    f = bump()
    a = eq.horospherical_average(f, GENERIC, 2.0, samples=3000, seed=7)
    b = eq.horospherical_average(f, GENERIC, 2.0, samples=3000, seed=7)
    c = eq.horospherical_average(f, GENERIC, 2.0, samples=3000, seed=8)
    assert a == b
    assert a != c


def test_error_shrinks_with_samples():
    f = bump()
    small = eq.horospherical_average(f, GENERIC, 2.0, samples=2000)
    large = eq.horospherical_average(f, GENERIC, 2.0, samples=32000)
    assert large.error < 0.5 * small.error


def test_uniform_grid_agrees_with_horospherical():
    f = bump()
    rho = eq.SparseMeasure.uniform_grid(64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sp = eq.sparse_average(f, GENERIC, 1.0, rho, samples=512)
    hz = eq.horospherical_average(f, GENERIC, 1.0, samples=32768)
    assert abs(sp.mean - hz.mean) <= 4 * np.hypot(sp.error, hz.error) + 0.01 * f.norm


def test_window_warning():
    f = eq.TestFunction(X0, 1.0, profile="constant")
    rho = eq.SparseMeasure.uniform_grid(16)
    lo, hi = eq.window(rho.scale)
    with pytest.warns(UserWarning):
        eq.sparse_average(f, GENERIC, hi + 1.0, rho, samples=16)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        eq.sparse_average(f, GENERIC, 0.5 * (lo + hi), rho, samples=16)


def test_sparse_measure_validation():
    with pytest.raises(ValueError):
        eq.SparseMeasure(np.array([1.5]))
    with pytest.raises(ValueError):
        eq.SparseMeasure(np.array([0.1, 0.2]), np.array([0.5, 0.6]))


def test_regularity_uniform_passes_dirac_fails():
    assert eq.SparseMeasure.uniform_grid(32).verify()
    ok, interval, ratio = eq.rho_regularity_check(eq.SparseMeasure.dirac(0.3), 1.0, 1 / 32, 2.0)
    assert not ok
    assert interval[0] <= 0.3 < interval[1]
    assert ratio == pytest.approx(32.0)


@given(pts=st.lists(st.floats(0, 1, exclude_max=True), min_size=1, max_size=30),
       k=st.integers(0, 5))
@settings(max_examples=100, deadline=None)
def test_regularity_scan_matches_loop(pts, k):
    rho = eq.SparseMeasure(np.array(pts))
    L = 2.0**-k
    _, _, ratio = eq.rho_regularity_check(rho, 0.0, L)
    ref = max(dyadic_max_mass(pts, rho.weights, 2.0**-j) for j in range(k + 1))
    assert ratio == pytest.approx(ref, rel=1e-12)


def test_density_at_base_point_is_zero():
    rows = eq.density_scan(GENERIC, [10.0, 100.0], GENERIC.rep[None], samples=64)
    assert all(r.covering_radius <= 1e-12 for r in rows)


def test_density_scan_nonincreasing():
    Z = eq.sample_grid(GAUSS, 6, 0.005, seed=1)
    rows = eq.density_scan(GENERIC, [1e2, 1e3, 1e4], Z, samples=256)
    radii = [r.covering_radius for r in rows]
    assert all(b <= a for a, b in zip(radii, radii[1:]))
    assert [r.n_samples for r in rows] == [256, 512, 768]


def test_distance_to_orbit_zero_on_orbit():
    pts = lq.orbit_points(X0, 1.5, np.array([0.2, 0.7]))[0]
    assert np.all(eq.distance_to_orbit(pts, GAUSS) < 1e-9)
    assert eq.distance_to_orbit(GENERIC.rep[None], GAUSS)[0] > 1e-3


def test_decays_rule():
    rows = [eq.SweepRow(t, 0.1, d, 0.01) for t, d in zip((1, 2, 3), (0.5, 0.4, 0.3))]
    assert eq.decays(rows)
    rows[1] = eq.SweepRow(2, 0.1, 0.6, 0.01)
    assert not eq.decays(rows)
    flat = [eq.SweepRow(t, 0.1, d, 0.05) for t, d in zip((1, 2), (0.5, 0.45))]
    assert not eq.decays(flat)
