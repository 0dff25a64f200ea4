"""The ten acceptance criteria at their stated tolerances and time limits.

Each test prints one PASS/FAIL line in the terminal summary (see conftest.py).
Criteria 3 to 9 go through the command-line driver and read its artifacts.
"""
import json
import math
import time

import numpy as np
import pytest

from hdensity import cli
from hdensity import lie_core as lc
from hdensity import margulis as mg
from hdensity import projection as pj

AMBIENTS = [lc.Ambient.SL2C, lc.Ambient.SL2RxSL2R]
N = 10_000


def run_cli(sub, out, config=None, tmp=None):
    args = [sub, "--out", str(out)]
    if config:
        path = (tmp or out.parent) / f"{sub}.cfg"
        path.write_text("\n".join(f"{k} = {v}" for k, v in config.items()) + "\n")
        args += ["--config", str(path)]
    t0 = time.perf_counter()
    code = cli.main(args)
    return code, time.perf_counter() - t0


def records(out, sub):
    lines = (out / f"{sub}.jsonl").read_text().splitlines()
    return [json.loads(x) for x in lines[1:]]


def tail(path):
    return path.read_bytes().split(b"\n", 1)[1]


@pytest.mark.criterion(1, "algebraic kernel")
def test_algebraic_kernel(record_property):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {"det": 0.0, "hom": 0.0, "split": 0.0, "xi": 0.0}
    for amb in AMBIENTS:
        a, b, w = (rng.uniform(-0.5, 0.5, (N, 6)) for _ in range(3))
        g, h = lc.exp_alg(amb, a), lc.exp_alg(amb, b)
        worst["det"] = max(worst["det"], float(np.max(np.abs(lc.det2(g) - 1))))
        lhs = lc.adjoint(amb, g @ h, w)
        rhs = lc.adjoint(amb, g, lc.adjoint(amb, h, w))
        rel = np.max(np.abs(lhs - rhs), axis=1) / np.maximum(1.0, np.max(np.abs(lhs), axis=1))
        worst["hom"] = max(worst["hom"], float(rel.max()))
        m = lc.expm2(lc.sl2_matrix(rng.uniform(-0.5, 0.5, (N, 3)))).real
        hm = lc.embed_h(amb, m)
        wh = np.concatenate([w[:, :3], np.zeros((N, 3))], axis=1)
        wr = np.concatenate([np.zeros((N, 3)), w[:, 3:]], axis=1)
        leak = max(np.max(np.abs(lc.adjoint(amb, hm, wh)[:, 3:])),
                   np.max(np.abs(lc.adjoint(amb, hm, wr)[:, :3])))
        worst["split"] = max(worst["split"], float(leak))
    W = rng.uniform(-1, 1, (N, 3))
    r = rng.uniform(-1, 1, N)
    ad12 = lc.adjoint_h(lc.u_matrix(r), W)[:, 1]
    poly = -W[:, 2] * r**2 - 2 * W[:, 0] * r + W[:, 1]
    worst["xi"] = float(np.max(np.abs(ad12 - poly)))
    elapsed = time.perf_counter() - t0
    record_property("detail", " ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert all(v <= 1e-12 for v in worst.values()), worst
    assert elapsed < 5.0


@pytest.mark.criterion(2, "transversal difference bounds")
def test_difference_bounds(record_property):
    rng = np.random.default_rng(202)
    beta = 1e-3
    t0 = time.perf_counter()
    violations, resid = 0, 0.0
    for amb in AMBIENTS:
        w1 = rng.uniform(-beta, beta, (N, 3))
        w2 = rng.uniform(-beta, beta, (N, 3))
        h, w = lc.bch_difference(amb, w1, w2)
        d = lc.lie_norm(w1 - w2)
        n = lc.lie_norm(w)
        violations += int(np.sum(0.5 * d > n) + np.sum(n > 2 * d))
        g = lc.exp_r(amb, w1) @ lc.exp_r(amb, -w2)
        recon = lc.embed_h(amb, h) @ lc.exp_r(amb, w)
        resid = max(resid, float(np.max(lc.max_norm(recon - g))))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"violations={violations} residual={resid:.1e}")
    assert violations == 0
    assert resid <= 1e-10
    assert elapsed < 30.0


@pytest.mark.criterion(3, "contraction and m_alpha")
def test_contraction(tmp_path, record_property):
    total, parts = 0.0, []
    for alpha in (0.5, 0.75, 0.9):
        out = tmp_path / f"a{alpha}"
        code, dt = run_cli("contraction", out, {"alpha": alpha, "checks": 1000})
        total += dt
        rec = records(out, "contraction")[0]
        parts.append(f"m({alpha})={rec['m_alpha']} max={rec['max_ratio']:.3f}")
        assert code == 0
        assert rec["checks"] == 1000 and rec["m_alpha"] <= mg.M_CAP
        assert rec["max_ratio"] <= math.exp(-1) * (1 + 1e-6)
    record_property("detail", " ".join(parts))
    assert total < 300


@pytest.mark.criterion(4, "dyadic regularization")
def test_regularization(tmp_path, record_property):
    code, dt = run_cli("regularize", tmp_path / "o", {"alpha": 0.6, "eps": 0.02})
    recs = records(tmp_path / "o", "regularize")
    record_property("detail", " ".join(f"{r['set']}:b1={r['b1']:.3g}" for r in recs))
    assert code == 0
    assert [r["set"] for r in recs] == ["grid", "segment", "cantor"]
    for r in recs:
        lo, hi = r["b1_bounds"]
        assert r["points"] <= 4096
        assert lo <= r["b1"] <= hi
        assert r["recount_ok"]
        assert r["certificate_exponent"] == pytest.approx(0.6 - 20 * 0.02)
    assert dt < 120


@pytest.mark.criterion(5, "projection theorem")
def test_projection(tmp_path, record_property):
    code, dt = run_cli("projection-verify", tmp_path / "o", {"kappa": 0.05})
    rec = records(tmp_path / "o", "projection-verify")[0]
    record_property("detail", f"dirs={rec['good_direction_fraction']:.3f} "
                              f"points={rec['good_point_fraction_min']:.3f} C={rec['fitted_C']:.4f}")
    assert code == 0
    assert rec["exponent"] == pytest.approx(pj.CANTOR_EXPONENT - 7 * 0.05)
    assert rec["good_direction_fraction"] >= 0.9 and rec["good_point_fraction_min"] >= 0.9
    assert math.isfinite(rec["fitted_C"]) and rec["fitted_C"] <= 2 * cli.K.C_KAPPA_FIXTURE
    assert rec["recheck"]
    assert dt < 600


@pytest.mark.criterion(6, "Margulis inequality")
def test_margulis(tmp_path, record_property):
    code, dt = run_cli("margulis", tmp_path / "o",
                       {"alpha": 0.5, "sheets": 16, "samples": 100_000, "ell": "1, 2, 3"})
    recs = records(tmp_path / "o", "margulis")
    record_property("detail", " ".join(f"l={r['ell']}:C={r['c13_fit']:.2g},err={r['rel_err']:.3f}"
                                       for r in recs))
    assert code == 0
    assert [r["ell"] for r in recs] == [1, 2, 3]
    assert all(r["samples"] == 100_000 and r["rel_err"] <= 0.05 and r["passed"] for r in recs)
    assert dt < 300


@pytest.mark.criterion(7, "recurrence")
def test_recurrence(tmp_path, record_property):
    code, dt = run_cli("recurrence", tmp_path / "o", {"t": 12, "eps_grid": "0.02, 0.05, 0.1, 0.2"})
    rec = records(tmp_path / "o", "recurrence")[0]
    record_property("detail", "fractions=" + ",".join(f"{f:.3f}" for f in rec["fractions"])
                    + f" slope={rec['slope']:.2f}")
    assert code == 0
    for e, f, sat in zip(rec["eps"], rec["fractions"], rec["saturated"]):
        if not sat:
            assert f <= rec["slope"] * e * (1 + 1e-12)
    assert rec["passed"]
    assert dt < 300


@pytest.mark.criterion(8, "density dichotomy")
def test_density(tmp_path, record_property):
    code, dt = run_cli("density", tmp_path / "o", {"T_grid": "100, 1000, 10000"})
    rec = records(tmp_path / "o", "density")[0]
    record_property("detail", "generic=" + ",".join(f"{r:.3f}" for r in rec["generic_radii"])
                    + " periodic=" + ",".join(f"{r:.3f}" for r in rec["periodic_radii"]))
    assert code == 0
    g = rec["generic_radii"]
    assert g[0] > g[1] > g[2]
    assert rec["stagnant"] and rec["periodic_cloud_gap"] <= 1e-3
    assert rec["near_stabilizer"] and not rec["generic_near_stabilizer"]
    assert dt < 900


@pytest.mark.criterion(9, "sparse equidistribution")
def test_equidistribution(tmp_path, record_property):
    out = tmp_path / "o"
    code, dt = run_cli("equidist", out)
    rec = records(out, "equidist")[0]

    def column(name):
        rows = (out / name).read_text().splitlines()[2:]
        return [float(r.split(",")[2]) for r in rows]

    sweep, control = column("equidist_sweep.csv"), column("equidist_control.csv")
    record_property("detail", "pipeline=" + ",".join(f"{d:.3f}" for d in sweep)
                    + " dirac=" + ",".join(f"{d:.3f}" for d in control))
    assert code == 0
    assert rec["pipeline_decays"] and not rec["control_decays"]
    assert all(b < a for a, b in zip(sweep, sweep[1:]))
    assert not rec["dirac_regular"]
    assert dt < 600


REPEATS = [
    ("contraction", {"alpha": 0.5}),
    ("regularize", None),
    ("projection-verify", None),
    ("pipeline", None),
    ("bootstrap", None),
    ("margulis", {"samples": 20_000}),
    ("recurrence", None),
    ("equidist", {"samples": 512}),
    ("density", None),
    ("periodic-f", None),
]


@pytest.mark.criterion(10, "determinism")
def test_determinism(tmp_path, record_property):
    compared = 0
    for sub, config in REPEATS:
        outs = []
        for k in range(2):
            out = tmp_path / f"{sub}-{k}"
            run_cli(sub, out, config, tmp=tmp_path)
            outs.append(out)
        names = sorted(p.name for p in outs[0].iterdir())
        assert names == sorted(p.name for p in outs[1].iterdir())
        for name in names:
            assert tail(outs[0] / name) == tail(outs[1] / name), f"{sub}/{name}"
            compared += 1
    record_property("detail", f"{compared} artifacts byte-identical")
