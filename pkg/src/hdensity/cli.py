"""Experiment driver.

Usage::

    hdensity <subcommand> [--config FILE] [--seed N] [--out DIR] [--threads N]

The config file is flat ``key = value`` text; ``#`` starts a comment and list
values are comma separated.  Keys not listed in ``SCHEMA`` are rejected.  The
lattice cache directory can be moved with the ``HDENSITY_CACHE_DIR``
environment variable.

Every subcommand writes ``<subcommand>.jsonl`` to the output directory and,
where a table is natural, CSV files.  The first line of every artifact carries
the timestamp and nothing else varies between runs with the same config and
seed.  The exit status is 0 when every checked invariant holds, 1 when one
fails, 2 for usage or config errors and 3 when a module raises.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import io
import json
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import constants as K
from . import equidist as eq
from . import lattice_quotient as lq
from . import lie_core as lc
from . import margulis as mg
from . import projection as pj
from . import rng as rng_mod
from .rng import stream

VERSION = "0.1.0"


class ConfigInvalid(ValueError):
    pass


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _strs(text):
    return [v.strip() for v in text.split(",") if v.strip()]


# key -> (parser, description)
SCHEMA = {
    "lattice": (str, "lattice name, e.g. SL2_GaussianIntegers"),
    "seed": (int, "root seed of every random stream"),
    "alpha": (float, "dimension exponent"),
    "eps": (float, "loss exponent epsilon"),
    "kappa": (float, "projection exponent loss"),
    "beta": (float, "sheet-set transversal scale"),
    "samples": (int, "Monte Carlo sample count"),
    "checks": (int, "fresh random directions per contraction check"),
    "t": (float, "flow time"),
    "ell": (_floats, "walk depths (margulis)"),
    "m": (float, "walk step length; defaults to m_alpha"),
    "sheets": (int, "sheet count for the Margulis check"),
    "sets": (_strs, "synthetic sets: grid, segment, cantor"),
    "levels": (int, "Cantor construction depth"),
    "directions": (int, "size of the direction grid"),
    "eps_grid": (_floats, "recurrence thresholds"),
    "t_grid": (_floats, "flow times of the discrepancy sweep"),
    "T_grid": (_floats, "P-ball radii of the density scan"),
    "test_points": (int, "size of the test grid"),
    "radius": (float, "test-function radius"),
    "cap": (int, "upper limit for m_alpha"),
    "depth": (int, "lattice cache depth for the periodic-orbit count"),
}


@dataclass
class ExperimentConfig:
    lattice: str = lq.Variant.GAUSS.value
    seed: int = 0
    alpha: float | None = None
    eps: float | None = None
    kappa: float | None = None
    beta: float | None = None
    samples: int | None = None
    checks: int | None = None
    t: float | None = None
    ell: list | None = None
    m: float | None = None
    sheets: int | None = None
    sets: list | None = None
    levels: int | None = None
    directions: int | None = None
    eps_grid: list | None = None
    t_grid: list | None = None
    T_grid: list | None = None
    test_points: int | None = None
    radius: float | None = None
    cap: int | None = None
    depth: int | None = None

    def get(self, key, default):
        v = getattr(self, key)
        return default if v is None else v

    def to_dict(self):
        return dataclasses.asdict(self)


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigInvalid(f"line {n}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key][0](val)
        except ValueError as exc:
            raise ConfigInvalid(f"line {n}: bad value for {key}: {exc}") from None
    cfg = ExperimentConfig(**values)
    try:
        lq.Lattice.by_name(cfg.lattice)
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config: {exc}") from None
    return parse_config(text)


# --- artifacts ------------------------------------------------------------------------

def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) else v
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    return v


def header_line(subcommand, cfg):
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return json.dumps({"timestamp": stamp, "subcommand": subcommand, "version": VERSION,
                       "config": _clean(cfg.to_dict())})


def csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


@dataclass
class Outcome:
    records: list
    tables: dict            # file name -> CSV text
    passed: bool


def write_artifacts(out: Path, subcommand, cfg, outcome: Outcome):
    out.mkdir(parents=True, exist_ok=True)
    head = header_line(subcommand, cfg)
    body = "\n".join(json.dumps(_clean(r)) for r in outcome.records)
    (out / f"{subcommand}.jsonl").write_text(head + "\n" + body + "\n")
    stamp = json.loads(head)["timestamp"]
    for name, text in outcome.tables.items():
        (out / name).write_text(f"# timestamp={stamp}\n" + text)


# --- fixtures -------------------------------------------------------------------------

def generic_point(lat):
    g = lc.exp_alg(lat.ambient, np.array(K.GENERIC_POINT))
    return lq.reduce_point(g, lat)


def _lattice(cfg):
    return lq.Lattice.by_name(cfg.lattice)


# --- subcommands ----------------------------------------------------------------------

def run_contraction(cfg: ExperimentConfig) -> Outcome:
    alpha = cfg.get("alpha", 0.5)
    m = mg.solve_m_alpha(alpha, cfg.get("samples", 128), cfg.seed, cfg.get("cap", mg.M_CAP))
    W = mg.random_unit(stream(cfg.seed, "fresh-directions", alpha), cfg.get("checks", 1000))
    res = [mg.contraction_check(w, alpha, m) for w in W]
    ratios = np.array([r.ratio for r in res])
    limit = mg.TARGET * (1 + mg.TARGET_SLACK)
    bound_ok = all(r.passed for r in res)
    passed = bool(np.max(ratios) <= limit and bound_ok)
    rec = {"alpha": alpha, "m_alpha": m, "checks": len(res), "max_ratio": float(np.max(ratios)),
           "target": mg.TARGET, "c5": K.C5, "bound_holds": bound_ok, "passed": passed}
    return Outcome([rec], {}, passed)


def run_regularize(cfg: ExperimentConfig) -> Outcome:
    alpha, eps = cfg.get("alpha", 0.6), cfg.get("eps", 0.02)
    records = []
    passed = True
    for kind in cfg.get("sets", ["grid", "segment", "cantor"]):
        F = pj.synthetic_set(kind, cfg.get("levels", 4))
        reg = pj.dyadic_regularize(F, alpha, eps)
        lo, hi = pj.b1_bounds(len(F), alpha, eps)
        inside = lo <= reg.b1 <= hi
        recount = reg.certificate.verify()
        ok = bool(inside and recount and reg.C_prime <= 2 * K.C_PRIME_FIXTURE)
        passed &= ok
        records.append({"set": kind, "points": len(F), "alpha": alpha, "eps": eps, "b1": reg.b1,
                        "b1_bounds": [lo, hi], "k1": reg.k1, "k2": reg.k2, "k2_raw": reg.k2_raw,
                        "kept": len(reg.F_prime), "certificate_exponent": alpha - 20 * eps,
                        "certificate_C": reg.C_prime, "recount_ok": recount, "passed": ok})
    return Outcome(records, {}, bool(passed))


def cantor_measure(levels=4):
    E = pj.synthetic_set("cantor", levels) - 0.5
    return pj.PointSetMeasure(E, 3.0 ** -levels, 0.5, pj.CANTOR_EXPONENT)


def run_projection_verify(cfg: ExperimentConfig) -> Outcome:
    kappa = cfg.get("kappa", 0.05)
    meas = cantor_measure(cfg.get("levels", 4))
    meas.certify()
    rep = pj.verify_projection_theorem(meas, kappa, n_directions=cfg.get("directions", 64),
                                       seed=cfg.seed)
    recheck = pj.recheck_report(meas, rep)
    ok = bool(rep.passed and recheck and math.isfinite(rep.fitted_C)
              and rep.fitted_C <= 2 * K.C_KAPPA_FIXTURE)
    rec = json.loads(rep.to_json())
    rec.update({"exponent": rep.exponent, "upsilon": meas.upsilon, "collision": rep.collision,
                "recheck": recheck, "passed": ok})
    return Outcome([rec], {}, ok)


def _pipeline(cfg, x1=None):
    alpha, eps = cfg.get("alpha", 0.6), cfg.get("eps", 0.02)
    lat = _lattice(cfg)
    x1 = x1 or generic_point(lat)
    F = pj.synthetic_set("cantor", cfg.get("levels", 4))
    return pj.project_pipeline(F, x1, alpha, eps, seed=cfg.seed)


def run_pipeline(cfg: ExperimentConfig) -> Outcome:
    res = _pipeline(cfg)
    r = res.report
    alpha, eps = r["alpha"], r["eps"]
    rho = eq.SparseMeasure(res.I, res.rho)
    reg_ok, worst, ratio = eq.rho_regularity_check(rho, alpha - 30 * eps, r["interval_floor"],
                                                   K.PIPELINE_REGULARITY_FIXTURE)
    ok = bool(r["in_unit_interval"] and reg_ok
              and r["membership_C"] <= 2 * K.PIPELINE_MEMBERSHIP_FIXTURE)
    rec = dict(r)
    rec.update({"regularity_pass": reg_ok, "worst_interval": worst, "worst_ratio": ratio,
                "passed": ok})
    table = csv_text(["s", "weight"], zip(res.I, res.rho))
    return Outcome([rec], {"pipeline_measure.csv": table}, ok)


def run_bootstrap(cfg: ExperimentConfig) -> Outcome:
    lat = _lattice(cfg)
    alpha, eps = cfg.get("alpha", 0.5), cfg.get("eps", 0.5)
    t = cfg.get("t", 4.0)
    conf = mg.BootstrapConfig(beta=cfg.get("beta", 1e-6))
    records = []
    passed = True
    for name, x0 in (("generic", generic_point(lat)), ("periodic", lq.identity_point(lat))):
        E, trace = mg.bootstrap_run(x0, t, alpha, eps, conf, cfg.seed)
        bounds = [r.max_f for r in trace if not math.isnan(r.max_f)]
        monotone = all(b2 <= b1 * (1 + 1e-12) for b1, b2 in zip(bounds, bounds[1:]))
        branch_ok = (trace[0].branch == "periodic") == (name == "periodic")
        passed &= bool(monotone and branch_ok)
        for r in trace:
            d = json.loads(r.to_json())
            d["point"] = name
            records.append(d)
        records.append({"point": name, "sheets": None if E is None else E.size,
                        "energy_C": None if E is None else mg.energy_constant(E, alpha, eps),
                        "bound_nonincreasing": monotone, "branch_ok": branch_ok})
    return Outcome(records, {}, bool(passed))


def run_margulis(cfg: ExperimentConfig) -> Outcome:
    lat = _lattice(cfg)
    alpha = cfg.get("alpha", 0.5)
    beta = cfg.get("beta", K.MARGULIS_BETA)
    m = cfg.get("m", None) or mg.solve_m_alpha(alpha)
    E = margulis_sheets(lat, cfg.get("sheets", 16), beta, cfg.seed)
    records = []
    passed = True
    for ell in cfg.get("ell", [1, 2, 3]):
        rep = mg.verify_margulis_inequality(E, mg.RandomWalk(alpha, m, int(ell)),
                                            cfg.get("samples", 100_000), cfg.seed)
        passed &= rep.passed
        records.append(rep.to_dict())
    return Outcome(records, {}, bool(passed))


def margulis_sheets(lat, n, beta, seed):
    """n sheets through the identity coset: 0 plus n - 1 seeded offsets inside B(0, beta)."""
    rng = stream(seed, "margulis-sheets")
    F = rng.uniform(-1, 1, (n - 1, 3))
    F = F / np.max(np.abs(F), axis=1, keepdims=True) * rng.uniform(0.1, 1, (n - 1, 1)) * beta
    return mg.SheetSet(lq.identity_point(lat), np.vstack([np.zeros(3), F]), beta, 0.004)


def run_recurrence(cfg: ExperimentConfig) -> Outcome:
    lat = _lattice(cfg)
    prof = lq.recurrence_profile(lq.identity_point(lat), cfg.get("t", 12.0),
                                 cfg.get("eps_grid", [0.02, 0.05, 0.1, 0.2]),
                                 cfg.get("samples", 20_000), cfg.seed)
    rec = dataclasses.asdict(prof)
    rows = zip(prof.eps, prof.fractions, prof.errors, prof.saturated)
    table = csv_text(["eps", "fraction", "mc_error", "saturated"], rows)
    return Outcome([rec], {"recurrence.csv": table}, prof.passed)


def bump_family(lat, n, radius, seed, min_orbit_distance):
    """Bumps centred at test-grid points away from the closed orbit through the identity."""
    Z = eq.sample_grid(lat, 8 * n, K.TEST_GRID_ETA, seed=seed)
    far = Z[eq.distance_to_orbit(Z, lat) > min_orbit_distance][:n]
    return [eq.TestFunction(lq.QuotientPoint(z, lat, True, 0.0), radius) for z in far]


def run_equidist(cfg: ExperimentConfig) -> Outcome:
    lat = _lattice(cfg)
    radius = cfg.get("radius", 4.0)
    res = _pipeline(cfg)
    rho = eq.SparseMeasure(res.I, res.rho)
    dirac = eq.SparseMeasure.dirac(0.0)
    fs = bump_family(lat, cfg.get("test_points", 8), radius, cfg.seed, 1.5 * 0.1 * radius)
    x = lq.identity_point(lat)
    haar = eq.horospherical_average(fs, generic_point(lat), K.HAAR_TIME, K.HAAR_SAMPLES, cfg.seed)
    lo, hi = eq.window(rho.scale)
    ts = cfg.get("t_grid", list(np.linspace(lo, hi, 5)))
    n = cfg.get("samples", 2048)
    sparse = eq.discrepancy_sweep(fs, x, rho, ts, haar, n, cfg.seed)
    control = eq.discrepancy_sweep(fs, x, dirac, ts, haar, n, cfg.seed)
    decays = eq.decays(sparse)
    control_decays = eq.decays(control)
    rho_ok = eq.rho_regularity_check(rho, 1 - 30 * res.report["eps"], rho.scale)[0]
    dirac_ok = eq.rho_regularity_check(dirac, 1 - 30 * res.report["eps"], rho.scale)[0]
    passed = bool(decays and not control_decays and not dirac_ok)
    rec = {"window": [lo, hi], "b": rho.scale, "functions": len(fs), "haar": [h.mean for h in haar],
           "pipeline_decays": decays, "control_decays": control_decays,
           "pipeline_regular": rho_ok, "dirac_regular": dirac_ok, "passed": passed}
    tables = {"equidist_sweep.csv": eq.sweep_csv(sparse),
              "equidist_control.csv": eq.sweep_csv(control)}
    return Outcome([rec], tables, passed)


def run_density(cfg: ExperimentConfig) -> Outcome:
    lat = _lattice(cfg)
    T_grid = cfg.get("T_grid", [1e2, 1e3, 1e4])
    n = cfg.get("samples", 2048)
    Z = eq.sample_grid(lat, cfg.get("test_points", 16), K.TEST_GRID_ETA, seed=cfg.seed)
    xg = generic_point(lat)
    x0 = lq.identity_point(lat)
    gen = eq.density_scan(xg, T_grid, Z, n, cfg.seed)
    per = eq.density_scan(x0, T_grid, Z, n, cfg.seed)
    radii = [r.covering_radius for r in gen]
    strict = all(b < a for a, b in zip(radii, radii[1:]))
    pr = [r.covering_radius for r in per]
    stagnant = (pr[0] - pr[-1]) <= K.STAGNATION * pr[0]
    cloud = eq.cloud(x0, max(T_grid), min(n, 1024), cfg.seed)
    orbit_gap = float(np.max(eq.distance_to_orbit(cloud, lat)))
    flag = lq.periodic_flag(x0, 1e-8)
    generic_flag = lq.periodic_flag(xg, 1e-8)
    passed = bool(strict and stagnant and orbit_gap <= 1e-3 and flag and not generic_flag)
    rec = {"generic_radii": radii, "periodic_radii": pr, "generic_decay_exponent": eq.decay_exponent(gen),
           "strictly_decreasing": strict, "stagnant": stagnant, "periodic_cloud_gap": orbit_gap,
           "near_stabilizer": flag, "generic_near_stabilizer": generic_flag, "passed": passed}
    tables = {"density_generic.csv": eq.density_csv(gen), "density_periodic.csv": eq.density_csv(per)}
    return Outcome([rec], tables, passed)


def run_periodic_f(cfg: ExperimentConfig) -> Outcome:
    lat = _lattice(cfg)
    alpha = cfg.get("alpha", 0.5)
    Y = mg.ergodic_sample(lq.identity_point(lat), cfg.get("samples", 1000), 8.0, cfg.seed)
    st = mg.periodic_orbit_f(Y, alpha, cache=lq.load_cache(lat, cfg.get("depth", 4)))
    ok = bool(math.isfinite(st.mean_f) and st.c16 <= 2 * K.C16_FIXTURE)
    rec = dataclasses.asdict(st)
    rec["passed"] = ok
    return Outcome([rec], {}, ok)


COMMANDS = {
    "contraction": run_contraction,
    "regularize": run_regularize,
    "projection-verify": run_projection_verify,
    "pipeline": run_pipeline,
    "bootstrap": run_bootstrap,
    "margulis": run_margulis,
    "recurrence": run_recurrence,
    "equidist": run_equidist,
    "density": run_density,
    "periodic-f": run_periodic_f,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default="results", help="artifact directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    p = argparse.ArgumentParser(prog="hdensity", description="Desk-scale density experiments.")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def run(subcommand: str, cfg: ExperimentConfig, out) -> int:
    try:
        outcome = COMMANDS[subcommand](cfg)
    except (ConfigInvalid, KeyError) as exc:
        print(f"{subcommand}: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # module errors keep their type in the message
        print(f"{subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    write_artifacts(Path(out), subcommand, cfg, outcome)
    return 0 if outcome.passed else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            print("config error: seed must fit in 64 bits", file=sys.stderr)
            return 2
        cfg.seed = args.seed
    rng_mod.set_threads(args.threads)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run(args.subcommand, cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
