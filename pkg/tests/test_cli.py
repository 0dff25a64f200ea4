import json

import pytest

from hdensity import cli
from hdensity import lattice_quotient as lq
from hdensity import rng


def body(path):
    return path.read_bytes().split(b"\n", 1)[1]


def test_parse_config_values():
    cfg = cli.parse_config("""
        # recurrence run
        lattice = SL2_GaussianIntegers
        seed = 5
        t = 12      # flow time
        eps_grid = 0.02, 0.05
    """)
    assert cfg.seed == 5 and cfg.t == 12.0
    assert cfg.eps_grid == [0.02, 0.05]
    assert cfg.get("samples", 99) == 99
    json.dumps(cfg.to_dict())


@pytest.mark.parametrize("text", ["colour = red", "seed = two", "lattice = SL3Z", "seed 4"])
def test_parse_config_rejects(text):
    with pytest.raises(cli.ConfigInvalid):
        cli.parse_config(text)


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_bad_config_exits_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense = 1\n")
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert cli.main(["pipeline", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_module_error_exits_3(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("alpha = 0.2\nchecks = 1\n")
    assert cli.main(["contraction", "--config", str(cfg), "--out", str(tmp_path)]) == 3


def test_pipeline_artifacts_repeat(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["pipeline", "--out", str(a)]) == 0
    assert cli.main(["pipeline", "--out", str(b)]) == 0
    for name in ("pipeline.jsonl", "pipeline_measure.csv"):
        assert body(a / name) == body(b / name)
    head = json.loads((a / "pipeline.jsonl").read_text().splitlines()[0])
    assert head["subcommand"] == "pipeline" and "timestamp" in head


def test_thread_count_invariance(tmp_path):
    cfg = tmp_path / "r.cfg"
    cfg.write_text("samples = 12000\nt = 12\n")
    one, four = tmp_path / "one", tmp_path / "four"
    try:
        assert cli.main(["recurrence", "--config", str(cfg), "--out", str(one), "--threads", "1"]) == 0
        assert cli.main(["recurrence", "--config", str(cfg), "--out", str(four), "--threads", "4"]) == 0
    finally:
        rng.set_threads(1)
    assert body(one / "recurrence.jsonl") == body(four / "recurrence.jsonl")
    assert body(one / "recurrence.csv") == body(four / "recurrence.csv")


def test_seed_changes_results(tmp_path):
    cfg = tmp_path / "r.cfg"
    cfg.write_text("samples = 4000\n")
    cli.main(["recurrence", "--config", str(cfg), "--out", str(tmp_path / "s0"), "--seed", "0"])
    cli.main(["recurrence", "--config", str(cfg), "--out", str(tmp_path / "s1"), "--seed", "1"])
    assert body(tmp_path / "s0" / "recurrence.jsonl") != body(tmp_path / "s1" / "recurrence.jsonl")


def test_missing_cache_is_built_then_reused(tmp_path, monkeypatch):
    monkeypatch.setenv(lq.CACHE_ENV, str(tmp_path / "cache"))
    monkeypatch.setattr(lq, "_memory_caches", {})
    cfg = tmp_path / "p.cfg"
    cfg.write_text("samples = 50\n")
    assert cli.main(["periodic-f", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    files = sorted((tmp_path / "cache").iterdir())
    assert files
    before = {f.name: f.read_bytes() for f in files}
    monkeypatch.setattr(lq, "_memory_caches", {})
    assert cli.main(["periodic-f", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    after = {f.name: f.read_bytes() for f in sorted((tmp_path / "cache").iterdir())}
    assert after == before
    assert body(tmp_path / "a" / "periodic-f.jsonl") == body(tmp_path / "b" / "periodic-f.jsonl")


def test_nan_written_as_null():
    assert cli._clean({"x": float("nan"), "y": [1.0, float("nan")]}) == {"x": None, "y": [1.0, None]}
