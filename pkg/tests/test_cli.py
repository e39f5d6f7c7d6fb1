import csv

import pytest

from routed_attn import tensorio
from routed_attn.cli import main
from routed_attn.config import RunConfig
from routed_attn.errors import ConfigError, GeometryError

TINY = """\
# small enough for a unit test
model.blocks = 1
model.heads = 2
model.width = 8
model.ffn_hidden = 16
model.grid = 2,4,4
model.tile = 1,2,2
model.window = 2,2,0
model.bucket = 1,2,2
data.count = 4
pretrain.steps = 3
router.steps = 2
eval.batch = 2
sample.steps = 4
profile.steps = 4
profile.intervals = 2
profile.k = 1,8,32
bench.grid = 4,8,8
bench.width = 16
bench.reps = 3
bench.branches = full,coreset;sliding
bench.tile = 2,4,4
bench.window = 0,0,0
bench.bucket = 1,2,2
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_config_roundtrip():
    cfg = RunConfig.parse(TINY)
    again = RunConfig.parse(cfg.dump())
    assert again.values == cfg.values
    assert cfg["bench.branches"] == (("full", "coreset"), ("sliding",))


def test_config_errors():
    with pytest.raises(ConfigError, match="line 2"):
        RunConfig.parse("seed = 1\nmodel.depth = 3\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("seed = -1\n")
    with pytest.raises(GeometryError, match=r"\[sliding-tile\]"):
        RunConfig.parse("model.tile = 3,4,4\n").validate()
    with pytest.raises(GeometryError, match=r"\[coreset\]"):
        RunConfig.parse("model.bucket = 3,3,2\n").validate()


def test_verify_default_and_only(capsys):
    assert main(["verify", "--only", "sliding"]) == 0
    out = capsys.readouterr().out
    assert "sliding" in out and "coreset" not in out
    assert main(["verify"]) == 0


def test_verify_bad_geometry(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.tile = 1,5,4\n")
    assert main(["verify", "--config", str(bad)]) != 0
    assert "[sliding-tile]" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, cfg_file, capsys):
    assert main(["sample", "--config", str(cfg_file), "--out", str(tmp_path / "none")]) == 2
    assert "train" in capsys.readouterr().err


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_train_sample_dump_profile(tmp_path, cfg_file, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
        assert main(["sample", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert _tree(a) == _tree(b)
    assert (a / "checkpoint" / "manifest.csv").exists()
    assert len(tensorio.load(a / "sample_hard.vrta")) == 32
    assert "mean squared deviation" in capsys.readouterr().out

    assert main(["route-dump", "--config", str(cfg_file), "--out", str(a)]) == 0
    rows = list(csv.DictReader(open(a / "gates.csv")))
    assert len(rows) == 4 * 1 * 2

    assert main(["profile", "--config", str(cfg_file), "--out", str(a)]) == 0
    prof = a / "profile"
    heat = list(csv.DictReader(open(prof / "heatmap.csv")))
    assert sorted({r["interval"] for r in heat}) == ["0", "1"]
    assert len(list((prof / "recall").glob("step_*.csv"))) == 4
    assert (prof / "step_latency.csv").exists() and (prof / "breakdown.csv").exists()
    assert "routed attention MACs" in capsys.readouterr().out


def test_zero_step_train(tmp_path, cfg_file):
    cfg = tmp_path / "zero.cfg"
    cfg.write_text(TINY + "pretrain.steps = 0\nrouter.steps = 0\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "z")]) == 0
    log = (tmp_path / "z" / "router_log.csv").read_text().splitlines()
    assert len(log) == 1


def test_bench_two_sets(tmp_path, cfg_file):
    assert main(["bench", "--config", str(cfg_file), "--out", str(tmp_path)]) == 0
    first = list(csv.DictReader(open(tmp_path / "bench_0.csv")))
    second = list(csv.DictReader(open(tmp_path / "bench_1.csv")))
    assert [r["branch"] for r in first] == ["full", "coreset"]
    assert [r["branch"] for r in second] == ["sliding"]
