import json

import pytest

from dhmcmc import cli
from dhmcmc.cli import EXIT_INVALID, EXIT_OK, example_measurements_path

MEAS = str(example_measurements_path())


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def loop_files(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("make-grid", "--topology", "loop", "--out", "g.json", "--prior-out", "p.json",
               "--measurements-out", "m.json") == EXIT_OK
    return tmp_path


def test_make_grid_loop_writes_provenance(loop_files):
    doc = json.loads((loop_files / "g.json").read_text())
    assert {"tool", "version", "config_hash", "seed"} <= set(doc["provenance"])
    assert len(doc["demand_edges"]) == 4


def test_make_grid_tree(tmp_path):
    assert run("make-grid", "--topology", "tree", "--n-demands", "1", "--out", tmp_path / "t.json") == EXIT_OK


def test_invalid_topology_name_is_usage_error(tmp_path, capsys):
    assert run("make-grid", "--topology", "mesh", "--out", tmp_path / "x.json") == EXIT_INVALID
    assert "invalid choice" in capsys.readouterr().err


def test_unknown_measurement_state_exits_1(loop_files):
    (loop_files / "bad.json").write_text(json.dumps([{"state": "T[nope]", "value": 1.0, "sigma": 1.0}]))
    assert run("estimate", "--method", "lse", "--grid", "g.json", "--prior", "p.json",
               "--measurements", "bad.json", "--out", "x.json") == EXIT_INVALID


def test_missing_file_exits_1(loop_files):
    assert run("estimate", "--method", "lse", "--grid", "nowhere.json", "--prior", "p.json",
               "--measurements", MEAS, "--out", "x.json") == EXIT_INVALID


def test_lse_needs_no_model(loop_files):
    assert run("estimate", "--method", "lse", "--grid", "g.json", "--prior", "p.json",
               "--measurements", MEAS, "--out", "lse.json") == EXIT_OK
    assert "mean" in json.loads((loop_files / "lse.json").read_text())


def test_hmc_without_model_exits_1(loop_files):
    assert run("estimate", "--method", "hmc", "--grid", "g.json", "--prior", "p.json",
               "--measurements", MEAS, "--out", "h.csv") == EXIT_INVALID


def test_config_file_overrides_flags(loop_files):
    (loop_files / "cfg.yaml").write_text("bound:\n  samples: 2\n  scale: '0.9'\n")
    assert run("bound", "--grid", "g.json", "--prior", "p.json", "--out", "b.json", "--config", "cfg.yaml") == EXIT_OK
    doc = json.loads((loop_files / "b.json").read_text())
    assert list(doc["scales"]) == ["0.9"]


def test_unknown_config_key_exits_1(loop_files):
    (loop_files / "cfg.json").write_text(json.dumps({"no_such_flag": 1}))
    assert run("bound", "--grid", "g.json", "--prior", "p.json", "--out", "b.json",
               "--config", "cfg.json") == EXIT_INVALID


def test_numerical_failure_exits_2(loop_files):
    # a measurement no prior draw can explain leaves SIR without finite weights
    (loop_files / "far.json").write_text(json.dumps([{"state": "T[r_hp]", "value": 1e200, "sigma": 1e-200}]))
    assert run("estimate", "--method", "sir", "--grid", "g.json", "--prior", "p.json", "--measurements",
               "far.json", "--n-draws", "50", "--n-out", "10", "--out", "s.csv") == 2


def test_help_exits_0():
    assert run("--help") == 0
