import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsleuth import cli
from dynsleuth.ga_attack import recovery_rate
from dynsleuth.gridworld import is_valid, load_map, parse_map
from dynsleuth.neuralnet import Head, MlpPolicy, load_policy, mlp_init, save_policy


def run(*argv):
    return cli.main(["--jobs", "1", *map(str, argv)])


@pytest.fixture
def grid_setup(tmp_path):
    truth = tmp_path / "truth.map"
    truth.write_text("...#G\n.....\n#....\n..#..\n#.##.\n")
    rng = np.random.default_rng(0)
    q = tmp_path / "q.policy"
    save_policy(MlpPolicy(mlp_init((8, 16, 5), rng), Head.Q_VALUES), q)
    return tmp_path, truth, q


def test_gen_maps_valid_and_deterministic(tmp_path):
    assert run("gen-maps", "--count", 3, "--size", "6x5", "--goal", "0,4", "--seed", 4, "--out", tmp_path / "a") == 0
    assert run("gen-maps", "--count", 3, "--size", "6x5", "--goal", "0,4", "--seed", 4, "--out", tmp_path / "b") == 0
    for i in range(3):
        a = load_map(tmp_path / "a" / f"map_{i:02d}.map")
        assert is_valid(a) and (a.height, a.width, a.goal) == (6, 5, 4)
        assert a == load_map(tmp_path / "b" / f"map_{i:02d}.map")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "gen-maps" and len(manifest["artifacts"]) == 3
    assert manifest["seeds"]["maps"] == cli.substream(4, "maps")


def test_gen_maps_goal_outside_grid(tmp_path, capsys):
    assert run("gen-maps", "--size", "3x3", "--goal", "5,0", "--out", tmp_path) == 2
    assert "outside" in capsys.readouterr().err


def test_attack_report_schema(grid_setup):
    tmp, truth, q = grid_setup
    out = tmp / "a.json"
    assert run("attack", "--policy", q, "--agent-kind", "dqn", "--truth", truth,
               "--seeds", "0-1", "--generations", 3, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["schema_version"] == 1 and rep["kind"] == "attack" and rep["method"] == "ga"
    assert [e["seed_index"] for e in rep["per_seed"]] == [0, 1]
    best = max(rep["per_seed"], key=lambda e: e["best_score"])
    assert rep["best"]["best_score"] == best["best_score"]
    # the recovery rate in the report matches an independent recomputation
    assert rep["best"]["recovery_rate"] == recovery_rate(parse_map("\n".join(rep["best"]["map"])), load_map(truth))
    assert len(best["history"]["best_fitness"]) == 4
    assert rep["evaluations_total"] == sum(e["evaluations"] for e in rep["per_seed"])
    assert (tmp / "a.json.manifest.json").exists()


def test_attack_deterministic_and_parallel_equal(grid_setup):
    tmp, truth, q = grid_setup
    args = ["attack", "--method", "random", "--budget", 50, "--policy", q, "--agent-kind", "dqn",
            "--truth", truth, "--seeds", "0,1"]
    assert run(*args, "--out", tmp / "s.json") == 0
    assert cli.main(["--jobs", "2", *map(str, args), "--out", str(tmp / "p.json")]) == 0
    a, b = (json.loads((tmp / f).read_text()) for f in ("s.json", "p.json"))
    assert [e["map"] for e in a["per_seed"]] == [e["map"] for e in b["per_seed"]]
    assert all(e["evaluations"] == 50 for e in a["per_seed"])


def test_attack_agent_kind_must_match_head(grid_setup, capsys):
    tmp, truth, q = grid_setup
    assert run("attack", "--policy", q, "--agent-kind", "pg", "--truth", truth, "--out", tmp / "x.json") == 2
    assert "qvalues" in capsys.readouterr().err
    assert not (tmp / "x.json").exists()


def test_attack_missing_inputs_named(grid_setup, capsys):
    tmp, truth, q = grid_setup
    assert run("attack", "--policy", tmp / "none.policy", "--agent-kind", "dqn", "--out", tmp / "x.json") == 2
    assert "none.policy" in capsys.readouterr().err
    assert run("attack", "--policy", q, "--agent-kind", "dqn", "--out", tmp / "x.json") == 2
    assert "--size" in capsys.readouterr().err


def test_config_precedence(grid_setup):
    tmp, truth, q = grid_setup
    cfg = tmp / "run.cfg"
    cfg.write_text("# comment\ngenerations = 3\nmutation-rate=0.1\nseeds=0\n")
    assert run("attack", "--config", cfg, "--generations", 2, "--policy", q, "--agent-kind", "dqn",
               "--truth", truth, "--out", tmp / "c.json") == 0
    ga = json.loads((tmp / "c.json").read_text())["config"]["ga"]
    assert ga["generations"] == 2           # flag beats file
    assert ga["mutation_rate"] == 0.1       # file beats default
    assert ga["population_size"] == 64      # default


def test_config_unknown_key_and_bad_value(grid_setup, capsys):
    tmp, truth, q = grid_setup
    cfg = tmp / "bad.cfg"
    cfg.write_text("bogus = 1\n")
    assert run("attack", "--config", cfg, "--policy", q, "--agent-kind", "dqn", "--out", tmp / "x.json") == 2
    assert "bogus" in capsys.readouterr().err
    cfg.write_text("generations = lots\n")
    assert run("attack", "--config", cfg, "--policy", q, "--agent-kind", "dqn", "--out", tmp / "x.json") == 2


def test_train_env_algo_mismatch(tmp_path, capsys):
    assert run("train", "--env", "pointbot", "--algo", "dqn", "--out", tmp_path / "p.policy") == 2
    assert "cannot train" in capsys.readouterr().err


def test_train_pg_writes_policy_log_manifest(tmp_path):
    m = tmp_path / "m.map"
    m.write_text("..G\n...\n.#.\n")
    out = tmp_path / "pg.policy"
    assert run("train", "--algo", "pg", "--map", m, "--episodes", 64, "--out", out) == 0
    pol = load_policy(out)
    assert pol.head is Head.LOGITS and pol.meta["env"] == "grid"
    assert (tmp_path / "pg.policy.log").read_text().startswith("episodes\t")
    manifest = json.loads((tmp_path / "pg.policy.manifest.json").read_text())
    assert set(manifest["artifacts"]) == {str(out), str(out) + ".log"}
    assert {"command", "config", "seeds", "started", "finished", "version"} <= set(manifest)


def test_shadow_pipeline(tmp_path):
    sh = tmp_path / "sh"
    assert run("shadow", "train", "--candidates", "pointbot6", "--m", 2, "--episodes", 16, "--out", sh) == 0
    assert len(list(sh.glob("*.policy"))) == 12
    assert run("shadow", "features", "--candidates", "pointbot6", "--policies", sh, "--train-seeds", 1,
               "--k", 3, "--out", tmp_path / "f.csv") == 0
    assert run("shadow", "fit", "--candidates", "pointbot6", "--features", tmp_path / "f.csv",
               "--epochs", 5, "--out", tmp_path / "m.svm.json") == 0
    assert run("shadow", "infer", "--candidates", "pointbot6", "--model", tmp_path / "m.svm.json",
               "--policy", sh / "Weak__001.policy", "--k", 3, "--out", tmp_path / "i.json") == 0
    inf = json.loads((tmp_path / "i.json").read_text())
    assert inf["index"] == int(np.argmax(inf["scores"]))


def test_shadow_missing_upstream_artifacts_named(tmp_path, capsys):
    assert run("shadow", "features", "--candidates", "pointbot6", "--policies", tmp_path / "none",
               "--out", tmp_path / "f.csv") == 2
    assert "none" in capsys.readouterr().err
    (tmp_path / "empty").mkdir()
    assert run("shadow", "features", "--candidates", "pointbot6", "--policies", tmp_path / "empty",
               "--out", tmp_path / "f.csv") == 2
    assert "LightTorso__000.policy" in capsys.readouterr().err
    assert run("shadow", "fit", "--candidates", "pointbot6", "--features", tmp_path / "f.csv",
               "--out", tmp_path / "m.json") == 2
    assert "f.csv" in capsys.readouterr().err


def _attack_report(method, kind, rate, secs):
    return {"schema_version": 1, "kind": "attack", "method": method, "agent_kind": kind,
            "environment": "Grid World", "truth": ["G"], "best": {"recovery_rate": rate},
            "wall_clock_seconds": secs}


def test_report_table_averages_groups():
    table = cli.summarize_reports([
        _attack_report("ga", "pg", 0.8, 10.0),
        _attack_report("ga", "pg", 0.9, 20.0),
        _attack_report("random", "pg", 0.5, 1.0),
    ])
    lines = table.strip().split("\n")
    assert lines[0] == "| Environment | Agent | Task | Method | Recovery Rate | Run Time |"
    assert lines[2] == "| Grid World | PG | Map recovery | Genetic Algorithm | 85.00% | 15.0 s |"
    assert len(lines) == 4


def test_report_errors(tmp_path):
    with pytest.raises(cli.UsageError):
        cli.summarize_reports([])
    bad = _attack_report("ga", "pg", 0.8, 1.0)
    bad["schema_version"] = 99
    with pytest.raises(cli.UsageError):
        cli.summarize_reports([bad])
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    assert run("report", "--inputs", p, "--out", tmp_path / "t.md") == 2
    assert not (tmp_path / "t.md").exists()


def test_jobs_env_var(monkeypatch):
    monkeypatch.setenv("DYNSLEUTH_JOBS", "3")
    assert cli.default_jobs() == 3
    monkeypatch.setenv("DYNSLEUTH_JOBS", "x")
    with pytest.raises(cli.UsageError):
        cli.default_jobs()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.text(min_size=1, max_size=8), st.text(min_size=1, max_size=8))
def test_substreams_stable_and_named(seed, a, b):
    assert cli.substream(seed, a) == cli.substream(seed, a)
    if a != b:
        assert cli.substream(seed, a) != cli.substream(seed, b)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    cli.atomic_write(tmp_path / "x.txt", "hello")
    cli.atomic_write(tmp_path / "x.txt", b"bytes")
    assert os.listdir(tmp_path) == ["x.txt"] and (tmp_path / "x.txt").read_bytes() == b"bytes"


def test_report_file_round_trip_bit_exact(grid_setup):
    tmp, truth, q = grid_setup
    out = tmp / "a.json"
    assert run("attack", "--policy", q, "--agent-kind", "dqn", "--truth", truth,
               "--seeds", 0, "--generations", 2, "--out", out) == 0
    again = tmp / "b.json"
    cli.write_json(again, json.loads(out.read_text()))
    assert again.read_bytes() == out.read_bytes()
