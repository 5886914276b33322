import csv
import json

import numpy as np
import pytest

from aggrl.__main__ import main
from aggrl.errors import ConfigurationError
from aggrl.harness import (ExperimentConfig, cmd_evaluate, cmd_probe, cmd_replay, cmd_resilience,
                           cmd_train, scenario_seed)
from aggrl.world import reset

DESK = {"width": 6.0, "height": 4.0, "robot_zone": [0, 0, 1.8, 4], "obstacle_zone": [2, 0, 4, 4],
        "goal_zone": [4.5, 0, 6, 4], "max_steps": 15, "step_duration": 1.0}
TINY_HP = {"ac_hidden": [8, 8], "q_hidden": [8], "batch": 8, "buffer_capacity": 5000}


def tiny(**kw) -> ExperimentConfig:
    base = dict(episodes=2, eval_episodes=4, arena=dict(DESK), hyperparams=dict(TINY_HP),
                gsp={"hidden": [8], "batch": 8})
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def read_rows(path):
    with open(path) as fh:
        first = fh.readline()
        assert first.startswith("# config_hash: ")
        return first.split(":", 1)[1].strip(), list(csv.DictReader(fh))


# --- config ------------------------------------------------------------------------

def test_config_rejects_equal_seeds():
    with pytest.raises(ConfigurationError):
        tiny(train_seed=3, eval_seed=3)


def test_config_rejects_unknown_mode_and_keys():
    with pytest.raises(ConfigurationError):
        tiny(mode="telepathy")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"episode": 3})


def test_config_file_wins_over_flags(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("episodes: 7\nmode: gsp\n")
    cfg = ExperimentConfig.load(path, {"episodes": 99, "n_robots": 3})
    assert cfg.episodes == 7 and cfg.mode == "gsp" and cfg.n_robots == 3


def test_config_hash_ignores_workers_only():
    assert tiny().config_hash() == tiny(workers=4).config_hash()
    assert tiny().config_hash() != tiny(eval_seed=9).config_hash()


def test_config_dump_round_trip(tmp_path):
    cfg = tiny(mode="gsp")
    back = ExperimentConfig.load(cfg.dump(tmp_path / "c.yaml"))
    assert back.config_hash() == cfg.config_hash()


# --- train -------------------------------------------------------------------------

def test_train_zero_episodes_gives_untrained_checkpoint(tmp_path):
    res = cmd_train(tiny(episodes=0), tmp_path)
    assert res.checkpoint.exists() and res.episodes == 0
    _, rows = read_rows(res.metrics)
    assert rows == []


def test_train_is_deterministic(tmp_path):
    a = cmd_train(tiny(), tmp_path / "a")
    b = cmd_train(tiny(), tmp_path / "b")
    assert a.metrics.read_text() == b.metrics.read_text()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


def test_train_metrics_carry_hash_and_gate_width(tmp_path):
    cfg = tiny(obstacle_suite="gate", episodes=3, gate_initial=4.0, gate_shrink_every=1,
               gate_minimum=3.0)
    h, rows = read_rows(cmd_train(cfg, tmp_path).metrics)
    assert h == cfg.config_hash()
    assert [float(r["gate_width"]) for r in rows] == [4.0, 3.5, 3.0]
    assert [int(r["episode"]) for r in rows] == [0, 1, 2]


def test_validation_keeps_best_and_leaves_training_untouched(tmp_path):
    plain = cmd_train(tiny(episodes=3), tmp_path / "plain")
    val = cmd_train(tiny(episodes=3, validate_every=1, validation_episodes=2), tmp_path / "val")
    assert read_rows(plain.metrics)[1] == read_rows(val.metrics)[1]
    _, rows = read_rows(tmp_path / "val" / "validation.csv")
    assert [int(r["episodes_trained"]) for r in rows] == [1, 2, 3]
    assert val.best_checkpoint.exists()
    assert val.best_validation == max(float(r["success_rate"]) for r in rows)


# --- evaluate ----------------------------------------------------------------------

def test_paired_scenarios_independent_of_policy():
    cfg = tiny()
    a = reset(cfg.arena_config(), cfg.suite, 4, seed=np.random.default_rng(scenario_seed(2, 3)))
    b = reset(cfg.arena_config(), cfg.suite, 4, seed=np.random.default_rng(scenario_seed(2, 3)))
    assert a.aggregate.pose == b.aggregate.pose
    assert [o.center for o in a.obstacles] == [o.center for o in b.obstacles]


def test_evaluate_writes_hashed_outputs(tmp_path):
    cfg = tiny()
    ckpt = cmd_train(cfg, tmp_path / "train").checkpoint
    res = cmd_evaluate(ckpt, cfg, tmp_path / "eval", trajectories=1)
    summary = json.loads((tmp_path / "eval" / "evaluation.json").read_text())
    assert summary["config_hash"] == cfg.config_hash() == res.config_hash
    h, rows = read_rows(tmp_path / "eval" / "evaluation_episodes.csv")
    assert h == cfg.config_hash() and len(rows) == 4
    traj = tmp_path / "eval" / "evaluation_trajectory_000.csv"
    assert cmd_replay(traj)["config_hash"] == cfg.config_hash()


def test_evaluation_is_repeatable_and_worker_independent(tmp_path):
    cfg = tiny()
    ckpt = cmd_train(cfg, tmp_path).checkpoint
    one = cmd_evaluate(ckpt, cfg)
    again = cmd_evaluate(ckpt, tiny(workers=2))
    assert one.episodes == again.episodes


def test_random_policy_baseline_runs():
    res = cmd_evaluate(None, tiny(eval_episodes=3))
    assert res.checkpoint is None and len(res.episodes) == 3


def test_evaluate_rejects_mode_mismatch(tmp_path):
    ckpt = cmd_train(tiny(episodes=0), tmp_path).checkpoint
    with pytest.raises(ConfigurationError):
        cmd_evaluate(ckpt, tiny(mode="gsp"))
    with pytest.raises(ConfigurationError):
        cmd_evaluate(ckpt, tiny(n_robots=3, mode="gk"))


def test_resilience_without_failures_equals_evaluate(tmp_path):
    cfg = tiny(failure_probability=0.0)
    ckpt = cmd_train(cfg, tmp_path).checkpoint
    assert cmd_resilience(ckpt, cfg).episodes == cmd_evaluate(ckpt, cfg).episodes


def test_resilience_mean_failures_near_two():
    cfg = tiny(n_robots=8, eval_episodes=300,
               arena=dict(DESK, max_steps=1))
    res = cmd_resilience(None, cfg)
    assert res.mean_failures == pytest.approx(2.0, abs=0.3)
    assert max(e["failures"] for e in res.episodes) <= 6


# --- probe -------------------------------------------------------------------------

def test_probe_on_gsp_checkpoint(tmp_path):
    cfg = tiny(mode="gsp")
    ckpt = cmd_train(cfg, tmp_path).checkpoint
    out = cmd_probe(ckpt, out_dir=tmp_path / "probe", samples_per_period=50)
    h, rows = read_rows(tmp_path / "probe" / "probe.csv")
    assert h == cfg.config_hash() and len(rows) == 50 and len(rows[0]) == 10
    assert set(out["ranking"]) == {"robot_1", "robot_2", "robot_3", "robot_4"}


def test_probe_refuses_non_gsp_checkpoint(tmp_path):
    ckpt = cmd_train(tiny(episodes=0), tmp_path).checkpoint
    with pytest.raises(ConfigurationError):
        cmd_probe(ckpt)


# --- CLI ---------------------------------------------------------------------------

def test_cli_train_then_evaluate(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("AGGRL_OUT_DIR", str(tmp_path))
    cfg = tmp_path / "c.yaml"
    tiny(episodes=1).dump(cfg)
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    assert main(["evaluate", ckpt, "--config", str(cfg), "--trajectories", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["episodes"] == 4
    traj = next(tmp_path.glob("evaluate-*/evaluation_trajectory_000.csv"))
    assert main(["replay", str(traj)]) == 0
    assert json.loads(capsys.readouterr().out)["n_robots"] == 4


def test_cli_nested_flags(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("AGGRL_OUT_DIR", str(tmp_path))
    args = ["evaluate", "--random", "--eval-episodes", "2"]
    for k, v in DESK.items():
        args += ["--arena", f"{k}={json.dumps(v)}"]
    assert main(args) == 0
    assert json.loads(capsys.readouterr().out)["episodes"] == 2


def test_cli_errors_are_json(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("AGGRL_OUT_DIR", str(tmp_path))
    assert main(["evaluate", "--random", "--mode", "nope"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigurationError"
    bad = tmp_path / "bad.csv"
    bad.write_text("step,object_x\n0,1\n")
    assert main(["replay", str(bad)]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "TrajectoryParseError" and err["line"] == 1
    assert main(["probe", str(tmp_path / "missing.zip")]) == 6
