import dataclasses
import math

import numpy as np
import pytest

from aggrl.errors import TrajectoryParseError
from aggrl.harness import RandomPolicy
from aggrl.trajectory import columns, parse_trajectory, summarize, write_trajectory
from aggrl.training import run_episode_actde
from aggrl.world import ObstacleSuite, reset


class ZeroPolicy:
    discrete = False
    input_width = 31

    def act(self, obs, rng, explore=False):
        return np.zeros((len(obs), 2))


def _record(desk_arena, policy, tmp_path, max_steps=40, seed=0, failure_schedule=None):
    arena = dataclasses.replace(desk_arena, max_steps=max_steps)
    state = reset(arena, ObstacleSuite.TWO_CYLINDERS, 4, seed=seed, failure_schedule=failure_schedule)
    rep = run_episode_actde(policy, state, "ic", False, np.random.default_rng(seed), record=True)
    return write_trajectory(tmp_path / "t.csv", state, rep.trajectory, "abc123"), rep


def test_column_order():
    cols = columns(2)
    assert cols[:7] == ["step", "object_x", "object_y", "object_theta", "aggregate_dtheta",
                        "done", "success"]
    assert cols[7:14] == ["r1_x", "r1_y", "r1_heading", "r1_attached", "r1_dv_left",
                          "r1_dv_right", "r1_reward"]
    assert len(cols) == 7 + 14


def test_zero_action_log_has_no_displacement(desk_arena, tmp_path):
    path, rep = _record(desk_arena, ZeroPolicy(), tmp_path)
    summary = summarize(parse_trajectory(path))
    assert summary["net_displacement"] == 0.0
    assert summary["steps"] == rep.steps == 40
    assert summary["config_hash"] == "abc123"


def test_random_log_rewards_in_bounds(desk_arena, tmp_path):
    path, _ = _record(desk_arena, RandomPolicy(31), tmp_path, max_steps=100)
    traj = parse_trajectory(path)
    r = np.column_stack([traj.column(f"r{i}_reward") for i in range(1, 5)])[1:]
    assert np.all((r >= -4.0) & (r <= -1.0))
    s = summarize(traj)
    assert -4.0 <= s["mean_reward"] <= -1.0
    assert s["heading_min"] <= s["heading_max"]


def test_round_trip_is_stable(desk_arena, tmp_path):
    path, _ = _record(desk_arena, RandomPolicy(31), tmp_path, max_steps=30, seed=4)
    first = parse_trajectory(path)
    # Parsing a path or its text gives the same numbers and the same summary.
    text = path.read_text()
    again = parse_trajectory(text)
    np.testing.assert_array_equal(np.nan_to_num(first.table, nan=7.5), np.nan_to_num(again.table, nan=7.5))
    assert summarize(first) == summarize(again)


def test_failed_robot_cells_are_empty(desk_arena, tmp_path):
    path, _ = _record(desk_arena, RandomPolicy(31), tmp_path, max_steps=10,
                      failure_schedule=[None, 2, None, None])
    traj = parse_trajectory(path)
    attached = traj.column("r2_attached")
    assert attached[1] == 1 and attached[-1] == 0
    assert math.isnan(traj.column("r2_reward")[-1]) and math.isnan(traj.column("r2_dv_left")[-1])


def _text(desk_arena, tmp_path):
    path, _ = _record(desk_arena, ZeroPolicy(), tmp_path, max_steps=5)
    return path.read_text().splitlines()


def test_parse_error_reports_line_number(desk_arena, tmp_path):
    lines = _text(desk_arena, tmp_path)
    # Line 1 is the hash comment, line 2 the header, line 3 step 0.
    cells = lines[4].split(",")
    cells[1] = "oops"
    lines[4] = ",".join(cells)
    with pytest.raises(TrajectoryParseError) as err:
        parse_trajectory("\n".join(lines))
    assert err.value.line == 5
    assert str(err.value).startswith("line 5:")


def test_parse_error_on_short_row(desk_arena, tmp_path):
    lines = _text(desk_arena, tmp_path)
    lines[3] = lines[3].rsplit(",", 1)[0]
    with pytest.raises(TrajectoryParseError) as err:
        parse_trajectory("\n".join(lines))
    assert err.value.line == 4


def test_parse_error_on_bad_header(desk_arena, tmp_path):
    lines = _text(desk_arena, tmp_path)
    lines[1] = lines[1].replace("object_x", "obj_x")
    with pytest.raises(TrajectoryParseError) as err:
        parse_trajectory("\n".join(lines))
    assert err.value.line == 2


def test_out_of_bounds_reward_is_rejected(desk_arena, tmp_path):
    lines = _text(desk_arena, tmp_path)
    header = lines[1].split(",")
    cells = lines[5].split(",")
    cells[header.index("r3_reward")] = "-0.5"
    lines[5] = ",".join(cells)
    with pytest.raises(TrajectoryParseError) as err:
        summarize(parse_trajectory("\n".join(lines)))
    assert err.value.line == 6
