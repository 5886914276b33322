import dataclasses
import math

import numpy as np
import pytest

from aggrl import nn
from aggrl.coordination import (MESSAGE_SIZE, CoordinationMode, GkPacket, GspModel, GspRecord,
                                augment, augment_all, build_gk_augmentation, gsp_predict,
                                gsp_reward, impact_scores, policy_input_width, probe_gsp,
                                proximity_broadcast)
from aggrl.errors import ConfigurationError
from aggrl.rl import Hyperparams, ReplayBuffer, make_agent
from aggrl.training import run_episode_actde
from aggrl.world import ObstacleSuite, observe_all, reset, step

from conftest import make_world


def test_widths():
    assert policy_input_width("ic", 4) == 31
    assert policy_input_width("gsp", 4) == 32
    assert policy_input_width("gk", 4) == 31 + 12
    assert policy_input_width("gk", 8) == 31 + 28


def test_gk_carries_more_than_gsp():
    assert MESSAGE_SIZE[CoordinationMode.GK] == 4 * MESSAGE_SIZE[CoordinationMode.GSP]
    assert MESSAGE_SIZE[CoordinationMode.IC] == 0


def test_augment_ic_is_identity():
    obs = np.arange(31.0)
    np.testing.assert_array_equal(augment(obs, "ic"), obs)


def test_augment_gsp_appends_prediction_last():
    out = augment(np.zeros(31), "gsp", 0.3)
    assert out.shape == (32,) and out[31] == 0.3


def test_augment_rejects_mismatched_extra():
    with pytest.raises(ConfigurationError):
        augment(np.zeros(31), "gsp", [0.1, 0.2])
    with pytest.raises(ConfigurationError):
        augment(np.zeros(31), "ic", [0.1])
    with pytest.raises(ConfigurationError):
        augment(np.zeros(30), "ic")


def test_gk_first_step_has_zero_velocity():
    s = make_world(n_robots=4)
    pkt = build_gk_augmentation(s, 0)
    assert isinstance(pkt, GkPacket)
    assert pkt.positions.shape == (3, 2)
    assert np.all(pkt.velocities == 0)
    assert augment(np.zeros(31), "gk", pkt).shape == (43,)


def test_gk_static_aggregate_has_zero_velocity():
    s = make_world(n_robots=4)
    for _ in range(3):
        s, _ = step(s, np.zeros((4, 2)))
        assert np.all(build_gk_augmentation(s, 1).velocities == 0)


def test_gk_velocity_is_finite_difference_and_order_is_stable():
    s = make_world(n_robots=3)
    s.aggregate.robots[0].wheels[:] = 5.0
    s.aggregate.robots[1].wheels[:] = 5.0
    s.aggregate.robots[2].wheels[:] = 5.0
    before = s.aggregate.robot_positions()
    s, _ = step(s, np.zeros((3, 2)))
    after = s.aggregate.robot_positions()
    pkt = build_gk_augmentation(s, 1)
    np.testing.assert_allclose(pkt.positions, after[[0, 2]])
    np.testing.assert_allclose(pkt.velocities, (after[[0, 2]] - before[[0, 2]]) / s.arena.step_duration)
    rows = augment_all(observe_all(s), "gk", s)
    np.testing.assert_allclose(rows[1, 31:], pkt.vector())


def test_gk_needs_two_robots():
    with pytest.raises(ConfigurationError):
        build_gk_augmentation(make_world(n_robots=1), 0)


def test_proximity_broadcast_zeroes_detached():
    obs = np.zeros((3, 31))
    obs[:, 7:31] = [[0.5], [1.0], [0.25]]
    np.testing.assert_allclose(proximity_broadcast(obs, np.array([True, False, True])), [0.5, 0.0, 0.25])


def test_gsp_reward_examples():
    assert gsp_reward(0.4, 0.4) == 0.0
    assert gsp_reward(3.1, -3.1) == pytest.approx(-(2 * math.pi - 6.2), abs=1e-12)
    assert gsp_reward(math.pi / 2, -math.pi / 2) == pytest.approx(-math.pi)


def test_gsp_predict_is_wrapped_and_checks_width():
    net = nn.Mlp([nn.LayerSpec(2, 1)], [np.zeros((2, 1))], [np.array([4.0])])
    assert gsp_predict(net, [0.1, 0.2]) == pytest.approx(4.0 - 2 * math.pi)
    with pytest.raises(ConfigurationError):
        gsp_predict(net, [0.1, 0.2, 0.3])


def _fill(model, rng, n, target):
    P = rng.random((n, model.n_robots))
    for i in range(n):
        model.buffer.push(GspRecord(P[i], 0.0, 0.0, P[i], False, target(P[i])))


def test_gsp_regression_learns_constant():
    rng = np.random.default_rng(0)
    model = GspModel(4, rng, hidden=(16,), lr=1e-3)
    _fill(model, rng, 500, lambda p: 0.37)
    for _ in range(3000):
        model.train_step(rng)
    preds = [model.predict(p) for p in rng.random((50, 4))]
    assert np.max(np.abs(np.array(preds) - 0.37)) < 0.01


def test_gsp_regression_on_zero_world_predicts_near_zero():
    rng = np.random.default_rng(1)
    model = GspModel(4, rng, hidden=(16,), lr=1e-3)
    _fill(model, rng, 500, lambda p: 0.0)
    for _ in range(3000):
        model.train_step(rng)
    preds = np.array([model.predict(p) for p in rng.random((50, 4))])
    assert np.mean(np.abs(preds)) < 0.01


def test_gsp_zero_error_buffer_gives_zero_loss():
    rng = np.random.default_rng(0)
    model = GspModel(2, rng, hidden=(4,), batch=10)
    for p in rng.random((20, 2)):
        model.buffer.push(GspRecord(p, 0.0, 0.0, p, False, float(nn.forward(model.net, p)[0])))
    assert model.train_step(rng) == pytest.approx(0.0, abs=1e-24)


def test_gsp_needs_warm_buffer():
    rng = np.random.default_rng(0)
    model = GspModel(2, rng, hidden=(4,), batch=10)
    assert model.train_step(rng) is None


def test_gsp_unknown_training_mode():
    with pytest.raises(ConfigurationError):
        GspModel(2, np.random.default_rng(0), training="evolution")


def test_probe_shape_and_zero_crossings():
    net = nn.Mlp.build([4, 8, 1], np.random.default_rng(3))
    cols, table = probe_gsp(net, 4, samples_per_period=200)
    assert table.shape == (200, 2 * 4 + 2) and len(cols) == 10
    only = table[:, 5:9]
    zero_rows = np.all(table[:, 1:5] == 0.0, axis=1)
    assert zero_rows.any()
    for row in only[zero_rows]:
        assert np.all(row == row[0])
    scores = impact_scores(cols, table)
    assert sorted(scores) == ["robot_1", "robot_2", "robot_3", "robot_4"]
    assert all(v >= 0 for v in scores.values())


def test_probe_rejects_wrong_width():
    with pytest.raises(ConfigurationError):
        probe_gsp(nn.Mlp.build([3, 1], np.random.default_rng(0)), 4)


# --- training loop ------------------------------------------------------------------

def _episode(mode, desk_arena, n=4, seed=0, max_steps=5):
    arena = dataclasses.replace(desk_arena, max_steps=max_steps)
    hp = Hyperparams(ac_hidden=(8,), batch=4)
    rng = np.random.default_rng(seed)
    agent = make_agent("td3", policy_input_width(mode, n), hp, rng)
    buf = ReplayBuffer(1000, agent.input_width, 2)
    gsp = GspModel(n, rng, hidden=(8,), batch=4) if mode == "gsp" else None
    state = reset(arena, ObstacleSuite.TWO_CYLINDERS, n, seed=seed)
    return run_episode_actde(agent, state, mode, True, rng, buf, gsp), buf, gsp


@pytest.mark.parametrize("n", [1, 4, 8])
def test_one_transition_per_robot_per_step(desk_arena, n):
    rep, buf, _ = _episode("ic", desk_arena, n=n)
    assert rep.steps == 5
    assert len(buf) == rep.transitions == 5 * n


def test_gsp_loop_reports_one_real_per_robot(desk_arena):
    rep, buf, gsp = _episode("gsp", desk_arena)
    assert rep.messages_per_step == 4
    assert len(gsp.buffer) == 5
    assert buf.obs.shape[1] == 32


def test_gsp_ground_truth_matches_simulator(desk_arena):
    arena = dataclasses.replace(desk_arena, max_steps=6)
    rng = np.random.default_rng(0)
    agent = make_agent("td3", 32, Hyperparams(ac_hidden=(8,)), rng)
    gsp = GspModel(4, rng, hidden=(8,), batch=1000)
    state = reset(arena, ObstacleSuite.TWO_CYLINDERS, 4, seed=3)
    rep = run_episode_actde(agent, state, "gsp", False, rng, None, gsp, record=True, train_gsp=True)
    truth = [entry["outcome"].aggregate_dtheta for entry in rep.trajectory]
    np.testing.assert_array_equal(gsp.buffer.true[:len(truth)], truth)


def test_ic_loop_builds_no_messages(desk_arena):
    rep, _, gsp = _episode("ic", desk_arena)
    assert rep.messages_per_step == 0 and gsp is None


def test_width_mismatch_is_rejected(desk_arena):
    rng = np.random.default_rng(0)
    agent = make_agent("td3", 31, Hyperparams(ac_hidden=(8,)), rng)
    state = reset(desk_arena, ObstacleSuite.NONE, 4, seed=0)
    with pytest.raises(ConfigurationError):
        run_episode_actde(agent, state, "gsp", False, rng, gsp=GspModel(4, rng, hidden=(4,)))
