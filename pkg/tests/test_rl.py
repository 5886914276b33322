import numpy as np
import pytest

from aggrl import nn
from aggrl.errors import ConfigurationError, ContractViolation
from aggrl.nn import Activation, LayerSpec, Mlp
from aggrl.rl import (ActionCodec, Batch, DdpgAgent, Hyperparams, InsufficientData, QAgent,
                      ReplayBuffer, Td3Agent, Transition, actor_update, ddqn_target, dqn_target,
                      epsilon, learn_step_q, learn_step_td3, load_checkpoint, make_agent,
                      read_checkpoint_meta, save_checkpoint, select_action_continuous,
                      select_action_discrete, td3_target)


def linear_net(weights, bias, act=Activation.IDENTITY):
    w = np.asarray(weights, dtype=float)
    return Mlp([LayerSpec(w.shape[0], w.shape[1], act)], [w], [np.asarray(bias, dtype=float)])


# --- epsilon / action table ------------------------------------------------------

def test_epsilon_schedule():
    assert epsilon(0) == 1.0
    assert epsilon(500_000) == 0.5
    assert epsilon(10 ** 9) == 0.01
    assert epsilon(990_000) == pytest.approx(0.01)


def test_action_codec_round_trip():
    assert ActionCodec.table.shape == (9, 2)
    for i in range(9):
        assert ActionCodec.encode(ActionCodec.decode(i)) == i
    np.testing.assert_array_equal(ActionCodec.decode(4), [0.0, 0.0])
    with pytest.raises(ContractViolation):
        ActionCodec.encode([0.05, 0.0])


# --- action selection --------------------------------------------------------------

def _qagent(input_width=3, **hp):
    return QAgent(input_width, Hyperparams(q_hidden=(4,), **hp), np.random.default_rng(0))


def test_discrete_greedy_picks_argmax():
    agent = _qagent()
    agent.online = linear_net(np.zeros((3, 9)), [0, 0, 0, 0, 0, 0, 3.0, 0, 0])
    assert select_action_discrete(agent, np.zeros(3), 0.0, np.random.default_rng(0)) == 6


def test_discrete_ties_break_to_lowest_index():
    agent = _qagent()
    agent.online = linear_net(np.zeros((3, 9)), [0, 1.0, 0, 1.0, 0, 0, 0, 0, 1.0])
    assert select_action_discrete(agent, np.zeros(3), 0.0, np.random.default_rng(0)) == 1


def test_discrete_full_epsilon_is_uniform():
    agent = _qagent()
    rng = np.random.default_rng(1)
    counts = np.bincount([select_action_discrete(agent, np.zeros(3), 1.0, rng)
                          for _ in range(9000)], minlength=9)
    expected = 9000 / 9
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 20.09  # chi-square 99th percentile, 8 degrees of freedom


def _ddpg(input_width=3, **hp):
    return DdpgAgent(input_width, Hyperparams(ac_hidden=(4,), **hp), np.random.default_rng(0))


def test_continuous_without_exploration_is_actor_output():
    agent = _ddpg()
    obs = np.array([0.2, -0.1, 0.5])
    expected = 0.1 * nn.forward(agent.actor, obs)
    a = select_action_continuous(agent, obs, False, np.random.default_rng(0))
    np.testing.assert_allclose(a, expected, rtol=0, atol=0)


def test_continuous_exploration_stays_in_bounds():
    agent = _ddpg(explore_sigma=1.0)
    rng = np.random.default_rng(0)
    acts = np.array([select_action_continuous(agent, np.zeros(3), True, rng) for _ in range(500)])
    assert np.all(np.abs(acts) <= 0.1)
    assert np.any(acts == 0.1) and np.any(acts == -0.1)


# --- replay buffer -----------------------------------------------------------------

def test_buffer_ring_overwrites_oldest():
    buf = ReplayBuffer(2, 1)
    for k in range(3):
        buf.push(Transition(np.array([k]), k, float(k), np.array([k + 1]), False))
    assert len(buf) == 2
    assert buf.transition(0).reward == 1.0 and buf.transition(1).reward == 2.0


def test_buffer_sample_before_batch_raises():
    buf = ReplayBuffer(10, 1)
    buf.push(Transition(np.zeros(1), 0, 0.0, np.zeros(1), False))
    with pytest.raises(InsufficientData):
        buf.sample(5, np.random.default_rng(0))


def test_buffer_sample_shapes():
    buf = ReplayBuffer(100, 3, 2)
    rng = np.random.default_rng(0)
    buf.push_many(rng.normal(size=(10, 3)), rng.normal(size=(10, 2)), np.arange(10.0),
                  rng.normal(size=(10, 3)), np.zeros(10, bool))
    b = buf.sample(7, rng)
    assert b.obs.shape == (7, 3) and b.actions.shape == (7, 2) and b.rewards.shape == (7,)


def test_buffer_rejects_wrong_width():
    buf = ReplayBuffer(10, 3)
    with pytest.raises(ContractViolation):
        buf.push_many(np.zeros((2, 4)), [0, 0], [0, 0], np.zeros((2, 4)), [False, False])


# --- targets -----------------------------------------------------------------------

def _batch(next_obs, rewards, dones, obs=None, actions=None):
    next_obs = np.asarray(next_obs, dtype=float)
    return Batch(np.zeros_like(next_obs) if obs is None else obs,
                 np.zeros(len(rewards), int) if actions is None else actions,
                 np.asarray(rewards, float), next_obs, np.asarray(dones, bool))


def test_terminal_target_is_reward_exactly():
    agent = _qagent(input_width=1)
    agent.target = linear_net([[1.0] * 9], [5.0] * 9)
    y = dqn_target(agent, _batch([[2.0]], [-1.5], [True]), 0.9)
    assert y[0] == -1.5


def test_double_dqn_decouples_selection_from_evaluation():
    agent = _qagent(input_width=1)
    online_bias = np.zeros(9)
    online_bias[2] = 1.0          # online prefers action 2
    target_bias = np.zeros(9)
    target_bias[2], target_bias[7] = -3.0, 10.0
    agent.online = linear_net(np.zeros((1, 9)), online_bias)
    agent.target = linear_net(np.zeros((1, 9)), target_bias)
    b = _batch([[0.0]], [1.0], [False])
    assert dqn_target(agent, b, 0.5)[0] == 1.0 + 0.5 * 10.0
    assert ddqn_target(agent, b, 0.5)[0] == 1.0 + 0.5 * -3.0


def test_td3_target_uses_smaller_critic():
    agent = Td3Agent(1, Hyperparams(ac_hidden=(4,)), np.random.default_rng(0))
    agent.actor_target = linear_net(np.zeros((1, 2)), [0.5, -0.5], Activation.TANH)
    agent.critic_target = linear_net([[1.0], [0.0], [0.0]], [2.0])
    agent.critic2_target = linear_net([[1.0], [0.0], [0.0]], [1.0])
    b = _batch([[1.0]], [-2.0], [False])
    y = td3_target(agent, b, 0.9, None, 0.2, 0.5)
    assert y[0] == -2.0 + 0.9 * 2.0


def test_td3_smoothing_noise_is_clipped():
    agent = Td3Agent(1, Hyperparams(ac_hidden=(4,)), np.random.default_rng(0))
    agent.actor_target = linear_net(np.zeros((1, 2)), [0.0, 0.0], Activation.TANH)
    # Critic value equals the first smoothed action component.
    agent.critic_target = linear_net([[0.0], [1.0], [0.0]], [0.0])
    agent.critic2_target = agent.critic_target.copy()
    b = _batch(np.zeros((2000, 1)), np.zeros(2000), np.zeros(2000, bool))
    y = td3_target(agent, b, 1.0, np.random.default_rng(0), noise=10.0, noise_clip=0.5)
    assert y.max() == 0.5 and y.min() == -0.5


# --- learning ----------------------------------------------------------------------

def _filled_buffer(width, n, discrete=True, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(1000, width, None if discrete else 2)
    acts = rng.integers(0, 9, n) if discrete else rng.uniform(-0.1, 0.1, (n, 2))
    buf.push_many(rng.normal(size=(n, width)), acts, rng.normal(size=n),
                  rng.normal(size=(n, width)), rng.random(n) < 0.1)
    return buf


def test_dqn_target_syncs_every_period():
    hp = Hyperparams(q_hidden=(4,), batch=8, target_sync_every=5)
    agent = QAgent(3, hp, np.random.default_rng(0))
    buf = _filled_buffer(3, 50)
    rng = np.random.default_rng(1)
    for k in range(1, 12):
        learn_step_q(agent, buf, hp, rng)
        same = np.array_equal(agent.online.flat(), agent.target.flat())
        assert same == (k % 5 == 0)


def test_td3_actor_waits_for_policy_delay():
    hp = Hyperparams(ac_hidden=(4,), batch=8, policy_delay=2)
    agent = Td3Agent(3, hp, np.random.default_rng(0))
    buf = _filled_buffer(3, 50, discrete=False)
    rng = np.random.default_rng(1)
    before = agent.actor.flat().copy()
    _, obj = learn_step_td3(agent, buf, hp, rng)
    assert obj is None and np.array_equal(agent.actor.flat(), before)
    _, obj = learn_step_td3(agent, buf, hp, rng)
    assert obj is not None and not np.array_equal(agent.actor.flat(), before)


def test_actor_moves_toward_critic_optimum():
    rng = np.random.default_rng(0)
    actor = Mlp.build([2, 8, 2], rng, output=Activation.TANH)
    opt = nn.AdamState.for_net(actor, 1e-2)
    target = np.array([0.3, -0.6])

    def quadratic(obs, a):
        return -np.sum((a - target) ** 2, axis=1), -2.0 * (a - target)

    obs = rng.normal(size=(32, 2))
    for _ in range(500):
        actor_update(actor, opt, obs, quadratic)
    np.testing.assert_allclose(nn.forward(actor, obs), np.tile(target, (32, 1)), atol=0.02)


@pytest.mark.parametrize("algo", ["dqn", "ddqn", "ddpg", "td3"])
def test_learn_returns_finite_loss(algo):
    hp = Hyperparams(q_hidden=(8,), ac_hidden=(8,), batch=16)
    agent = make_agent(algo, 5, hp, np.random.default_rng(0))
    buf = _filled_buffer(5, 40, discrete=agent.discrete)
    info = agent.learn(buf, np.random.default_rng(0))
    assert np.isfinite(info["loss"])


def test_unknown_algorithm():
    with pytest.raises(ConfigurationError):
        make_agent("sac", 3, Hyperparams(), np.random.default_rng(0))


def test_hyperparams_reject_unknown_keys():
    with pytest.raises(ConfigurationError):
        Hyperparams.from_dict({"gama": 0.9})


# --- checkpoints --------------------------------------------------------------------

@pytest.mark.parametrize("algo", ["ddqn", "td3"])
def test_checkpoint_round_trip(tmp_path, algo):
    hp = Hyperparams(q_hidden=(8,), ac_hidden=(8,), batch=16)
    agent = make_agent(algo, 5, hp, np.random.default_rng(0))
    buf = _filled_buffer(5, 40, discrete=agent.discrete)
    for _ in range(3):
        agent.learn(buf, np.random.default_rng(0))
    path = save_checkpoint(agent, tmp_path / "c.zip", {"mode": "ic"})
    back, meta = load_checkpoint(path)
    assert meta["extra"]["mode"] == "ic" and read_checkpoint_meta(path)["algorithm"] == algo
    for name, net in agent.networks().items():
        np.testing.assert_array_equal(back.networks()[name].flat(), net.flat())
    assert back.learn_counter == agent.learn_counter
    # Identical continuation after reload.
    agent.learn(buf, np.random.default_rng(5))
    back.learn(buf, np.random.default_rng(5))
    for name, net in agent.networks().items():
        np.testing.assert_array_equal(back.networks()[name].flat(), net.flat())
