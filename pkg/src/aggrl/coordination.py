"""Coordination strategies against non-stationarity.

* IC: no messages; robots only feel each other through the rigid coupling.
* GK: every robot broadcasts its world position and velocity; each robot
  appends everybody else's (4 reals per other robot).
* GSP: every robot broadcasts one real, its mean proximity reading. A shared
  network maps those N values to a predicted change of the aggregate's
  heading over the coming step, and the prediction is appended to every
  robot's observation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .errors import ConfigurationError, ContractViolation, TrainingDivergenceError
from .geometry import wrap_angle
from .nn import AdamState, Mlp
from .rl import _bootstrap, _regress, actor_update, critic_action_gradient
from .world import OBS_WIDTH, Observation, WorldState


class CoordinationMode(str, enum.Enum):
    IC = "ic"
    GK = "gk"
    GSP = "gsp"


# Reals each robot broadcasts per step.
MESSAGE_SIZE = {CoordinationMode.IC: 0, CoordinationMode.GK: 4, CoordinationMode.GSP: 1}


def augmentation_width(mode, n_robots: int) -> int:
    mode = CoordinationMode(mode)
    if mode is CoordinationMode.GK:
        return 4 * (n_robots - 1)
    return MESSAGE_SIZE[mode]


def policy_input_width(mode, n_robots: int) -> int:
    return OBS_WIDTH + augmentation_width(mode, n_robots)


def mean_proximity(obs) -> float:
    """Average of the 24 proximity readings of an Observation or 31-vector."""
    if isinstance(obs, Observation):
        p = obs.proximity
    else:
        p = np.asarray(obs, dtype=np.float64)
        p = p[7:31] if p.shape[-1] >= OBS_WIDTH else p
    return float(np.mean(p))


def proximity_broadcast(observations: np.ndarray, attached: np.ndarray) -> np.ndarray:
    """The length-N message vector P; detached robots send 0."""
    readings = np.where(attached[:, None], observations[:, 7:31], 0.0)
    return readings.mean(axis=1)


@dataclass
class GkPacket:
    """Other robots' world positions (m) and velocities (m/s), fixed order."""
    positions: np.ndarray
    velocities: np.ndarray

    def vector(self) -> np.ndarray:
        return np.hstack([self.positions, self.velocities]).ravel()


def gk_table(state: WorldState) -> np.ndarray:
    """``(N, 4)`` rows of ``x, y, vx, vy`` for every robot; detached rows are 0.

    Velocities are finite differences against the previous step, so they are
    zero on the first step.
    """
    agg = state.aggregate
    pos = agg.robot_positions()
    prev = agg.robot_positions(state.prev_pose)
    vel = (pos - prev) / state.arena.step_duration
    table = np.hstack([pos, vel])
    table[~agg.attached] = 0.0
    return table


def build_gk_augmentation(state: WorldState, robot_index: int) -> GkPacket:
    n = state.aggregate.n_robots
    if n < 2:
        raise ConfigurationError("global knowledge needs at least two robots")
    table = gk_table(state)
    others = [j for j in range(n) if j != robot_index]
    return GkPacket(table[others, :2], table[others, 2:])


def augment(obs, mode, extra=None) -> np.ndarray:
    """Append the mode's extra inputs after the 31 base entries."""
    mode = CoordinationMode(mode)
    base = obs.vector() if isinstance(obs, Observation) else np.asarray(obs, dtype=np.float64)
    if base.shape != (OBS_WIDTH,):
        raise ConfigurationError(f"base observation must have {OBS_WIDTH} entries")
    if mode is CoordinationMode.IC:
        if extra is not None and np.size(extra) != 0:
            raise ConfigurationError("implicit communication takes no extra inputs")
        return base.copy()
    if mode is CoordinationMode.GSP:
        extra = np.atleast_1d(np.asarray(extra, dtype=np.float64))
        if extra.shape != (1,):
            raise ConfigurationError("GSP appends exactly one prediction")
        return np.concatenate([base, extra])
    vec = extra.vector() if isinstance(extra, GkPacket) else np.asarray(extra, dtype=np.float64).ravel()
    if vec.size % 4:
        raise ConfigurationError("GK extras come in groups of 4 per robot")
    return np.concatenate([base, vec])


def augment_all(observations: np.ndarray, mode, state: Optional[WorldState] = None,
                prediction: Optional[float] = None) -> np.ndarray:
    """Vectorized :func:`augment` for all robots at once."""
    mode = CoordinationMode(mode)
    n = len(observations)
    if mode is CoordinationMode.IC:
        return observations.copy()
    if mode is CoordinationMode.GSP:
        return np.hstack([observations, np.full((n, 1), float(prediction))])
    table = gk_table(state)
    rows = [np.delete(table, i, axis=0).ravel() for i in range(n)]
    return np.hstack([observations, np.array(rows).reshape(n, -1)])


# --- GSP ------------------------------------------------------------------------

def gsp_reward(dtheta_pred: float, dtheta_true: float) -> float:
    return -abs(wrap_angle(dtheta_pred - dtheta_true))


def gsp_predict(net: Mlp, broadcast) -> float:
    p = np.asarray(broadcast, dtype=np.float64)
    if p.shape != (net.input_width,):
        raise ConfigurationError(f"GSP expects {net.input_width} broadcasts, got {p.shape}")
    return wrap_angle(float(nn.forward(net, p)[0]))


@dataclass
class GspRecord:
    broadcast: np.ndarray
    dtheta_pred: float
    reward: float
    next_broadcast: np.ndarray
    done: bool
    dtheta_true: float


class GspBuffer:
    def __init__(self, capacity: int, n_robots: int):
        self.capacity = int(capacity)
        self.P = np.zeros((self.capacity, n_robots))
        self.P_next = np.zeros((self.capacity, n_robots))
        self.pred = np.zeros(self.capacity)
        self.reward = np.zeros(self.capacity)
        self.done = np.zeros(self.capacity, dtype=bool)
        self.true = np.zeros(self.capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def push(self, rec: GspRecord):
        i = self.cursor
        self.P[i] = rec.broadcast
        self.P_next[i] = rec.next_broadcast
        self.pred[i] = rec.dtheta_pred
        self.reward[i] = rec.reward
        self.done[i] = rec.done
        self.true[i] = rec.dtheta_true
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if self.size < batch:
            raise ContractViolation("GSP buffer not warm")
        return rng.integers(0, self.size, batch)


class GspModel:
    """The prediction network with its optimizer and replay.

    ``training="regression"`` fits the prediction to the observed heading
    change. ``training="ddpg"`` treats the prediction as a continuous action
    scored by the GSP reward and learns it actor-critic style.
    """

    def __init__(self, n_robots: int, rng: np.random.Generator, hidden=(400, 300),
                 lr: float = 1e-4, batch: int = 100, capacity: int = 10 ** 6,
                 training: str = "regression", critic_lr: float = 1e-3, tau: float = 0.001,
                 gamma: float = 0.0, explore_sigma: float = 0.1):
        if training not in ("regression", "ddpg"):
            raise ConfigurationError(f"unknown GSP training mode {training!r}")
        self.n_robots = n_robots
        self.training = training
        self.batch = batch
        self.gamma = gamma
        self.tau = tau
        self.explore_sigma = explore_sigma
        self.net = Mlp.build([n_robots, *hidden, 1], rng)
        self.opt = AdamState.for_net(self.net, lr)
        self.buffer = GspBuffer(capacity, n_robots)
        self.learn_counter = 0
        if training == "ddpg":
            self.critic = Mlp.build([n_robots + 1, *hidden, 1], rng)
            self.critic_target = self.critic.copy()
            self.net_target = self.net.copy()
            self.critic_opt = AdamState.for_net(self.critic, critic_lr)

    def predict(self, broadcast) -> float:
        return gsp_predict(self.net, broadcast)

    def train_step(self, rng: np.random.Generator) -> Optional[float]:
        return gsp_train_step(self, rng)


def gsp_train_step(model: GspModel, rng: np.random.Generator) -> Optional[float]:
    """One learning iteration; ``None`` until the buffer holds a batch."""
    buf = model.buffer
    if len(buf) < model.batch:
        return None
    idx = buf.sample(model.batch, rng)
    P = buf.P[idx]
    if model.training == "regression":
        trace = nn.forward_trace(model.net, P)
        loss, g = nn.mse_loss_grad(trace[-1][:, 0], buf.true[idx])
        if not np.isfinite(loss):
            raise TrainingDivergenceError("GSP regression diverged")
        grad, _ = nn.backward(model.net, P, g[:, None], trace)
        nn.adam_step(model.net, model.opt, grad)
        model.learn_counter += 1
        return loss
    return _gsp_ddpg_step(model, P, idx, rng)


def _gsp_ddpg_step(model: GspModel, P: np.ndarray, idx: np.ndarray,
                   rng: np.random.Generator) -> float:
    buf = model.buffer
    # The reward is a known function of (prediction, truth), so the critic is
    # trained on perturbed predictions rescored against the stored truth.
    actions = wrap_angle(buf.pred[idx] + rng.normal(0.0, model.explore_sigma, len(idx)))
    rewards = -np.abs(wrap_angle(actions - buf.true[idx]))
    if model.gamma > 0:
        Pn = buf.P_next[idx]
        an = nn.forward(model.net_target, Pn)
        qn = nn.forward(model.critic_target, np.hstack([Pn, an]))[:, 0]
        y = _bootstrap(rewards, buf.done[idx], model.gamma, qn)
    else:
        y = rewards
    loss = _regress(model.critic, model.critic_opt, np.hstack([P, actions[:, None]]), y)
    actor_update(model.net, model.opt, P, critic_action_gradient(model.critic))
    nn.soft_update(model.net, model.net_target, model.tau)
    nn.soft_update(model.critic, model.critic_target, model.tau)
    model.learn_counter += 1
    return loss


def probe_gsp(net: Mlp, n_robots: int, samples_per_period: int = 200, frequencies=None):
    """Drive a trained GSP network with clipped sine broadcasts.

    Robot ``i`` sends ``clip(sin(f_i t), 0, 1)`` with ``f_i = i + 1`` by
    default, for ``t`` over one period ``[0, 2pi)``. Returns ``(columns,
    table)`` with columns ``t, P1..PN, pred_only_1..pred_only_N, pred_all``.
    """
    if net.input_width != n_robots:
        raise ConfigurationError(f"network takes {net.input_width} inputs, not {n_robots}")
    f = np.arange(1, n_robots + 1, dtype=np.float64) if frequencies is None else np.asarray(frequencies, float)
    t = np.linspace(0.0, 2.0 * math.pi, samples_per_period, endpoint=False)
    P = np.clip(np.sin(np.outer(t, f)), 0.0, 1.0)
    only = np.empty_like(P)
    for i in range(n_robots):
        single = np.zeros_like(P)
        single[:, i] = P[:, i]
        only[:, i] = wrap_angle(nn.forward(net, single)[:, 0])
    pred_all = wrap_angle(nn.forward(net, P)[:, 0])
    columns = (["t"] + [f"P{i + 1}" for i in range(n_robots)]
               + [f"pred_only_{i + 1}" for i in range(n_robots)] + ["pred_all"])
    return columns, np.column_stack([t, P, only, pred_all])


def impact_scores(columns, table) -> dict:
    """Per-robot spread of the single-channel predictions: max|pred| - min|pred|."""
    out = {}
    for k, name in enumerate(columns):
        if name.startswith("pred_only_"):
            a = np.abs(table[:, k])
            out[f"robot_{name[len('pred_only_'):]}"] = float(a.max() - a.min())
    return out
