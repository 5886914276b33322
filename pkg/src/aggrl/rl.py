"""DQN, DDQN, DDPG and TD3 over a shared replay buffer.

Every robot queries the same policy on its own observation and every
robot's experience lands in the same buffer; learning runs once per world
step. Continuous actions are wheel-speed increments in cm/s; internally the
actor emits tanh outputs in [-1, 1] and the critics see that normalized
action, so ``action = action_scale * actor(obs)``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import nn
from .errors import ConfigurationError, ContractViolation, TrainingDivergenceError
from .nn import Activation, AdamState, Mlp

DISCRETE_LEVELS = (-0.1, 0.0, 0.1)
N_DISCRETE = len(DISCRETE_LEVELS) ** 2
ALGORITHMS = ("dqn", "ddqn", "ddpg", "td3")


@dataclass
class Hyperparams:
    gamma: float = 0.99997
    lr: float = 1e-4
    batch: int = 100
    buffer_capacity: int = 10 ** 6
    eps_start: float = 1.0
    eps_decay: float = 1e-6
    eps_min: float = 0.01
    target_sync_every: int = 1000
    q_hidden: tuple = (64, 128)
    ac_hidden: tuple = (400, 300)
    tau: float = 0.001
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    explore_sigma: float = 0.01
    policy_delay: int = 2
    # Smoothing noise and its clip, in normalized action units (x action_scale = cm/s).
    target_noise: float = 0.2
    noise_clip: float = 0.5
    action_scale: float = 0.1
    # When true, transitions that end only because the step budget ran out
    # keep bootstrapping (done=False); true terminals are goal arrivals.
    bootstrap_timeouts: bool = False

    def __post_init__(self):
        self.q_hidden = tuple(int(h) for h in self.q_hidden)
        self.ac_hidden = tuple(int(h) for h in self.ac_hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("tau must lie in (0, 1]")
        if self.eps_min > self.eps_start:
            raise ConfigurationError("eps_min must not exceed eps_start")
        if self.batch < 1 or self.policy_delay < 1 or self.target_sync_every < 1:
            raise ConfigurationError("batch, policy_delay and target_sync_every must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown hyperparameters {sorted(unknown)}")
        return cls(**d)


class ActionCodec:
    """Index <-> (dv_left, dv_right) table over {-0.1, 0, 0.1}^2, row-major."""

    table = np.array([(a, b) for a in DISCRETE_LEVELS for b in DISCRETE_LEVELS])
    bound = 0.1

    @classmethod
    def decode(cls, index):
        return cls.table[np.asarray(index, dtype=np.int64)]

    @classmethod
    def encode(cls, dv) -> int:
        hits = np.nonzero(np.all(np.isclose(cls.table, np.asarray(dv, dtype=np.float64)), axis=1))[0]
        if len(hits) != 1:
            raise ContractViolation(f"{dv} is not in the discrete action table")
        return int(hits[0])


def epsilon(count: int, start: float = 1.0, decay: float = 1e-6, minimum: float = 0.01) -> float:
    """Linearly decayed exploration rate after ``count`` action selections."""
    if count < 0:
        raise ContractViolation("selection count must be >= 0")
    return max(minimum, start - decay * count)


# --- replay -----------------------------------------------------------------

@dataclass
class Transition:
    obs: np.ndarray
    action: object
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.rewards)


class ReplayBuffer:
    """Fixed-capacity ring of transitions; sampling is uniform with replacement."""

    def __init__(self, capacity: int, obs_width: int, action_dim: Optional[int] = None):
        if capacity < 1:
            raise ConfigurationError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs_width = int(obs_width)
        self.action_dim = action_dim
        ashape = (self.capacity,) if action_dim is None else (self.capacity, action_dim)
        self.obs = np.zeros((self.capacity, obs_width))
        self.next_obs = np.zeros((self.capacity, obs_width))
        self.actions = np.zeros(ashape, dtype=np.int64 if action_dim is None else np.float64)
        self.rewards = np.zeros(self.capacity)
        self.dones = np.zeros(self.capacity, dtype=bool)
        self.size = 0
        self.cursor = 0
        self.pushed = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition):
        self.push_many(np.asarray(t.obs)[None], np.asarray(t.action)[None], [t.reward],
                       np.asarray(t.next_obs)[None], [t.done])

    def push_many(self, obs, actions, rewards, next_obs, dones):
        obs = np.asarray(obs, dtype=np.float64)
        next_obs = np.asarray(next_obs, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != self.obs_width or next_obs.shape != obs.shape:
            raise ContractViolation(
                f"observations must be (k, {self.obs_width}), got {obs.shape} / {next_obs.shape}")
        k = len(obs)
        idx = (self.cursor + np.arange(k)) % self.capacity
        self.obs[idx] = obs
        self.next_obs[idx] = next_obs
        self.actions[idx] = actions
        self.rewards[idx] = rewards
        self.dones[idx] = dones
        self.cursor = int((self.cursor + k) % self.capacity)
        self.size = min(self.capacity, self.size + k)
        self.pushed += k

    def ready(self, batch: int) -> bool:
        return self.size >= batch

    def sample(self, batch: int, rng: np.random.Generator) -> Batch:
        if not self.ready(batch):
            raise InsufficientData(f"buffer holds {self.size} < {batch} transitions")
        idx = rng.integers(0, self.size, batch)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx],
                     self.next_obs[idx], self.dones[idx])

    def transition(self, i: int) -> Transition:
        """The ``i``-th oldest stored transition."""
        j = (self.cursor - self.size + i) % self.capacity
        return Transition(self.obs[j].copy(), self.actions[j].copy(), float(self.rewards[j]),
                          self.next_obs[j].copy(), bool(self.dones[j]))


class InsufficientData(LookupError):
    """Raised by ``sample`` before the buffer holds one batch; callers skip learning."""


# --- agents -----------------------------------------------------------------

class QAgent:
    """DQN, or DDQN when ``double`` is set."""

    def __init__(self, input_width: int, hp: Hyperparams, rng: np.random.Generator,
                 double: bool = False):
        self.hp = hp
        self.double = double
        widths = [input_width, *hp.q_hidden, N_DISCRETE]
        self.online = Mlp.build(widths, rng)
        self.target = self.online.copy()
        self.opt = AdamState.for_net(self.online, hp.lr)
        self.learn_counter = 0
        self.selections = 0

    @property
    def algorithm(self) -> str:
        return "ddqn" if self.double else "dqn"

    @property
    def input_width(self) -> int:
        return self.online.input_width

    discrete = True

    def networks(self) -> dict:
        return {"online": self.online, "target": self.target}

    def optimizers(self) -> dict:
        return {"online": self.opt}

    def current_epsilon(self) -> float:
        return epsilon(self.selections, self.hp.eps_start, self.hp.eps_decay, self.hp.eps_min)

    def act(self, obs, rng: np.random.Generator, explore: bool = True) -> np.ndarray:
        """Action indices for a ``(k, width)`` observation batch."""
        obs = np.atleast_2d(obs)
        eps = self.current_epsilon() if explore else 0.0
        out = select_actions_discrete(self, obs, eps, rng)
        if explore:
            self.selections += len(obs)
        return out

    def learn(self, buffer: ReplayBuffer, rng: np.random.Generator):
        if not buffer.ready(self.hp.batch):
            return None
        return {"loss": learn_step_q(self, buffer, self.hp, rng)}


def _critic_input(obs, action_norm):
    return np.concatenate([obs, action_norm], axis=-1)


class DdpgAgent:
    discrete = False
    algorithm = "ddpg"

    def __init__(self, input_width: int, hp: Hyperparams, rng: np.random.Generator):
        self.hp = hp
        self.actor = Mlp.build([input_width, *hp.ac_hidden, 2], rng, output=Activation.TANH)
        self.actor_target = self.actor.copy()
        self.critic = Mlp.build([input_width + 2, *hp.ac_hidden, 1], rng)
        self.critic_target = self.critic.copy()
        self.actor_opt = AdamState.for_net(self.actor, hp.actor_lr)
        self.critic_opt = AdamState.for_net(self.critic, hp.critic_lr)
        self.learn_counter = 0
        self.selections = 0

    @property
    def input_width(self) -> int:
        return self.actor.input_width

    def networks(self) -> dict:
        return {"actor": self.actor, "actor_target": self.actor_target,
                "critic": self.critic, "critic_target": self.critic_target}

    def optimizers(self) -> dict:
        return {"actor": self.actor_opt, "critic": self.critic_opt}

    def current_epsilon(self) -> float:
        return 0.0

    def act(self, obs, rng: np.random.Generator, explore: bool = True) -> np.ndarray:
        obs = np.atleast_2d(obs)
        if explore:
            self.selections += len(obs)
        return select_actions_continuous(self, obs, explore, rng)

    def learn(self, buffer: ReplayBuffer, rng: np.random.Generator):
        if not buffer.ready(self.hp.batch):
            return None
        critic_loss, objective = learn_step_ddpg(self, buffer, self.hp, rng)
        return {"loss": critic_loss, "actor_objective": objective}


class Td3Agent(DdpgAgent):
    algorithm = "td3"

    def __init__(self, input_width: int, hp: Hyperparams, rng: np.random.Generator):
        super().__init__(input_width, hp, rng)
        self.critic2 = Mlp.build([input_width + 2, *hp.ac_hidden, 1], rng)
        self.critic2_target = self.critic2.copy()
        self.critic2_opt = AdamState.for_net(self.critic2, hp.critic_lr)

    def networks(self) -> dict:
        nets = super().networks()
        nets.update(critic2=self.critic2, critic2_target=self.critic2_target)
        return nets

    def optimizers(self) -> dict:
        opts = super().optimizers()
        opts["critic2"] = self.critic2_opt
        return opts

    def learn(self, buffer: ReplayBuffer, rng: np.random.Generator):
        if not buffer.ready(self.hp.batch):
            return None
        loss, objective = learn_step_td3(self, buffer, self.hp, rng)
        return {"loss": loss, "actor_objective": objective}


def make_agent(algorithm: str, input_width: int, hp: Hyperparams, rng: np.random.Generator):
    algorithm = algorithm.lower()
    if algorithm == "dqn":
        return QAgent(input_width, hp, rng)
    if algorithm == "ddqn":
        return QAgent(input_width, hp, rng, double=True)
    if algorithm == "ddpg":
        return DdpgAgent(input_width, hp, rng)
    if algorithm == "td3":
        return Td3Agent(input_width, hp, rng)
    raise ConfigurationError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")


# --- action selection ---------------------------------------------------------

def select_actions_discrete(agent: QAgent, obs, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Epsilon-greedy indices; greedy ties go to the lowest index."""
    obs = np.atleast_2d(obs)
    greedy = np.argmax(nn.forward(agent.online, obs), axis=1)
    if eps <= 0.0:
        return greedy
    explore = rng.random(len(obs)) < eps
    rand = rng.integers(0, N_DISCRETE, len(obs))
    return np.where(explore, rand, greedy)


def select_action_discrete(agent: QAgent, obs, eps: float, rng: np.random.Generator) -> int:
    return int(select_actions_discrete(agent, np.asarray(obs)[None], eps, rng)[0])


def select_actions_continuous(agent: DdpgAgent, obs, explore: bool,
                              rng: np.random.Generator) -> np.ndarray:
    """Scaled tanh actor output, plus clipped Gaussian noise when exploring."""
    scale = agent.hp.action_scale
    a = scale * nn.forward(agent.actor, np.atleast_2d(obs))
    if explore:
        a = a + rng.normal(0.0, agent.hp.explore_sigma, a.shape)
    return np.clip(a, -scale, scale)


def select_action_continuous(agent: DdpgAgent, obs, explore: bool,
                             rng: np.random.Generator) -> np.ndarray:
    return select_actions_continuous(agent, np.asarray(obs)[None], explore, rng)[0]


# --- targets ----------------------------------------------------------------

def _bootstrap(rewards, dones, gamma, next_values):
    rewards = np.asarray(rewards, dtype=np.float64)
    return np.where(np.asarray(dones, dtype=bool), rewards, rewards + gamma * next_values)


def dqn_target(agent: QAgent, batch: Batch, gamma: float) -> np.ndarray:
    q_next = nn.forward(agent.target, batch.next_obs)
    return _bootstrap(batch.rewards, batch.dones, gamma, q_next.max(axis=1))


def ddqn_target(agent: QAgent, batch: Batch, gamma: float) -> np.ndarray:
    choice = np.argmax(nn.forward(agent.online, batch.next_obs), axis=1)
    q_next = nn.forward(agent.target, batch.next_obs)
    return _bootstrap(batch.rewards, batch.dones, gamma, q_next[np.arange(len(choice)), choice])


def ddpg_target(agent: DdpgAgent, batch: Batch, gamma: float) -> np.ndarray:
    a_next = nn.forward(agent.actor_target, batch.next_obs)
    q_next = nn.forward(agent.critic_target, _critic_input(batch.next_obs, a_next))[:, 0]
    return _bootstrap(batch.rewards, batch.dones, gamma, q_next)


def td3_target(agent: Td3Agent, batch: Batch, gamma: float, rng: Optional[np.random.Generator],
               noise: float, noise_clip: float) -> np.ndarray:
    """Clipped double-Q target with smoothed target actions.

    ``rng=None`` disables the smoothing noise.
    """
    a_next = nn.forward(agent.actor_target, batch.next_obs)
    if rng is not None and noise > 0:
        eps = np.clip(rng.normal(0.0, noise, a_next.shape), -noise_clip, noise_clip)
        a_next = np.clip(a_next + eps, -1.0, 1.0)
    x = _critic_input(batch.next_obs, a_next)
    q1 = nn.forward(agent.critic_target, x)[:, 0]
    q2 = nn.forward(agent.critic2_target, x)[:, 0]
    return _bootstrap(batch.rewards, batch.dones, gamma, np.minimum(q1, q2))


# --- learning steps -----------------------------------------------------------

def _check_loss(loss: float) -> float:
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss {loss}")
    return loss


def _regress(net: Mlp, opt: AdamState, x, y) -> float:
    """One Adam step on the MSE between a single-output net and ``y``."""
    trace = nn.forward_trace(net, x)
    loss, g = nn.mse_loss_grad(trace[-1][:, 0], y)
    _check_loss(loss)
    grad, _ = nn.backward(net, x, g[:, None], trace)
    nn.adam_step(net, opt, grad)
    return loss


def learn_step_q(agent: QAgent, buffer: ReplayBuffer, hp: Hyperparams,
                 rng: np.random.Generator) -> float:
    batch = buffer.sample(hp.batch, rng)
    target_fn = ddqn_target if agent.double else dqn_target
    y = target_fn(agent, batch, hp.gamma)
    trace = nn.forward_trace(agent.online, batch.obs)
    rows = np.arange(len(batch))
    loss, g = nn.mse_loss_grad(trace[-1][rows, batch.actions], y)
    _check_loss(loss)
    out_grad = np.zeros_like(trace[-1])
    out_grad[rows, batch.actions] = g
    grad, _ = nn.backward(agent.online, batch.obs, out_grad, trace)
    nn.adam_step(agent.online, agent.opt, grad)
    agent.learn_counter += 1
    if agent.learn_counter % hp.target_sync_every == 0:
        nn.hard_copy(agent.online, agent.target)
    return loss


def critic_action_gradient(critic: Mlp) -> Callable:
    """dQ/da (normalized action) for each row, using the critic's input gradient."""
    def grad_fn(obs, action_norm):
        x = _critic_input(obs, action_norm)
        trace = nn.forward_trace(critic, x)
        _, gin = nn.backward(critic, x, np.ones_like(trace[-1]), trace, param_grads=False)
        return trace[-1][:, 0], gin[:, obs.shape[1]:]
    return grad_fn


def actor_update(actor: Mlp, opt: AdamState, obs, action_gradient: Callable) -> float:
    """Ascend ``mean Q(obs, actor(obs))`` by chaining dQ/da through the actor.

    ``action_gradient(obs, a)`` returns ``(q_values, dq_da)`` for normalized
    actions ``a``. Returns the objective before the update.
    """
    trace = nn.forward_trace(actor, obs)
    q, dq_da = action_gradient(obs, trace[-1])
    grad, _ = nn.backward(actor, obs, -dq_da / len(obs), trace, param_grads=True)
    nn.adam_step(actor, opt, grad)
    return float(np.mean(q))


def _normalized_actions(batch: Batch, hp: Hyperparams) -> np.ndarray:
    return np.asarray(batch.actions, dtype=np.float64) / hp.action_scale


def learn_step_ddpg(agent: DdpgAgent, buffer: ReplayBuffer, hp: Hyperparams,
                    rng: np.random.Generator):
    batch = buffer.sample(hp.batch, rng)
    y = ddpg_target(agent, batch, hp.gamma)
    loss = _regress(agent.critic, agent.critic_opt,
                    _critic_input(batch.obs, _normalized_actions(batch, hp)), y)
    objective = actor_update(agent.actor, agent.actor_opt, batch.obs,
                             critic_action_gradient(agent.critic))
    nn.soft_update(agent.actor, agent.actor_target, hp.tau)
    nn.soft_update(agent.critic, agent.critic_target, hp.tau)
    agent.learn_counter += 1
    return loss, objective


def learn_step_td3(agent: Td3Agent, buffer: ReplayBuffer, hp: Hyperparams,
                   rng: np.random.Generator):
    batch = buffer.sample(hp.batch, rng)
    y = td3_target(agent, batch, hp.gamma, rng, hp.target_noise, hp.noise_clip)
    x = _critic_input(batch.obs, _normalized_actions(batch, hp))
    loss1 = _regress(agent.critic, agent.critic_opt, x, y)
    loss2 = _regress(agent.critic2, agent.critic2_opt, x, y)
    agent.learn_counter += 1
    objective = None
    if agent.learn_counter % hp.policy_delay == 0:
        objective = actor_update(agent.actor, agent.actor_opt, batch.obs,
                                 critic_action_gradient(agent.critic))
        nn.soft_update(agent.actor, agent.actor_target, hp.tau)
        nn.soft_update(agent.critic, agent.critic_target, hp.tau)
        nn.soft_update(agent.critic2, agent.critic2_target, hp.tau)
    return 0.5 * (loss1 + loss2), objective


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(agent, path, extra: Optional[dict] = None,
                    extra_nets: Optional[dict] = None) -> Path:
    """One zip file: metadata JSON, one weight blob per net, optimizer arrays.

    ``extra_nets`` stores auxiliary networks (the GSP predictor, say) next to
    the agent's own; read them back with :func:`read_extra_net`.
    """
    path = Path(path)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "algorithm": agent.algorithm,
        "input_width": agent.input_width,
        "learn_counter": agent.learn_counter,
        "selections": agent.selections,
        "hyperparams": asdict(agent.hp),
        "extra": extra or {},
        "extra_nets": sorted(extra_nets or {}),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        for name, net in agent.networks().items():
            zf.writestr(f"nets/{name}.bin", nn.dump_mlp(net))
        for name, opt in agent.optimizers().items():
            buf = io.BytesIO()
            np.savez(buf, **nn.adam_to_arrays(opt))
            zf.writestr(f"optim/{name}.npz", buf.getvalue())
        for name, net in (extra_nets or {}).items():
            zf.writestr(f"extra/{name}.bin", nn.dump_mlp(net))
    return path


def read_extra_net(path, name: str) -> Mlp:
    with zipfile.ZipFile(path) as zf:
        if f"extra/{name}.bin" not in zf.namelist():
            raise ConfigurationError(f"checkpoint {path} has no network {name!r}")
        return nn.load_mlp(zf.read(f"extra/{name}.bin"))


def read_checkpoint_meta(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("meta.json"))


def load_checkpoint(path):
    """Rebuild an agent; returns ``(agent, meta)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta.get('format_version')}")
        hp = Hyperparams.from_dict(meta["hyperparams"])
        agent = make_agent(meta["algorithm"], meta["input_width"], hp, np.random.default_rng(0))
        for name in agent.networks():
            net = nn.load_mlp(zf.read(f"nets/{name}.bin"))
            setattr(agent, name, net)
        for name in agent.optimizers():
            arrays = dict(np.load(io.BytesIO(zf.read(f"optim/{name}.npz"))))
            attr = "opt" if name == "online" else f"{name}_opt"
            setattr(agent, attr, nn.adam_from_arrays(getattr(agent, name), arrays))
    agent.learn_counter = int(meta["learn_counter"])
    agent.selections = int(meta["selections"])
    return agent, meta
