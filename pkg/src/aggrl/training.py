"""A-CTDE episode loop: one shared policy, one shared replay buffer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coordination import (MESSAGE_SIZE, CoordinationMode, GspModel, GspRecord, augment_all,
                           gsp_reward, policy_input_width, proximity_broadcast)
from .errors import ConfigurationError, ContractViolation
from .rl import ActionCodec, ReplayBuffer
from .world import WorldState, observe_all, step


@dataclass
class EpisodeReport:
    success: bool
    steps: int
    returns: np.ndarray
    transitions: int = 0
    mean_loss: float = float("nan")
    gsp_loss: float = float("nan")
    failures: int = 0
    messages_per_step: int = 0
    trajectory: list = field(default_factory=list, repr=False)


def _gsp_prediction(gsp: Optional[GspModel], broadcast: np.ndarray) -> float:
    if gsp is None:
        raise ConfigurationError("GSP mode needs a GspModel")
    if broadcast.ndim != 1:
        raise ContractViolation("each robot broadcasts exactly one real")
    return gsp.predict(broadcast)


def run_episode_actde(agent, state: WorldState, mode, train: bool, rng: np.random.Generator,
                      buffer: Optional[ReplayBuffer] = None, gsp: Optional[GspModel] = None,
                      record: bool = False, train_gsp: Optional[bool] = None) -> EpisodeReport:
    """Roll one episode from ``state``.

    Each step: build (augmented) observations for attached robots, query the
    shared policy once per robot, step the world, store one transition per
    robot that stayed attached, then run one learning iteration. With
    ``train=False`` nothing learnable is touched and exploration is off.
    ``record=True`` keeps a per-step log for trajectory CSVs.
    """
    mode = CoordinationMode(mode)
    n = state.aggregate.n_robots
    width = policy_input_width(mode, n)
    if agent.input_width != width:
        raise ConfigurationError(
            f"policy takes {agent.input_width} inputs but mode {mode.value} with {n} robots gives {width}")
    if train and buffer is None:
        raise ConfigurationError("training needs a replay buffer")
    if train_gsp is None:
        train_gsp = train
    obs = observe_all(state)
    attached = state.aggregate.attached
    pred = None
    P = None
    if mode is CoordinationMode.GSP:
        P = proximity_broadcast(obs, attached)
        pred = _gsp_prediction(gsp, P)
    aug = augment_all(obs, mode, state, pred)
    returns = np.zeros(n)
    losses, gsp_losses, log = [], [], []
    transitions = 0
    while True:
        mask = state.aggregate.attached
        actions = np.zeros((n, 2))
        stored = None
        if mask.any():
            chosen = agent.act(aug[mask], rng, explore=train)
            if agent.discrete:
                stored = chosen
                actions[mask] = ActionCodec.decode(chosen)
            else:
                stored = chosen
                actions[mask] = chosen
        new_state, out = step(state, actions)
        obs2 = out.observations
        if mode is CoordinationMode.GSP:
            P2 = proximity_broadcast(obs2, out.attached)
            pred2 = _gsp_prediction(gsp, P2)
        else:
            P2 = pred2 = None
        aug2 = augment_all(obs2, mode, new_state, pred2)
        alive = out.attached
        returns[alive] += out.rewards[alive]
        if train:
            keep = alive[mask]
            terminal = out.success if agent.hp.bootstrap_timeouts else out.done
            buffer.push_many(aug[mask][keep], stored[keep], out.rewards[alive],
                             aug2[alive], np.full(int(keep.sum()), terminal))
            transitions += int(keep.sum())
            info = agent.learn(buffer, rng)
            if info is not None:
                losses.append(info["loss"])
        if mode is CoordinationMode.GSP and train_gsp:
            gsp.buffer.push(GspRecord(P, pred, gsp_reward(pred, out.aggregate_dtheta), P2,
                                      out.done, out.aggregate_dtheta))
            gl = gsp.train_step(rng)
            if gl is not None:
                gsp_losses.append(gl)
        if record:
            log.append({"state": new_state, "actions": actions, "outcome": out})
        state, aug, P, pred = new_state, aug2, P2, pred2
        if out.done:
            break
    failed = int(np.sum(~state.aggregate.attached))
    return EpisodeReport(
        success=out.success, steps=state.step_index, returns=returns, transitions=transitions,
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        gsp_loss=float(np.mean(gsp_losses)) if gsp_losses else float("nan"),
        failures=failed, messages_per_step=MESSAGE_SIZE[mode] * n, trajectory=log)
