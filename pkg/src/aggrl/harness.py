"""Experiment harness: configure, train, evaluate, stress and inspect policies.

Every output file carries the hash of the configuration that produced it.
All randomness flows from ``train_seed`` (training) and ``eval_seed``
(evaluation scenarios and failure schedules). Each stream is a
``SeedSequence([seed, tag, episode])`` with a fixed tag per purpose, so the
scenario for evaluation episode ``i`` depends on ``eval_seed`` and ``i``
alone and two policies evaluated with the same seed face identical scenarios.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .coordination import (CoordinationMode, GspModel, gsp_predict, impact_scores,
                           policy_input_width, probe_gsp)
from .errors import ConfigurationError, TrainingDivergenceError
from .rl import (ALGORITHMS, Hyperparams, ReplayBuffer, load_checkpoint, make_agent,
                 read_checkpoint_meta, read_extra_net, save_checkpoint)
from .trajectory import parse_trajectory, summarize, write_trajectory
from .training import run_episode_actde
from .world import (ArenaConfig, ObstacleSuite, curriculum_gate_width, reset,
                    sample_failure_schedule)

log = logging.getLogger(__name__)

SUITES = ("two_cylinders", "four_cylinders", "gate")

# Stream tags mixed into seed sequences so the streams never collide.
(_SCENARIO, _FAILURES, _RANDOM_POLICY, _TRAIN_SCENARIO, _TRAIN_INIT, _TRAIN_ACT,
 _VALIDATION) = range(7)


@dataclass
class ExperimentConfig:
    """One cell of the experiment grid plus everything needed to rerun it."""
    algorithm: str = "td3"
    mode: str = "ic"
    obstacle_suite: str = "two_cylinders"
    n_robots: int = 4
    episodes: int = 5000
    train_seed: int = 1
    eval_seed: int = 2
    eval_episodes: int = 100
    # Gate curriculum: None starts at the arena height / ends at arena.gate_opening.
    gate_initial: Optional[float] = None
    gate_shrink_every: int = 100
    gate_minimum: Optional[float] = None
    failure_probability: float = 0.25
    failure_max_fraction: float = 0.75
    arena: dict = field(default_factory=dict)
    hyperparams: dict = field(default_factory=dict)
    gsp: dict = field(default_factory=dict)
    # Model selection: every ``validate_every`` training episodes, score the
    # greedy policy on ``validation_episodes`` scenarios drawn from the train
    # seed and keep the best as best.zip. 0 disables it.
    validate_every: int = 0
    validation_episodes: int = 20
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}")
        if self.mode not in {m.value for m in CoordinationMode}:
            raise ConfigurationError(f"mode must be one of {[m.value for m in CoordinationMode]}")
        if self.obstacle_suite not in SUITES:
            raise ConfigurationError(f"obstacle_suite must be one of {SUITES}")
        if self.n_robots < 1:
            raise ConfigurationError("n_robots must be >= 1")
        if self.mode == "gk" and self.n_robots < 2:
            raise ConfigurationError("global knowledge needs at least two robots")
        if self.episodes < 0 or self.eval_episodes < 1:
            raise ConfigurationError("episodes must be >= 0 and eval_episodes >= 1")
        if self.train_seed == self.eval_seed:
            raise ConfigurationError("train_seed and eval_seed must differ")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if self.validate_every < 0 or self.validation_episodes < 1:
            raise ConfigurationError("validate_every must be >= 0 and validation_episodes >= 1")
        self.arena_config()
        self.hp()

    # -- derived objects --

    def arena_config(self) -> ArenaConfig:
        try:
            return ArenaConfig(**self.arena)
        except TypeError as exc:
            raise ConfigurationError(f"bad arena settings: {exc}") from None

    def hp(self) -> Hyperparams:
        return Hyperparams.from_dict(self.hyperparams)

    @property
    def suite(self) -> ObstacleSuite:
        return ObstacleSuite(self.obstacle_suite)

    @property
    def input_width(self) -> int:
        return policy_input_width(self.mode, self.n_robots)

    def gate_width(self, episode: int) -> Optional[float]:
        if self.suite is not ObstacleSuite.GATE:
            return None
        arena = self.arena_config()
        initial = arena.height if self.gate_initial is None else self.gate_initial
        minimum = arena.gate_opening if self.gate_minimum is None else self.gate_minimum
        return curriculum_gate_width(initial, episode, self.gate_shrink_every, minimum)

    # -- serialization --

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Stable digest of every field that affects results."""
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "ExperimentConfig":
        """Read a YAML (or JSON) file; its values win over ``overrides``."""
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a mapping at top level")
        merged = dict(overrides or {})
        merged.update(data)
        return cls.from_dict(merged)

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


@dataclass
class CampaignResult:
    success_rate: float
    episodes: list
    config_hash: str
    checkpoint: Optional[str]
    eval_seed: int
    mean_failures: float = 0.0

    @property
    def successes(self) -> int:
        return sum(e["success"] for e in self.episodes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_episodes(cls, episodes: list, config: ExperimentConfig,
                      checkpoint: Optional[str]) -> "CampaignResult":
        n = len(episodes)
        succ = sum(e["success"] for e in episodes)
        return cls(success_rate=succ / n, episodes=episodes, config_hash=config.config_hash(),
                   checkpoint=checkpoint, eval_seed=config.eval_seed,
                   mean_failures=float(np.mean([e["failures"] for e in episodes])))


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    episodes: int
    success_rate_last_100: float
    best_checkpoint: Optional[Path] = None
    best_validation: Optional[float] = None


# --- seeds ----------------------------------------------------------------------

def scenario_seed(eval_seed: int, episode: int) -> np.random.SeedSequence:
    """Scenario stream for evaluation episode ``episode``; policy independent."""
    return np.random.SeedSequence([eval_seed, _SCENARIO, episode])


def failure_seed(eval_seed: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([eval_seed, _FAILURES, episode])


def _rng(seq) -> np.random.Generator:
    return np.random.default_rng(seq)


# --- policies -------------------------------------------------------------------

class RandomPolicy:
    """Uniform random wheel increments; the untrained baseline."""
    discrete = False
    algorithm = "random"

    def __init__(self, input_width: int, max_delta_v: float = 0.1):
        self.input_width = input_width
        self.max_delta_v = max_delta_v

    def act(self, obs, rng: np.random.Generator, explore: bool = False) -> np.ndarray:
        obs = np.atleast_2d(obs)
        return rng.uniform(-self.max_delta_v, self.max_delta_v, (len(obs), 2))


class FrozenGsp:
    """A trained GSP predictor used for inference only."""

    def __init__(self, net):
        self.net = net

    def predict(self, broadcast) -> float:
        return gsp_predict(self.net, broadcast)


def _make_gsp(config: ExperimentConfig, rng: np.random.Generator) -> Optional[GspModel]:
    if config.mode != "gsp":
        return None
    opts = dict(config.gsp)
    opts.setdefault("capacity", config.hp().buffer_capacity)
    try:
        return GspModel(config.n_robots, rng, **opts)
    except TypeError as exc:
        raise ConfigurationError(f"bad gsp settings: {exc}") from None


def _write_csv(path: Path, header: list, rows: list, config_hash: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _cell(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# --- train ----------------------------------------------------------------------

METRIC_COLUMNS = ["episode", "steps", "return", "success", "epsilon", "loss", "gsp_loss", "gate_width"]


def _checkpoint_extra(config: ExperimentConfig, episodes_done: int) -> dict:
    return {"config": config.to_dict(), "config_hash": config.config_hash(),
            "mode": config.mode, "n_robots": config.n_robots, "episodes_trained": episodes_done}


def cmd_train(config: ExperimentConfig, out_dir) -> TrainResult:
    """Run the A-CTDE loop for ``config.episodes`` episodes.

    Writes ``checkpoint.zip`` and ``metrics.csv`` into ``out_dir``. On a
    non-finite loss the run stops, the last good checkpoint and a
    ``divergence.json`` diagnostic are written, and the error propagates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arena = config.arena_config()
    hp = config.hp()
    init_rng = _rng(np.random.SeedSequence([config.train_seed, _TRAIN_INIT]))
    agent = make_agent(config.algorithm, config.input_width, hp, init_rng)
    gsp = _make_gsp(config, init_rng)
    buffer = ReplayBuffer(hp.buffer_capacity, config.input_width,
                          None if agent.discrete else 2)
    rng = _rng(np.random.SeedSequence([config.train_seed, _TRAIN_ACT]))
    rows, successes, validation = [], [], []
    ckpt = out / "checkpoint.zip"
    best_ckpt, best = None, -1.0
    extra_nets = lambda: {"gsp": gsp.net} if gsp is not None else None  # noqa: E731
    for ep in range(config.episodes):
        width = config.gate_width(ep)
        state = reset(arena, config.suite, config.n_robots,
                      seed=_rng(np.random.SeedSequence([config.train_seed, _TRAIN_SCENARIO, ep])),
                      gate_opening=width)
        try:
            rep = run_episode_actde(agent, state, config.mode, True, rng, buffer, gsp)
        except TrainingDivergenceError as exc:
            save_checkpoint(agent, ckpt, _checkpoint_extra(config, ep), extra_nets())
            diag = {"episode": ep, "error": str(exc), "checkpoint": str(ckpt),
                    "config_hash": config.config_hash()}
            (out / "divergence.json").write_text(json.dumps(diag, indent=2))
            _write_csv(out / "metrics.csv", METRIC_COLUMNS, rows, config.config_hash())
            raise
        successes.append(rep.success)
        rows.append([_cell(v) for v in (ep, rep.steps, float(np.nanmean(rep.returns)), rep.success,
                                        agent.current_epsilon(), rep.mean_loss, rep.gsp_loss, width)])
        if ep % 50 == 49:
            log.info("episode %d: success(last 50) %.2f", ep + 1, np.mean(successes[-50:]))
        if config.validate_every and (ep + 1) % config.validate_every == 0:
            score = validation_success(agent, config, gsp)
            validation.append([ep + 1, _cell(score)])
            log.info("episode %d: validation success %.2f", ep + 1, score)
            if score >= best:
                best, best_ckpt = score, out / "best.zip"
                save_checkpoint(agent, best_ckpt, _checkpoint_extra(config, ep + 1), extra_nets())
    save_checkpoint(agent, ckpt, _checkpoint_extra(config, config.episodes), extra_nets())
    metrics = out / "metrics.csv"
    _write_csv(metrics, METRIC_COLUMNS, rows, config.config_hash())
    if validation:
        _write_csv(out / "validation.csv", ["episodes_trained", "success_rate"], validation,
                   config.config_hash())
    rate = float(np.mean(successes[-100:])) if successes else 0.0
    return TrainResult(ckpt, metrics, config.episodes, rate, best_ckpt,
                       best if best_ckpt is not None else None)


# --- evaluate / resilience ---------------------------------------------------------

def load_policy(checkpoint, config: ExperimentConfig):
    """Agent and (for GSP) predictor from a checkpoint, checked against ``config``."""
    meta = read_checkpoint_meta(checkpoint)
    extra = meta.get("extra", {})
    if extra.get("mode", config.mode) != config.mode:
        raise ConfigurationError(
            f"checkpoint was trained in mode {extra.get('mode')}, config asks for {config.mode}")
    if meta["input_width"] != config.input_width:
        raise ConfigurationError(
            f"checkpoint policy takes {meta['input_width']} inputs; mode {config.mode} with "
            f"{config.n_robots} robots needs {config.input_width}")
    agent, _ = load_checkpoint(checkpoint)
    gsp = None
    if config.mode == "gsp":
        net = read_extra_net(checkpoint, "gsp")
        if net.input_width != config.n_robots:
            raise ConfigurationError(f"GSP network takes {net.input_width} broadcasts, "
                                     f"config has {config.n_robots} robots")
        gsp = FrozenGsp(net)
    return agent, gsp


def _eval_gate_width(config: ExperimentConfig) -> Optional[float]:
    """Frozen policies always face the narrowest curriculum gate."""
    if config.suite is not ObstacleSuite.GATE:
        return None
    return config.arena_config().gate_opening if config.gate_minimum is None else config.gate_minimum


def validation_success(agent, config: ExperimentConfig, gsp=None) -> float:
    """Greedy success rate on the validation stream (train seed, never eval seed)."""
    arena = config.arena_config()
    wins = 0
    for j in range(config.validation_episodes):
        state = reset(arena, config.suite, config.n_robots,
                      seed=_rng(np.random.SeedSequence([config.train_seed, _VALIDATION, j])),
                      gate_opening=_eval_gate_width(config))
        act_rng = _rng(np.random.SeedSequence([config.train_seed, _VALIDATION, j, 1]))
        wins += run_episode_actde(agent, state, config.mode, False, act_rng, gsp=gsp).success
    return wins / config.validation_episodes


def _eval_episode(args):
    policy, gsp, config, i, failures, record = args
    arena = config.arena_config()
    schedule = None
    if failures:
        schedule = sample_failure_schedule(config.n_robots, arena.max_steps,
                                           _rng(failure_seed(config.eval_seed, i)),
                                           config.failure_probability, config.failure_max_fraction)
    state = reset(arena, config.suite, config.n_robots, seed=_rng(scenario_seed(config.eval_seed, i)),
                  gate_opening=_eval_gate_width(config), failure_schedule=schedule)
    act_rng = _rng(np.random.SeedSequence([config.eval_seed, _RANDOM_POLICY, i]))
    rep = run_episode_actde(policy, state, config.mode, False, act_rng, gsp=gsp, record=record)
    n_sched = 0 if schedule is None else sum(t is not None for t in schedule)
    row = {"episode": i, "success": bool(rep.success), "steps": int(rep.steps),
           "return": float(np.nanmean(rep.returns)), "failures": int(n_sched),
           "failures_realized": int(rep.failures)}
    return row, (state, rep.trajectory) if record else None


def run_campaign(policy, config: ExperimentConfig, gsp: Optional[GspModel] = None,
                 failures: bool = False, checkpoint: Optional[str] = None,
                 record: int = 0) -> tuple:
    """Frozen-policy episodes ``0..eval_episodes-1``; returns ``(result, recordings)``.

    ``record`` keeps step logs for the first ``record`` episodes.
    """
    jobs = [(policy, gsp, config, i, failures, i < record) for i in range(config.eval_episodes)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            outs = list(pool.map(_eval_episode, jobs))
    else:
        outs = [_eval_episode(j) for j in jobs]
    rows = [o[0] for o in outs]
    recordings = [o[1] for o in outs if o[1] is not None]
    return CampaignResult.from_episodes(rows, config, checkpoint), recordings


def write_campaign(result: CampaignResult, out_dir, stem: str = "evaluation") -> tuple:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / f"{stem}.json"
    js.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    csv_path = out / f"{stem}_episodes.csv"
    cols = ["episode", "success", "steps", "return", "failures", "failures_realized"]
    _write_csv(csv_path, cols, [[_cell(e[k]) for k in cols] for e in result.episodes],
               result.config_hash)
    return js, csv_path


def _evaluate(checkpoint, config: ExperimentConfig, out_dir, failures: bool, stem: str,
              trajectories: int) -> CampaignResult:
    if checkpoint is None:
        policy, gsp = RandomPolicy(config.input_width, config.arena_config().max_delta_v), None
        if config.mode == "gsp":
            raise ConfigurationError("the random baseline has no GSP predictor; use mode ic")
    else:
        policy, gsp = load_policy(checkpoint, config)
    result, recs = run_campaign(policy, config, gsp, failures,
                                None if checkpoint is None else str(checkpoint), trajectories)
    if out_dir is not None:
        write_campaign(result, out_dir, stem)
        for k, (initial, steps) in enumerate(recs):
            write_trajectory(Path(out_dir) / f"{stem}_trajectory_{k:03d}.csv", initial, steps,
                             config.config_hash())
    return result


def cmd_evaluate(checkpoint, config: ExperimentConfig, out_dir=None,
                 trajectories: int = 0) -> CampaignResult:
    """Greedy evaluation on the ``eval_seed`` scenario stream.

    ``checkpoint=None`` evaluates the uniform random policy instead.
    """
    return _evaluate(checkpoint, config, out_dir, False, "evaluation", trajectories)


def cmd_resilience(checkpoint, config: ExperimentConfig, out_dir=None,
                   trajectories: int = 0) -> CampaignResult:
    """As :func:`cmd_evaluate` with a sampled failure schedule in every episode."""
    return _evaluate(checkpoint, config, out_dir, True, "resilience", trajectories)


# --- probe / replay ---------------------------------------------------------------

def cmd_probe(checkpoint, n_robots: Optional[int] = None, out_dir=None,
              samples_per_period: int = 200) -> dict:
    """Sine probe of a GSP checkpoint's predictor; writes ``probe.csv`` and ``impact.json``."""
    meta = read_checkpoint_meta(checkpoint)
    extra = meta.get("extra", {})
    if extra.get("mode") != "gsp" or "gsp" not in meta.get("extra_nets", []):
        raise ConfigurationError(f"{checkpoint} is not a GSP checkpoint")
    net = read_extra_net(checkpoint, "gsp")
    n = net.input_width if n_robots is None else n_robots
    cols, table = probe_gsp(net, n, samples_per_period)
    scores = impact_scores(cols, table)
    ranking = sorted(scores, key=scores.get, reverse=True)
    summary = {"impact": scores, "ranking": ranking, "config_hash": extra.get("config_hash"),
               "checkpoint": str(checkpoint)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "probe.csv", cols, [[_cell(v) for v in row] for row in table],
                   extra.get("config_hash", ""))
        (out / "impact.json").write_text(json.dumps(summary, indent=2))
    summary["columns"] = cols
    summary["table"] = table
    return summary


def cmd_replay(trajectory_csv) -> dict:
    """Summary statistics of a trajectory log (validated on the way)."""
    return summarize(parse_trajectory(trajectory_csv))
