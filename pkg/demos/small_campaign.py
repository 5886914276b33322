"""
A small train / evaluate / resilience campaign
==============================================

Runs the harness end to end on a cut-down desk arena so it finishes in
a few seconds. The numbers are not meaningful at this budget; the point is
the shape of the outputs. See configs/ for the full-size learning runs.
"""

import json
import tempfile
from pathlib import Path

from aggrl.harness import ExperimentConfig, cmd_evaluate, cmd_replay, cmd_resilience, cmd_train

out = Path(tempfile.mkdtemp(prefix="aggrl-demo-"))
base = {
    "algorithm": "td3", "n_robots": 4, "episodes": 5,
    "train_seed": 1, "eval_seed": 2, "eval_episodes": 10,
    "arena": {"width": 6.0, "height": 4.0, "robot_zone": [0, 0, 1.8, 4],
              "obstacle_zone": [2, 0, 4, 4], "goal_zone": [4.5, 0, 6, 4],
              "max_steps": 100, "step_duration": 1.0},
    "hyperparams": {"ac_hidden": [32, 32], "gamma": 0.95, "batch": 32},
    "gsp": {"hidden": [16]},
}
config = ExperimentConfig.from_dict({**base, "mode": "gsp"})
print("config hash:", config.config_hash())

trained = cmd_train(config, out / "train")
print("checkpoint:", trained.checkpoint)
print("last training episode:", trained.metrics.read_text().splitlines()[-1])

# The same eval seed gives the same scenarios to every policy compared.
learned = cmd_evaluate(trained.checkpoint, config, out / "eval", trajectories=1)
# The random baseline has no predictor to feed, so it runs in IC mode.
random = cmd_evaluate(None, ExperimentConfig.from_dict({**base, "mode": "ic"}))
print("success, trained vs random:", learned.success_rate, random.success_rate)

# Resilience adds random robot failures (each robot fails with probability
# failure_probability, default 0.25) during each evaluation episode.
res = cmd_resilience(trained.checkpoint, config)
print("success with failures:", res.success_rate, "mean failures:", res.mean_failures)

summary = cmd_replay(out / "eval" / "evaluation_trajectory_000.csv")
print(json.dumps(summary, indent=1))
