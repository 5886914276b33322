import math

import numpy as np
import pytest

from aggrl.world import ArenaConfig, Pose, WorldState, Zone, make_aggregate


def make_world(arena=None, n_robots=4, pose=(2.0, 3.0, 0.0), obstacles=()):
    arena = arena or ArenaConfig()
    agg = make_aggregate(arena, n_robots, Pose(*pose))
    return WorldState(arena, agg, list(obstacles), rng=np.random.default_rng(0))


def pairwise_distances(points):
    d = points[:, None, :] - points[None, :, :]
    return np.sqrt((d ** 2).sum(-1))


@pytest.fixture
def arena():
    return ArenaConfig()


@pytest.fixture
def desk_arena():
    return ArenaConfig(width=6.0, height=4.0, robot_zone=Zone(0, 0, 1.8, 4),
                       obstacle_zone=Zone(2, 0, 4, 4), goal_zone=Zone(4.5, 0, 6, 4),
                       max_steps=600, step_duration=1.0)


TWO_PI = 2 * math.pi


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(results):
            terminalreporter.write_line(results[cid])
