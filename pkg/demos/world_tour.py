"""
A short tour of the simulated transport task
============================================

Builds the desk arena, drops a four-robot aggregate in it and drives it
with a fixed hand-written command to show what each robot observes and
how it is rewarded.
"""

import numpy as np

from aggrl.world import ArenaConfig, ObstacleSuite, Zone, observe_all, reset, step

# The reduced arena used for the learning check: robots start on the left,
# two cylinders sit in the middle strip and the goal is on the right.
arena = ArenaConfig(width=6.0, height=4.0, robot_zone=Zone(0, 0, 1.8, 4),
                    obstacle_zone=Zone(2, 0, 4, 4), goal_zone=Zone(4.5, 0, 6, 4),
                    max_steps=600, step_duration=1.0)
state = reset(arena, ObstacleSuite.TWO_CYLINDERS, 4, seed=7)

print("object pose:", state.aggregate.pose)
print("obstacles:", [o.center for o in state.obstacles])

# Each row of the observation matrix is one robot's local view:
# goal vector (2), object vector (2), goal distance (1), wheels (2), 24 proximity rays.
obs = observe_all(state)
print("observation shape:", obs.shape)
print("robot 1 goal vector (body frame):", obs[0, :2].round(3))

# Every robot accelerates both wheels each step. Headings are tangential,
# so equal pushes from all four robots mostly spin the aggregate.
for t in range(30):
    state, out = step(state, np.full((4, 2), 0.1))
print("after 30 steps, pose:", state.aggregate.pose)
print("rewards in the last step:", out.rewards.round(3))
print("realized heading change:", round(out.aggregate_dtheta, 5))

# Only robots 1 and 3 push: opposite robots point in opposite directions,
# so one forward and one reversed gives a translation.
state = reset(arena, ObstacleSuite.TWO_CYLINDERS, 4, seed=7)
push = np.zeros((4, 2))
push[0] = 0.1
push[2] = -0.1
start = state.object_pos.copy()
for t in range(100):
    state, out = step(state, push)
print("translation from a push-pull pair:", (state.object_pos - start).round(3))
