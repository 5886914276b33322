"""Per-step trajectory logs as CSV, and the offline summary used by ``replay``.

Column order (fixed)::

    step, object_x, object_y, object_theta, aggregate_dtheta, done, success,
    then for each robot i = 1..N:
    r{i}_x, r{i}_y, r{i}_heading, r{i}_attached, r{i}_dv_left, r{i}_dv_right, r{i}_reward

Row 0 is the initial state: its action, reward and dtheta cells are empty.
Positions are meters in the arena frame, angles radians in (-pi, pi],
increments cm/s. A first line ``# config_hash: <hex>`` may precede the header.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import TrajectoryParseError
from .world import StepOutcome, WorldState

BASE_COLUMNS = ["step", "object_x", "object_y", "object_theta", "aggregate_dtheta", "done", "success"]
ROBOT_FIELDS = ["x", "y", "heading", "attached", "dv_left", "dv_right", "reward"]
REWARD_BOUNDS = (-4.0, -1.0)


def columns(n_robots: int) -> list:
    cols = list(BASE_COLUMNS)
    for i in range(1, n_robots + 1):
        cols.extend(f"r{i}_{f}" for f in ROBOT_FIELDS)
    return cols


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _row(state: WorldState, actions: Optional[np.ndarray], out: Optional[StepOutcome]) -> list:
    agg = state.aggregate
    pose_xy = state.to_arena_frame(agg.pose.xy)
    theta = math.remainder(agg.pose.theta - state.frame_angle, 2 * math.pi)
    row = [state.step_index, pose_xy[0], pose_xy[1], theta if theta != -math.pi else math.pi,
           None if out is None else out.aggregate_dtheta,
           False if out is None else out.done, False if out is None else out.success]
    positions = agg.robot_positions()
    headings = agg.robot_headings()
    for i, robot in enumerate(agg.robots):
        p = state.to_arena_frame(positions[i])
        h = math.remainder(headings[i] - state.frame_angle, 2 * math.pi)
        attached = not robot.failed
        dv = (None, None) if actions is None or not attached else (actions[i, 0], actions[i, 1])
        rew = None if out is None or not attached else out.rewards[i]
        row.extend([p[0], p[1], h if h != -math.pi else math.pi, attached, dv[0], dv[1], rew])
    return row


def write_trajectory(path, initial: WorldState, log: list, config_hash: Optional[str] = None) -> Path:
    """Write ``initial`` plus the ``{"state", "actions", "outcome"}`` records
    collected by ``run_episode_actde(record=True)``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(columns(initial.aggregate.n_robots))
        w.writerow([_fmt(x) for x in _row(initial, None, None)])
        for rec in log:
            w.writerow([_fmt(x) for x in _row(rec["state"], rec["actions"], rec["outcome"])])
    return path


@dataclass
class Trajectory:
    n_robots: int
    table: np.ndarray          # (rows, columns) float, NaN for empty cells
    config_hash: Optional[str] = None
    first_data_line: int = 2

    def column(self, name: str) -> np.ndarray:
        return self.table[:, columns(self.n_robots).index(name)]


def parse_trajectory(source) -> Trajectory:
    """Parse a trajectory CSV (path or text). Errors carry the 1-based line number."""
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        text = Path(source).read_text()
    else:
        text = str(source)
    lines = text.splitlines()
    config_hash = None
    start = 0
    if lines and lines[0].startswith("#"):
        head = lines[0].lstrip("#").strip()
        if head.startswith("config_hash:"):
            config_hash = head.split(":", 1)[1].strip()
        start = 1
    reader = csv.reader(io.StringIO("\n".join(lines[start:])))
    try:
        header = next(reader)
    except StopIteration:
        raise TrajectoryParseError("missing header", line=start + 1) from None
    if header[:len(BASE_COLUMNS)] != BASE_COLUMNS:
        raise TrajectoryParseError(f"unexpected leading columns {header[:len(BASE_COLUMNS)]}", line=start + 1)
    extra = len(header) - len(BASE_COLUMNS)
    if extra <= 0 or extra % len(ROBOT_FIELDS):
        raise TrajectoryParseError("robot columns must come in groups of "
                                   f"{len(ROBOT_FIELDS)}", line=start + 1)
    n = extra // len(ROBOT_FIELDS)
    if header != columns(n):
        raise TrajectoryParseError("columns out of the documented order", line=start + 1)
    rows = []
    for k, rec in enumerate(reader):
        lineno = start + 2 + k
        if len(rec) != len(header):
            raise TrajectoryParseError(f"expected {len(header)} fields, got {len(rec)}", line=lineno)
        try:
            rows.append([float(x) if x != "" else math.nan for x in rec])
        except ValueError as exc:
            raise TrajectoryParseError(f"non-numeric field ({exc})", line=lineno) from None
        if rows[-1][0] != k:
            raise TrajectoryParseError(f"step index {rec[0]} where {k} was expected", line=lineno)
    if not rows:
        raise TrajectoryParseError("no records", line=start + 2)
    return Trajectory(n, np.array(rows), config_hash, start + 2)


def summarize(traj: Trajectory) -> dict:
    """Episode length, net displacement and heading extrema, after checking
    the log invariants (reward bounds, angle ranges)."""
    n = traj.n_robots
    lo, hi = REWARD_BOUNDS
    for i in range(1, n + 1):
        r = traj.column(f"r{i}_reward")
        bad = np.flatnonzero(np.isfinite(r) & ((r < lo - 1e-12) | (r > hi + 1e-12)))
        if len(bad):
            raise TrajectoryParseError(f"robot {i} reward {r[bad[0]]} outside [{lo}, {hi}]",
                                       line=_data_line(traj, bad[0]))
    angle_cols = ["object_theta", "aggregate_dtheta"] + [f"r{i}_heading" for i in range(1, n + 1)]
    for name in angle_cols:
        a = traj.column(name)
        bad = np.flatnonzero(np.isfinite(a) & ((a <= -math.pi) | (a > math.pi)))
        if len(bad):
            raise TrajectoryParseError(f"{name} value {a[bad[0]]} outside (-pi, pi]",
                                       line=_data_line(traj, bad[0]))
    x, y = traj.column("object_x"), traj.column("object_y")
    dtheta = np.nan_to_num(traj.column("aggregate_dtheta"))
    # Unwrapped orientation trace, so the extrema do not jump at the +/-pi seam.
    heading = traj.column("object_theta")[0] + np.cumsum(dtheta)
    rewards = np.column_stack([traj.column(f"r{i}_reward") for i in range(1, n + 1)])
    return {
        "steps": int(len(x) - 1),
        "n_robots": n,
        "net_displacement": float(math.hypot(x[-1] - x[0], y[-1] - y[0])),
        "success": bool(traj.column("success")[-1]),
        "heading_min": float(heading.min()),
        "heading_max": float(heading.max()),
        "dtheta_min": float(dtheta[1:].min()) if len(dtheta) > 1 else 0.0,
        "dtheta_max": float(dtheta[1:].max()) if len(dtheta) > 1 else 0.0,
        "mean_reward": float(np.nanmean(rewards)) if np.isfinite(rewards).any() else float("nan"),
        "config_hash": traj.config_hash,
    }


def _data_line(traj: Trajectory, row: int) -> int:
    return row + traj.first_data_line
