"""Collective-transport world: arena, rigid aggregate, sensing, reward.

Units: positions in meters, wheel speeds and their increments in cm/s,
angles in radians. The arena is laid out left to right as robot generation
zone, obstacle zone, goal zone.

A world may carry a ``frame_angle``: every pose and every piece of geometry
is then rotated about the origin by that angle. Nothing in the dynamics or
the sensing depends on the frame, which is what makes the body-frame
observations rotation invariant.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, ContractViolation, GenerationError
from .geometry import (cast_rays, disk_contacts, polygon_segments, proximity_from_distance,
                       rect_polygon, rotation, wrap_angle)
from .kinematics import CM, commanded_point_velocities, fit_rigid_twist, integrate_twist

OBS_WIDTH = 31
WHEEL_EPS = 1e-6  # keeps |v| strictly below the wheel limit


@dataclass(frozen=True)
class Zone:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ConfigurationError(f"degenerate zone {self}")

    @property
    def center(self):
        return np.array([(self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2])

    def distance(self, point) -> float:
        """Euclidean distance from a point to the rectangle (0 inside)."""
        dx = max(self.x0 - point[0], 0.0, point[0] - self.x1)
        dy = max(self.y0 - point[1], 0.0, point[1] - self.y1)
        return math.hypot(dx, dy)

    def sample(self, rng: np.random.Generator, margin: float = 0.0):
        lo = np.array([self.x0 + margin, self.y0 + margin])
        hi = np.array([self.x1 - margin, self.y1 - margin])
        hi = np.maximum(hi, lo)
        return rng.uniform(lo, hi)


@dataclass
class ArenaConfig:
    """Arena geometry and physical constants.

    Zones default to three equal-width vertical strips.
    """
    width: float = 10.0
    height: float = 6.0
    robot_zone: Optional[Zone] = None
    obstacle_zone: Optional[Zone] = None
    goal_zone: Optional[Zone] = None
    max_steps: int = 2000
    step_duration: float = 0.1
    goal_tolerance: float = 0.25
    object_radius: float = 0.35
    attachment_radius: float = 0.45
    robot_radius: float = 0.085
    wheel_base: float = 0.14
    max_wheel_speed: float = 10.0
    max_delta_v: float = 0.1
    sensor_range: float = 2.0
    n_sensors: int = 24
    cylinder_radius: float = 0.25
    gate_thickness: float = 0.2
    gate_opening: float = 1.5
    # Thickness of the solid slabs that bound the arena.
    wall_slab: float = 1.0

    def __post_init__(self):
        third = self.width / 3.0
        if self.robot_zone is None:
            self.robot_zone = Zone(0.0, 0.0, third, self.height)
        if self.obstacle_zone is None:
            self.obstacle_zone = Zone(third, 0.0, 2 * third, self.height)
        if self.goal_zone is None:
            self.goal_zone = Zone(2 * third, 0.0, self.width, self.height)
        for name in ("robot_zone", "obstacle_zone", "goal_zone"):
            z = getattr(self, name)
            if isinstance(z, dict):
                z = Zone(**z)
            elif not isinstance(z, Zone):
                z = Zone(*z)
            setattr(self, name, z)
        self.validate()

    def validate(self):
        zones = [self.robot_zone, self.obstacle_zone, self.goal_zone]
        for z in zones:
            if z.x0 < 0 or z.y0 < 0 or z.x1 > self.width or z.y1 > self.height:
                raise ConfigurationError(f"zone {z} leaves the {self.width}x{self.height} arena")
        for a, b in zip(zones, zones[1:]):
            if a.x1 > b.x0:
                raise ConfigurationError("zones must be disjoint and ordered left to right")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.step_duration <= 0:
            raise ConfigurationError("step_duration must be positive")

    @property
    def goal(self) -> np.ndarray:
        return self.goal_zone.center

    @property
    def aggregate_radius(self) -> float:
        return max(self.object_radius, self.attachment_radius + self.robot_radius)


class ObstacleSuite(str, enum.Enum):
    NONE = "none"
    TWO_CYLINDERS = "two_cylinders"
    FOUR_CYLINDERS = "four_cylinders"
    GATE = "gate"


@dataclass(frozen=True)
class Cylinder:
    center: tuple
    radius: float


@dataclass(frozen=True)
class Gate:
    x_position: float
    opening_center_y: float
    opening_width: float
    wall_thickness: float

    def polygons(self, height: float):
        x0 = self.x_position - self.wall_thickness / 2
        x1 = self.x_position + self.wall_thickness / 2
        lo = self.opening_center_y - self.opening_width / 2
        hi = self.opening_center_y + self.opening_width / 2
        out = []
        if lo > 0:
            out.append(rect_polygon(x0, 0.0, x1, lo))
        if hi < height:
            out.append(rect_polygon(x0, hi, x1, height))
        return out


Obstacle = Union[Cylinder, Gate]


@dataclass
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        self.theta = wrap_angle(self.theta)

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class Robot:
    attachment_radius: float
    attachment_angle: float
    heading_offset: float
    wheels: np.ndarray = field(default_factory=lambda: np.zeros(2))
    failed: bool = False
    fail_time: Optional[int] = None


@dataclass
class Aggregate:
    pose: Pose
    robots: list
    object_radius: float

    @property
    def n_robots(self) -> int:
        return len(self.robots)

    @property
    def attached(self) -> np.ndarray:
        return np.array([not r.failed for r in self.robots])

    def offsets(self) -> np.ndarray:
        return np.array([[r.attachment_radius * math.cos(r.attachment_angle),
                          r.attachment_radius * math.sin(r.attachment_angle)] for r in self.robots])

    def robot_positions(self, pose: Optional[Pose] = None) -> np.ndarray:
        pose = self.pose if pose is None else pose
        return pose.xy + self.offsets() @ rotation(pose.theta).T

    def robot_headings(self, pose: Optional[Pose] = None) -> np.ndarray:
        pose = self.pose if pose is None else pose
        return np.array([pose.theta + r.heading_offset for r in self.robots])

    def wheels(self) -> np.ndarray:
        return np.array([r.wheels for r in self.robots], dtype=np.float64)


@dataclass
class Observation:
    rg: np.ndarray
    rc: np.ndarray
    cg_dist: float
    wheel_speeds: np.ndarray
    proximity: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rg, self.rc, [self.cg_dist], self.wheel_speeds, self.proximity])

    @classmethod
    def from_vector(cls, v) -> "Observation":
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] < OBS_WIDTH:
            raise ContractViolation("observation vector too short")
        return cls(v[0:2], v[2:4], float(v[4]), v[5:7], v[7:31])


@dataclass
class WorldState:
    arena: ArenaConfig
    aggregate: Aggregate
    obstacles: list
    step_index: int = 0
    prev_pose: Optional[Pose] = None
    rng: Optional[np.random.Generator] = field(default=None, repr=False, compare=False)
    frame_angle: float = 0.0
    _scene: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.prev_pose is None:
            self.prev_pose = replace(self.aggregate.pose)

    @property
    def prev_object_pos(self) -> np.ndarray:
        return self.prev_pose.xy

    @property
    def object_pos(self) -> np.ndarray:
        return self.aggregate.pose.xy

    @property
    def goal(self) -> np.ndarray:
        return rotation(self.frame_angle) @ self.arena.goal

    def scene(self):
        """``(circles, polygons, segments, halfplanes)`` in the current frame, cached."""
        if self._scene is None:
            self._scene = _build_scene(self.arena, self.obstacles, self.frame_angle)
        return self._scene

    def to_arena_frame(self, point) -> np.ndarray:
        return rotation(-self.frame_angle) @ np.asarray(point, dtype=np.float64)

    def copy(self) -> "WorldState":
        old = self.aggregate
        robots = [replace(r, wheels=r.wheels.copy()) for r in old.robots]
        agg = Aggregate(replace(old.pose), robots, old.object_radius)
        return replace(self, aggregate=agg, prev_pose=replace(self.prev_pose))

    def snapshot(self) -> dict:
        """Plain arrays describing the state, for equality checks and logs."""
        agg = self.aggregate
        return {
            "pose": np.array([agg.pose.x, agg.pose.y, agg.pose.theta]),
            "prev_pose": np.array([self.prev_pose.x, self.prev_pose.y, self.prev_pose.theta]),
            "wheels": agg.wheels(),
            "robots": np.array([[r.attachment_radius, r.attachment_angle, r.heading_offset,
                                 float(r.failed), -1 if r.fail_time is None else r.fail_time]
                                for r in agg.robots]),
            "obstacles": repr(self.obstacles),
            "step_index": self.step_index,
            "frame_angle": self.frame_angle,
        }


@dataclass
class StepOutcome:
    observations: np.ndarray      # (N, 31); NaN rows for failed robots
    rewards: np.ndarray           # (N,); NaN for failed robots
    attached: np.ndarray          # (N,) bool
    done: bool
    success: bool
    aggregate_dtheta: float
    residuals: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


def _build_scene(arena: ArenaConfig, obstacles, frame_angle: float):
    """Collision and sensing geometry in the (possibly rotated) world frame.

    Returns ``(circles, polygons, segments, halfplanes)``. Arena walls are
    half-planes for collisions and slab outlines for ray casting.
    """
    w, h, t = arena.width, arena.height, arena.wall_slab
    walls = [
        rect_polygon(-t, -t, w + t, 0.0),
        rect_polygon(-t, h, w + t, h + t),
        rect_polygon(-t, 0.0, 0.0, h),
        rect_polygon(w, 0.0, w + t, h),
    ]
    halfplanes = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, -h], [1.0, 0.0, 0.0], [-1.0, 0.0, -w]])
    polys = []
    circles = []
    for ob in obstacles:
        if isinstance(ob, Cylinder):
            circles.append([ob.center[0], ob.center[1], ob.radius])
        elif isinstance(ob, Gate):
            polys.extend(ob.polygons(h))
        else:
            raise ContractViolation(f"unknown obstacle {ob!r}")
    rot = rotation(frame_angle)
    circles = np.array(circles, dtype=np.float64).reshape(-1, 3)
    if len(circles):
        circles[:, :2] = circles[:, :2] @ rot.T
    polys = [p @ rot.T for p in polys]
    walls = [p @ rot.T for p in walls]
    halfplanes[:, :2] = halfplanes[:, :2] @ rot.T
    stack = np.array(polys).reshape(-1, 4, 2)
    return circles, stack, polygon_segments(walls + polys), halfplanes


# --- scenario generation ---------------------------------------------------

def make_aggregate(arena: ArenaConfig, n_robots: int, pose: Pose) -> Aggregate:
    """Robots equally spaced around the object, drive headings tangential."""
    if n_robots < 1:
        raise ContractViolation("need at least one robot")
    robots = []
    for i in range(n_robots):
        ang = 2.0 * math.pi * i / n_robots
        robots.append(Robot(arena.attachment_radius, ang, wrap_angle(ang + math.pi / 2)))
    return Aggregate(pose, robots, arena.object_radius)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_obstacles(arena: ArenaConfig, suite: ObstacleSuite, rng: np.random.Generator,
                     gate_opening: Optional[float] = None, max_tries: int = 1000) -> list:
    suite = ObstacleSuite(suite)
    zone = arena.obstacle_zone
    if suite is ObstacleSuite.NONE:
        return []
    if suite is ObstacleSuite.GATE:
        width = arena.gate_opening if gate_opening is None else gate_opening
        t = arena.gate_thickness
        x = rng.uniform(zone.x0 + t / 2, zone.x1 - t / 2)
        lo, hi = zone.y0 + width / 2, zone.y1 - width / 2
        y = rng.uniform(lo, hi) if hi > lo else (zone.y0 + zone.y1) / 2
        return [Gate(float(x), float(y), float(width), t)]
    count = 2 if suite is ObstacleSuite.TWO_CYLINDERS else 4
    r = arena.cylinder_radius
    placed: list[Cylinder] = []
    tries = 0
    while len(placed) < count:
        tries += 1
        if tries > max_tries:
            raise GenerationError(f"could not place {count} cylinders in {zone}")
        c = zone.sample(rng, margin=r)
        if all(math.hypot(c[0] - o.center[0], c[1] - o.center[1]) >= 2 * r for o in placed):
            placed.append(Cylinder((float(c[0]), float(c[1])), r))
    return placed


def reset(arena: ArenaConfig, suite: ObstacleSuite = ObstacleSuite.TWO_CYLINDERS,
          n_robots: int = 4, seed=None, gate_opening: Optional[float] = None,
          failure_schedule: Optional[Sequence[Optional[int]]] = None) -> WorldState:
    """Sample a fresh episode: object pose, robot ring phase, obstacles."""
    rng = _as_rng(seed)
    xy = arena.robot_zone.sample(rng, margin=arena.aggregate_radius)
    theta = rng.uniform(-math.pi, math.pi)
    agg = make_aggregate(arena, n_robots, Pose(float(xy[0]), float(xy[1]), theta))
    obstacles = sample_obstacles(arena, suite, rng, gate_opening)
    if failure_schedule is not None:
        if len(failure_schedule) != n_robots:
            raise ContractViolation("failure schedule length must equal n_robots")
        for robot, t in zip(agg.robots, failure_schedule):
            robot.fail_time = None if t is None else int(t)
    return WorldState(arena, agg, obstacles, rng=rng)


def rotate_world(state: WorldState, phi: float) -> WorldState:
    """The same world seen after rotating everything about the origin."""
    out = state.copy()
    rot = rotation(phi)
    for pose in (out.aggregate.pose, out.prev_pose):
        x, y = rot @ pose.xy
        pose.x, pose.y, pose.theta = float(x), float(y), wrap_angle(pose.theta + phi)
    out.frame_angle = state.frame_angle + phi
    out._scene = None
    return out


# --- sensing ----------------------------------------------------------------

def _sensor_directions(n: int, headings: np.ndarray) -> np.ndarray:
    angles = headings[:, None] + 2.0 * math.pi * np.arange(n)[None, :] / n
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def sense_all(state: WorldState) -> np.ndarray:
    """Proximity readings for every robot, ``(N, n_sensors)``; failed rows are 0."""
    arena = state.arena
    agg = state.aggregate
    n = arena.n_sensors
    mask = agg.attached
    out = np.zeros((agg.n_robots, n))
    if not mask.any():
        return out
    pos = agg.robot_positions()[mask]
    dirs = _sensor_directions(n, agg.robot_headings()[mask])
    origins = np.repeat(pos, n, axis=0)
    circles, _, segments, _ = state.scene()
    dist = cast_rays(origins, dirs.reshape(-1, 2), circles, segments, arena.sensor_range)
    out[mask] = proximity_from_distance(dist, arena.sensor_range).reshape(-1, n)
    return out


def sense_proximity(state: WorldState, robot_index: int) -> np.ndarray:
    robot = state.aggregate.robots[robot_index]
    if robot.failed:
        raise ContractViolation(f"robot {robot_index} is detached")
    return sense_all(state)[robot_index]


def _observe(state: WorldState, proximity: np.ndarray) -> np.ndarray:
    agg = state.aggregate
    pos = agg.robot_positions()
    head = agg.robot_headings()
    goal = state.goal
    obj = state.object_pos
    cg = float(np.linalg.norm(goal - obj))
    c, s = np.cos(head), np.sin(head)
    rg, rc = goal - pos, obj - pos

    def body(v):
        return np.stack([c * v[:, 0] + s * v[:, 1], -s * v[:, 0] + c * v[:, 1]], axis=1)

    obs = np.hstack([body(rg), body(rc), np.full((len(pos), 1), cg), agg.wheels(), proximity])
    obs[~agg.attached] = np.nan
    return obs


def observe_all(state: WorldState) -> np.ndarray:
    """``(N, 31)`` observation matrix; NaN rows for failed robots."""
    return _observe(state, sense_all(state))


def build_observation(state: WorldState, robot_index: int) -> Observation:
    if state.aggregate.robots[robot_index].failed:
        raise ContractViolation(f"robot {robot_index} is detached")
    return Observation.from_vector(observe_all(state)[robot_index])


# --- reward -----------------------------------------------------------------

def direction_term(object_before, object_after, goal, min_disp: float = 1e-9) -> float:
    """Cosine between the object's displacement and the object-to-goal vector."""
    delta = np.asarray(object_after, dtype=np.float64) - np.asarray(object_before, dtype=np.float64)
    cg = np.asarray(goal, dtype=np.float64) - np.asarray(object_before, dtype=np.float64)
    nd, ng = float(np.linalg.norm(delta)), float(np.linalg.norm(cg))
    if nd < min_disp or ng == 0.0:
        return 0.0
    return float(np.clip(delta @ cg / (nd * ng), -1.0, 1.0))


def reward_from_terms(direction: float, proximity) -> float:
    return -2.0 + direction - float(np.mean(proximity))


def reward(state_before: WorldState, state_after: WorldState, robot_index: int) -> float:
    """Per-robot reward: time penalty, progress direction, proximity penalty."""
    d = direction_term(state_before.object_pos, state_after.object_pos, state_before.goal)
    return reward_from_terms(d, sense_proximity(state_after, robot_index))


# --- dynamics ---------------------------------------------------------------

def resolve_aggregate_twist(agg: Aggregate, wheels, wheel_base: float):
    """Rigid twist realized by the attached robots' wheel commands.

    Returns ``(v_body, omega, residuals)``: the object-center velocity in
    the aggregate frame (m/s), the angular rate (rad/s) and, per robot, the
    commanded-minus-realized attachment velocity (m/s, world frame; NaN for
    detached robots).
    """
    mask = agg.attached
    if not mask.any():
        raise ContractViolation("no attached robot left")
    wheels = np.asarray(wheels, dtype=np.float64).reshape(agg.n_robots, 2)
    pos = agg.robot_positions()[mask]
    u = commanded_point_velocities(pos, agg.robot_headings()[mask], wheels[mask], wheel_base)
    ref = pos.mean(axis=0)
    v_ref, omega, res = fit_rigid_twist(pos, u, ref)
    lever = agg.pose.xy - ref
    v_obj = v_ref + omega * np.array([-lever[1], lever[0]])
    residuals = np.full((agg.n_robots, 2), np.nan)
    residuals[mask] = res
    v_body = rotation(-agg.pose.theta) @ v_obj
    return v_body, omega, residuals


class _Collider:
    """Penetration queries for one aggregate against a fixed scene.

    Body offsets are taken once in the aggregate frame so each query is a
    single rotation plus a handful of vectorized distance checks.
    """

    def __init__(self, state: WorldState):
        agg = state.aggregate
        mask = agg.attached
        self.offsets = np.vstack([np.zeros((1, 2)), agg.offsets()[mask]])
        self.radii = np.concatenate([[agg.object_radius],
                                     np.full(int(mask.sum()), state.arena.robot_radius)])
        self.circles, self.polys, _, self.halfplanes = state.scene()

    def centers(self, x: float, y: float, theta: float) -> np.ndarray:
        c, s = math.cos(theta), math.sin(theta)
        o = self.offsets
        return np.column_stack([x + c * o[:, 0] - s * o[:, 1], y + s * o[:, 0] + c * o[:, 1]])

    def depth(self, x: float, y: float, theta: float) -> float:
        """Largest penetration over all bodies (<= 0 means clear)."""
        p = self.centers(x, y, theta)
        hp = self.halfplanes
        worst = float(np.max(self.radii[:, None] - (p @ hp[:, :2].T - hp[:, 2])))
        if len(self.circles):
            c = self.circles
            d = np.hypot(p[:, None, 0] - c[:, 0], p[:, None, 1] - c[:, 1])
            worst = max(worst, float(np.max(self.radii[:, None] + c[:, 2] - d)))
        if len(self.polys):
            worst = max(worst, disk_contacts(p, self.radii, (), self.polys)[0])
        return worst

    def normals(self, x: float, y: float, theta: float, margin: float) -> list:
        p = self.centers(x, y, theta)
        return disk_contacts(p, self.radii + margin, self.circles, self.polys, self.halfplanes)[1]


def _penetration(state: WorldState, pose: Pose) -> float:
    return _Collider(state).depth(pose.x, pose.y, pose.theta)


def _clear_fraction(col: _Collider, start: Pose, disp, dtheta: float, allowed: float,
                    iters: int = 16) -> float:
    """Largest fraction of a motion that keeps penetration within ``allowed``."""
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if col.depth(start.x + mid * disp[0], start.y + mid * disp[1],
                     start.theta + mid * dtheta) <= allowed:
            lo = mid
        else:
            hi = mid
    return lo


def _move_with_contacts(state: WorldState, start: Pose, disp: np.ndarray, dtheta: float) -> Pose:
    """Apply a rigid motion, stopping at contacts and sliding along them.

    The motion advances to the first contact (bisection on the clear
    fraction); the remaining translation is projected onto the tangents of
    the touching obstacles and applied the same way, once with and once
    without the remaining rotation. Penetration never grows beyond what
    the start pose already had.
    """
    col = _Collider(state)
    allowed = max(col.depth(start.x, start.y, start.theta), 0.0)
    if col.depth(start.x + disp[0], start.y + disp[1], start.theta + dtheta) <= allowed:
        return Pose(start.x + disp[0], start.y + disp[1], start.theta + dtheta)
    pose = start
    for _ in range(2):
        f = _clear_fraction(col, pose, disp, dtheta, allowed)
        pose = Pose(pose.x + f * disp[0], pose.y + f * disp[1], pose.theta + f * dtheta)
        disp = (1.0 - f) * disp
        dtheta = (1.0 - f) * dtheta
        # Obstacles within a hair of the bodies define the sliding constraints.
        normals = col.normals(pose.x, pose.y, pose.theta, 1e-5)
        for _ in range(3):
            for n in normals:
                dn = disp @ n
                if dn < 0:
                    disp = disp - dn * n
        for dth in (dtheta, 0.0):
            if col.depth(pose.x + disp[0], pose.y + disp[1], pose.theta + dth) <= allowed:
                return Pose(pose.x + disp[0], pose.y + disp[1], pose.theta + dth)
        dtheta = 0.0
    return pose


def apply_failure(state: WorldState, robot_index: int) -> WorldState:
    """Detach a robot: it stops contributing to motion, sensing and control."""
    robot = state.aggregate.robots[robot_index]
    if robot.failed:
        raise ContractViolation(f"robot {robot_index} already failed")
    robot.failed = True
    robot.wheels = np.zeros(2)
    if robot.fail_time is None:
        robot.fail_time = state.step_index
    return state


def is_success(state: WorldState) -> bool:
    obj = state.to_arena_frame(state.object_pos)
    return state.arena.goal_zone.distance(obj) <= state.arena.goal_tolerance


def step(state: WorldState, actions) -> tuple[WorldState, StepOutcome]:
    """Advance one control period.

    ``actions`` holds one ``(dv_left, dv_right)`` pair (cm/s) per robot,
    including detached ones, whose rows are ignored. Returns a new state.
    """
    arena = state.arena
    actions = np.asarray(actions, dtype=np.float64)
    n = state.aggregate.n_robots
    if actions.shape != (n, 2):
        raise ContractViolation(f"expected actions of shape ({n}, 2), got {actions.shape}")
    new = state.copy()
    agg = new.aggregate
    for i, robot in enumerate(agg.robots):
        if not robot.failed and robot.fail_time is not None and robot.fail_time == state.step_index:
            apply_failure(new, i)
    mask = agg.attached
    if np.any(np.abs(actions[mask]) > arena.max_delta_v + 1e-12):
        raise ContractViolation(f"wheel increments must lie within +-{arena.max_delta_v} cm/s")
    vmax = arena.max_wheel_speed - WHEEL_EPS
    for i, robot in enumerate(agg.robots):
        if not robot.failed:
            robot.wheels = np.clip(robot.wheels + actions[i], -vmax, vmax)

    v_body, omega, residuals = resolve_aggregate_twist(agg, agg.wheels(), arena.wheel_base)
    start = agg.pose
    v_world = rotation(start.theta) @ v_body
    end_xy, end_theta = integrate_twist(start.xy, start.theta, v_world, omega, arena.step_duration)
    moved = _move_with_contacts(new, start, end_xy - start.xy, end_theta - start.theta)

    new.prev_pose = replace(start)
    agg.pose = moved
    new.step_index = state.step_index + 1

    proximity = sense_all(new)
    obs = _observe(new, proximity)
    d = direction_term(state.object_pos, new.object_pos, state.goal)
    rewards = np.array([reward_from_terms(d, proximity[i]) for i in range(n)])
    rewards[~mask] = np.nan
    success = is_success(new)
    done = success or new.step_index >= arena.max_steps
    dtheta = wrap_angle(moved.theta - start.theta)
    return new, StepOutcome(obs, rewards, mask.copy(), done, success, dtheta, residuals)


# --- curriculum and failures ---------------------------------------------------

def curriculum_gate_width(initial: float, episode_index: int, shrink_every: int,
                          minimum: float) -> float:
    """Gate opening for an episode: 0.5 m narrower every ``shrink_every`` episodes."""
    if initial < minimum:
        raise ConfigurationError("initial gate width must be at least the minimum")
    if shrink_every < 1:
        raise ConfigurationError("shrink_every must be >= 1")
    return max(minimum, initial - 0.5 * (episode_index // shrink_every))


def sample_failure_schedule(n_robots: int = 8, max_steps: int = 2000, seed=None,
                            probability: float = 0.25, max_fraction: float = 0.75) -> list:
    """Per-robot fail step, or ``None`` for robots that never fail.

    Each robot fails independently with ``probability``. At most
    ``floor(max_fraction * n_robots)`` robots fail; surplus marks are dropped
    uniformly at random. Fail steps are uniform in ``[0, max_steps)``.
    """
    if n_robots < 1:
        raise ConfigurationError("need at least one robot")
    if not 0.0 <= probability <= 1.0:
        raise ConfigurationError("failure probability must lie in [0, 1]")
    rng = _as_rng(seed)
    marked = np.flatnonzero(rng.random(n_robots) < probability)
    cap = int(math.floor(max_fraction * n_robots))
    if len(marked) > cap:
        marked = np.sort(rng.choice(marked, size=cap, replace=False))
    times = rng.integers(0, max_steps, size=len(marked))
    schedule: list = [None] * n_robots
    for i, t in zip(marked, times):
        schedule[int(i)] = int(t)
    return schedule
