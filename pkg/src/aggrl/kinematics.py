"""Quasi-static rigid-aggregate kinematics.

Each attached robot asks for a velocity at its attachment point. The
aggregate realizes the single rigid twist that best fits those requests in
the least-squares sense; whatever a robot asked for but did not get is its
residual, the push-pull it feels from the rest of the aggregate.
"""

from __future__ import annotations

import math

import numpy as np

CM = 0.01


def fit_rigid_twist(points, velocities, reference=None):
    """Least-squares planar twist ``(v, omega)`` about ``reference``.

    Solves ``min sum_i |u_i - (v + omega x (p_i - ref))|^2``; rank-deficient
    systems (a single contact) resolve to the minimum-norm twist. The
    reference defaults to the centroid of ``points``.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    u = np.asarray(velocities, dtype=np.float64).reshape(-1, 2)
    ref = p.mean(axis=0) if reference is None else np.asarray(reference, dtype=np.float64)
    r = p - ref
    n = len(p)
    a = np.zeros((2 * n, 3))
    a[0::2, 0] = 1.0
    a[1::2, 1] = 1.0
    a[0::2, 2] = -r[:, 1]
    a[1::2, 2] = r[:, 0]
    sol, *_ = np.linalg.lstsq(a, u.reshape(-1), rcond=None)
    realized = (a @ sol).reshape(n, 2)
    return sol[:2], float(sol[2]), u - realized


def commanded_point_velocities(positions, headings, wheels, wheel_base: float):
    """World-frame velocity (m/s) each robot requests at its attachment.

    Forward speed ``(v_l + v_r)/2`` acts along the heading. The turning
    component ``(v_r - v_l)/wheel_base`` acts through the rigid frame as a
    spin about the aggregate centroid, delivered at the robot's wheel rim
    speed ``turn_rate * wheel_base / 2`` along the local tangent. Wheel
    speeds are in cm/s.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    wheels = np.asarray(wheels, dtype=np.float64).reshape(-1, 2) * CM
    fwd = 0.5 * (wheels[:, 0] + wheels[:, 1])
    turn = (wheels[:, 1] - wheels[:, 0]) / wheel_base
    h = np.stack([np.cos(headings), np.sin(headings)], axis=1)
    lever = positions - positions.mean(axis=0)
    norm = np.linalg.norm(lever, axis=1)
    tangent = np.zeros_like(lever)
    ok = norm > 1e-12
    tangent[ok] = np.stack([-lever[ok, 1], lever[ok, 0]], axis=1) / norm[ok, None]
    return fwd[:, None] * h + (turn * 0.5 * wheel_base)[:, None] * tangent


def integrate_twist(position, theta: float, velocity, omega: float, dt: float):
    """Exact constant-twist motion of a planar pose over ``dt``."""
    phi = omega * dt
    v = np.asarray(velocity, dtype=np.float64) * dt
    if abs(phi) < 1e-12:
        disp = v
    else:
        s, c = math.sin(phi), math.cos(phi)
        disp = np.array([s * v[0] - (1 - c) * v[1], (1 - c) * v[0] + s * v[1]]) / phi
    return np.asarray(position, dtype=np.float64) + disp, theta + phi
