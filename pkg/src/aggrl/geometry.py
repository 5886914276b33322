"""Planar primitives: angle wrapping, ray casting, disk penetration.

Obstacles reduce to two primitive kinds: circles ``(cx, cy, r)`` and
convex polygons with counter-clockwise vertices. Everything is vectorized
over rays or bodies because the simulator calls these every step.
"""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = a - TWO_PI * np.ceil((a - math.pi) / TWO_PI)
    return float(w) if np.ndim(w) == 0 else w


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rect_polygon(x0, y0, x1, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def polygon_segments(polygons) -> np.ndarray:
    """Edges of all polygons as an ``(S, 4)`` array of ``x0, y0, x1, y1``."""
    if not polygons:
        return np.zeros((0, 4))
    segs = [np.hstack([p, np.roll(p, -1, axis=0)]) for p in polygons]
    return np.vstack(segs)


def cast_rays(origins, directions, circles, segments, max_range: float) -> np.ndarray:
    """Distance along each unit ray to the first hit, ``inf`` beyond ``max_range``.

    A ray whose origin lies inside (or on) a circle reports distance 0.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 2)
    best = np.full(len(o), np.inf)
    if len(circles):
        c = np.asarray(circles, dtype=np.float64)
        f = o[:, None, :] - c[None, :, :2]                     # (R, C, 2)
        b = np.einsum("rck,rk->rc", f, d)
        cc = np.einsum("rck,rck->rc", f, f) - c[None, :, 2] ** 2
        disc = b * b - cc
        with np.errstate(invalid="ignore"):
            t = -b - np.sqrt(disc)
        t = np.where((disc >= 0) & (t >= 0), t, np.inf)
        t = np.where(cc <= 0, 0.0, t)
        best = np.minimum(best, t.min(axis=1))
    if len(segments):
        s = np.asarray(segments, dtype=np.float64)
        p = s[:, :2]
        e = s[:, 2:] - p
        denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
        w = p[None, :, :] - o[:, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (w[..., 0] * e[None, :, 1] - w[..., 1] * e[None, :, 0]) / denom
            u = (w[..., 0] * d[:, None, 1] - w[..., 1] * d[:, None, 0]) / denom
        ok = (np.abs(denom) > 1e-15) & (t >= 0) & (u >= 0) & (u <= 1)
        best = np.minimum(best, np.where(ok, t, np.inf).min(axis=1))
    return np.where(best <= max_range, best, np.inf)


def proximity_from_distance(dist, max_range: float):
    """Linear falloff: 1 when touching, 0 at or beyond ``max_range``."""
    dist = np.asarray(dist, dtype=np.float64)
    return np.where(np.isfinite(dist), np.clip(1.0 - dist / max_range, 0.0, 1.0), 0.0)


def _polygon_signed_distance(points: np.ndarray, polys: np.ndarray):
    """Signed distances (negative inside) and outward normals, ``(K, P)``.

    ``polys`` stacks ``P`` convex CCW polygons with a common vertex count.
    """
    a = polys                                                   # (P, V, 2)
    e = np.roll(polys, -1, axis=1) - a
    elen2 = np.einsum("pvj,pvj->pv", e, e)
    n = np.stack([e[..., 1], -e[..., 0]], axis=-1) / np.sqrt(elen2)[..., None]
    rel = points[:, None, None, :] - a[None]                    # (K, P, V, 2)
    plane = np.einsum("kpvj,pvj->kpv", rel, n)
    inside = np.all(plane <= 0, axis=2)                         # (K, P)
    s = np.clip(np.einsum("kpvj,pvj->kpv", rel, e) / elen2[None], 0.0, 1.0)
    diff = rel - s[..., None] * e[None]                         # point minus closest
    dist2 = np.einsum("kpvj,kpvj->kpv", diff, diff)
    j = np.argmin(dist2, axis=2)
    kk, pp = np.indices(j.shape)
    dmin = np.sqrt(dist2[kk, pp, j])
    jin = np.argmax(plane, axis=2)
    sd = np.where(inside, plane[kk, pp, jin], dmin)
    with np.errstate(invalid="ignore", divide="ignore"):
        normal = np.where(inside[..., None], n[pp, jin], diff[kk, pp, j] / dmin[..., None])
    normal = np.where(np.isfinite(normal), normal, n[pp, jin])
    return sd, normal


def disk_contacts(centers, radii, circles, polygons, halfplanes=()):
    """Penetration depths and contact normals for a set of disks.

    ``polygons`` is a ``(P, V, 2)`` stack of convex CCW polygons and
    ``halfplanes`` rows ``(nx, ny, c)`` describe free space ``n.p >= c``. Returns
    ``(depth, normals)`` where ``depth`` is the largest penetration over all
    bodies (<= 0 means clear) and ``normals`` lists the unit vectors
    pointing from each penetrated obstacle toward the body.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    worst = -np.inf
    normals = []
    if len(circles):
        c = np.asarray(circles, dtype=np.float64)
        diff = centers[:, None, :] - c[None, :, :2]
        dist = np.sqrt(np.einsum("kcj,kcj->kc", diff, diff))
        depth = radii[:, None] + c[None, :, 2] - dist
        worst = max(worst, float(depth.max()))
        if worst > 0:
            for k, j in zip(*np.nonzero(depth > 0)):
                nrm = diff[k, j] / dist[k, j] if dist[k, j] > 0 else np.array([1.0, 0.0])
                normals.append(nrm)
    if len(halfplanes):
        hp = np.asarray(halfplanes, dtype=np.float64)
        depth = radii[:, None] - (centers @ hp[:, :2].T - hp[None, :, 2])
        worst = max(worst, float(depth.max()))
        for k, j in zip(*np.nonzero(depth > 0)):
            normals.append(hp[j, :2].copy())
    if len(polygons):
        sd, nrm = _polygon_signed_distance(centers, np.asarray(polygons, dtype=np.float64))
        depth = radii[:, None] - sd
        worst = max(worst, float(depth.max()))
        for k, p in zip(*np.nonzero(depth > 0)):
            normals.append(nrm[k, p])
    return worst, normals
