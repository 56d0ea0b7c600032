"""Temporal landmark generation.

Unmatched features are cast as viewing rays into the voxel-hashed mixture.
The first cell along the ray whose best component lies within the whitened
line distance gate yields an association, and the landmark depth follows
from intersecting the ray with that component's plane. A projection-based
association is kept as the comparison baseline.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DegenerateDirection, NegativeDepth, ParallelRay
from .factors import Observation, PinholeCamera, projection_jacobian, unproject
from .gmm_map import GaussianComponent, GaussianMixture, VoxelGrid

RAY_GATE = 2.8                     # ~ sqrt(chi2_3(0.95)) = 2.7955
PROJECTION_GATE = float(np.sqrt(5.99))  # chi2_2(0.95)


@dataclass(frozen=True)
class AssocConfig:
    gate: float = RAY_GATE
    max_range: float = 20.0
    top_k: int = 100
    workers: int = 1
    proj_gate: float = PROJECTION_GATE
    occlusion_margin: float = 0.3   # metres of depth separating occluder from occluded


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    bearing: np.ndarray
    feature_id: int = -1

    @classmethod
    def through(cls, origin, direction, feature_id: int = -1) -> "Ray":
        d = np.asarray(direction, dtype=float)
        return cls(np.asarray(origin, dtype=float), d / np.linalg.norm(d), feature_id)


@dataclass(frozen=True)
class Association:
    feature_id: int
    component_id: int
    distance: float
    depth: float

    def point(self, ray: Ray) -> np.ndarray:
        return ray.origin + self.depth * ray.bearing


def ray_component_distance(ray: Ray, comp: GaussianComponent) -> float:
    """Mahalanobis distance between the line and the component mean."""
    tw = comp.whitener @ (ray.origin - comp.mean)
    vw = comp.whitener @ ray.bearing
    nv = np.linalg.norm(vw)
    if nv < 1e-12:
        raise DegenerateDirection("whitened ray direction vanishes")
    return float(np.linalg.norm(np.cross(tw, vw)) / nv)


def _distances(ray: Ray, mixture: GaussianMixture, ids) -> np.ndarray:
    W = mixture.whiteners[ids]
    tw = np.einsum("kij,kj->ki", W, ray.origin - mixture.means[ids])
    vw = W @ ray.bearing
    return np.linalg.norm(np.cross(tw, vw), axis=1) / np.linalg.norm(vw, axis=1)


def recover_depth(ray: Ray, comp: GaussianComponent) -> float:
    """Depth along the ray to the component's plane (normal = flattest axis)."""
    n = comp.normal
    denom = n @ ray.bearing
    if abs(denom) < 1e-6:
        raise ParallelRay("ray parallel to the component plane")
    lam = n @ (comp.mean - ray.origin) / denom
    if not lam > 0:
        raise NegativeDepth(f"plane intersection at depth {lam:.3g}")
    return float(lam)


def _depths(ray: Ray, mixture: GaussianMixture, ids) -> np.ndarray:
    n = mixture.normals[ids]
    denom = n @ ray.bearing
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.einsum("ki,ki->k", n, mixture.means[ids] - ray.origin) / denom
    return np.where(np.abs(denom) >= 1e-6, lam, np.nan)


def _cast(grid: VoxelGrid, ray: Ray, max_range: float) -> Iterator[tuple]:
    """``(cell, t_enter)`` for cells crossed by the segment, front to back."""
    res = grid.resolution
    o = np.asarray(ray.origin, dtype=float)
    d = np.asarray(ray.bearing, dtype=float)
    cell = [int(c) for c in np.floor(o / res)]
    yield tuple(cell), 0.0
    if max_range <= 0:
        return
    step = [0, 0, 0]
    t_max = [np.inf] * 3
    t_delta = [np.inf] * 3
    for a in range(3):
        if d[a] > 0:
            step[a] = 1
            t_max[a] = ((cell[a] + 1) * res - o[a]) / d[a]
            t_delta[a] = res / d[a]
        elif d[a] < 0:
            step[a] = -1
            t_max[a] = (cell[a] * res - o[a]) / d[a]
            t_delta[a] = -res / d[a]
    while True:
        a = 0 if t_max[0] <= t_max[1] else 1
        if t_max[2] < t_max[a]:
            a = 2
        t = t_max[a]
        if t > max_range:
            return
        cell[a] += step[a]
        t_max[a] += t_delta[a]
        yield tuple(cell), t


def cast_ray(grid: VoxelGrid, ray: Ray, max_range: float) -> Iterator[tuple]:
    """Cells crossed by ``[origin, origin + max_range * bearing]``, front to back."""
    for cell, _ in _cast(grid, ray, max_range):
        yield cell


def _feature_rays(pose, features: Sequence[Observation], cam: PinholeCamera):
    R_WC, c_W = pose
    u = np.array([f.u for f in features], dtype=float).reshape(-1, 2)
    bearings = unproject(cam, u) @ np.asarray(R_WC).T
    return [Ray(np.asarray(c_W, dtype=float), b, f.feature_id)
            for b, f in zip(bearings, features)]


def select_candidates(features: Sequence[Observation], top_k: int) -> list:
    """Highest detection score first; ties broken by feature id."""
    ranked = sorted(features, key=lambda f: (-f.score, f.feature_id))
    return ranked[:top_k]


def _raycast_one(ray: Ray, grid: VoxelGrid, mixture: GaussianMixture,
                 cfg: AssocConfig) -> Association | None:
    # Traverse until the first gated component, then keep collecting over a
    # depth band of occlusion_margin: components inside the band belong to the
    # same surface and compete on distance, anything behind it is occluded.
    seen: set = set()
    found = []          # (dist, depth, id)
    stop = np.inf
    for cell, t in _cast(grid, ray, cfg.max_range):
        if t > stop:
            break
        ids = grid.cells.get(cell)
        if not ids:
            continue
        ids = np.asarray([i for i in ids if i not in seen])
        if ids.size == 0:
            continue
        seen.update(ids.tolist())
        dist = _distances(ray, mixture, ids)
        lam = _depths(ray, mixture, ids)
        ok = (dist <= cfg.gate) & (lam > 0)
        for i in np.flatnonzero(ok):
            found.append((float(dist[i]), float(lam[i]), int(ids[i])))
        if found:
            stop = min(f[1] for f in found) + cfg.occlusion_margin
    if not found:
        return None
    front = min(f[1] for f in found)
    dist, lam, cid = min(f for f in found if f[1] <= front + cfg.occlusion_margin)
    return Association(ray.feature_id, cid, dist, lam)


def associate_raycast(pose, features: Sequence[Observation], cam: PinholeCamera,
                      grid: VoxelGrid, mixture: GaussianMixture,
                      cfg: AssocConfig = AssocConfig()) -> list[Association]:
    """Associate unmatched features to components by front-to-back ray casting.

    ``pose`` is the camera pose ``(R_WC, c_W)`` in the world frame.
    """
    rays = _feature_rays(pose, select_candidates(features, cfg.top_k), cam)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            found = list(ex.map(lambda r: _raycast_one(r, grid, mixture, cfg), rays))
    else:
        found = [_raycast_one(r, grid, mixture, cfg) for r in rays]
    return sorted((a for a in found if a is not None), key=lambda a: a.feature_id)


def associate_projection_baseline(pose, features: Sequence[Observation],
                                  cam: PinholeCamera, mixture: GaussianMixture,
                                  cfg: AssocConfig = AssocConfig()) -> list[Association]:
    """Project every component to a 2-D Gaussian, drop occluded ones, gate in 2-D."""
    R_WC, c_W = pose
    R_WC = np.asarray(R_WC, dtype=float)
    c_W = np.asarray(c_W, dtype=float)
    R_CW = R_WC.T
    t_CW = -R_CW @ c_W

    projected = []  # (depth, id, mean2, cov2)
    for comp in mixture:
        p_C = R_CW @ comp.mean + t_CW
        if p_C[2] < 0.1:
            continue
        J = projection_jacobian(cam, p_C) @ R_CW
        S = J @ comp.cov @ J.T
        m = np.array([cam.fx * p_C[0] / p_C[2] + cam.cx,
                      cam.fy * p_C[1] / p_C[2] + cam.cy])
        r = 3.0 * np.sqrt(max(S[0, 0], S[1, 1]))
        if (m[0] < -r or m[0] > cam.width + r or m[1] < -r or m[1] > cam.height + r):
            continue
        projected.append((float(p_C[2]), comp.id, m, S))
    projected.sort(key=lambda p: (p[0], p[1]))

    # occlusion: a component is hidden if a clearly nearer, already accepted
    # component covers its projected mean; neighbours found via a pixel bucket grid
    bucket = 32.0
    grid: dict = {}
    visible = []
    for depth, cid, m, S in projected:
        key = (int(m[0] // bucket), int(m[1] // bucket))
        occluded = False
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for d2, m2, S2i in grid.get((key[0] + dx, key[1] + dy), ()):
                    if d2 < depth - cfg.occlusion_margin:
                        r = m - m2
                        if r @ S2i @ r <= cfg.proj_gate ** 2:
                            occluded = True
                            break
                if occluded:
                    break
            if occluded:
                break
        if occluded:
            continue
        Si = np.linalg.inv(S)
        visible.append((depth, cid, m, Si))
        grid.setdefault(key, []).append((depth, m, Si))

    if not visible:
        return []
    ids = np.array([v[1] for v in visible])
    means = np.stack([v[2] for v in visible])
    infos = np.stack([v[3] for v in visible])
    out = []
    for f in select_candidates(features, cfg.top_k):
        r = np.asarray(f.u, dtype=float) - means
        d = np.sqrt(np.einsum("ki,kij,kj->k", r, infos, r))
        ok = np.flatnonzero(d <= cfg.proj_gate)
        if ok.size == 0:
            continue
        best = ok[np.argmin(d[ok])]
        ray = _feature_rays(pose, [f], cam)[0]
        try:
            lam = recover_depth(ray, mixture[int(ids[best])])
        except (ParallelRay, NegativeDepth):
            continue
        out.append(Association(f.feature_id, int(ids[best]),
                               ray_component_distance(ray, mixture[int(ids[best])]), lam))
    return sorted(out, key=lambda a: a.feature_id)


# ---------------------------------------------------------------- seeds

@dataclass
class Seed:
    id: int
    position: np.ndarray
    anchor_ray: Ray
    component_id: int
    observations: list = field(default_factory=list)   # (frame_id, pixel)
    max_parallax_px: float = 0.0
    status: str = "pending"                            # pending | active | dead


@dataclass(frozen=True)
class SeedConfig:
    min_parallax_px: float = 4.0
    min_obs: int = 4


def rotation_compensated_parallax(u_a, R_CW_a, u_b, R_CW_b, cam: PinholeCamera) -> float:
    """Pixel displacement of ``u_b`` from ``u_a`` after undoing the relative rotation."""
    b_world = R_CW_a.T @ unproject(cam, np.asarray(u_a, dtype=float))
    b = R_CW_b @ b_world
    if b[2] <= 1e-6:
        return float("inf")
    u_rot = np.array([cam.fx * b[0] / b[2] + cam.cx, cam.fy * b[1] / b[2] + cam.cy])
    return float(np.linalg.norm(np.asarray(u_b, dtype=float) - u_rot))


def seed_from_association(assoc: Association, ray: Ray, frame_id: int, u) -> Seed:
    return Seed(id=assoc.feature_id, position=assoc.point(ray), anchor_ray=ray,
                component_id=assoc.component_id,
                observations=[(frame_id, np.asarray(u, dtype=float))])


def seed_update(seeds: dict, frame_id: int, matched_obs: dict, window_frames,
                rotations: dict, cam: PinholeCamera,
                cfg: SeedConfig = SeedConfig()) -> list:
    """Absorb this frame's matches, promote seeds, and drop stale ones.

    ``seeds`` maps id to :class:`Seed` and is updated in place.
    ``matched_obs`` maps seed id to its pixel in ``frame_id``.
    ``rotations`` maps frame id to the camera rotation ``R_CW``.
    Returns the ids promoted to active in this call.
    """
    promoted = []
    R_now = rotations[frame_id]
    for sid, u in matched_obs.items():
        s = seeds.get(sid)
        if s is None or s.status == "dead":
            continue
        if s.observations and s.observations[-1][0] == frame_id:
            continue
        for fid, u_prev in s.observations:
            if fid in rotations:
                par = rotation_compensated_parallax(u_prev, rotations[fid], u, R_now, cam)
                if np.isfinite(par):
                    s.max_parallax_px = max(s.max_parallax_px, par)
        s.observations.append((frame_id, np.asarray(u, dtype=float)))
        if (s.status == "pending" and len(s.observations) >= cfg.min_obs
                and s.max_parallax_px >= cfg.min_parallax_px):
            s.status = "active"
            promoted.append(sid)

    window = set(window_frames)
    for sid in list(seeds):
        s = seeds[sid]
        if not any(fid in window for fid, _ in s.observations):
            s.status = "dead"
            del seeds[sid]
    return promoted
