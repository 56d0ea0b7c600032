"""Deterministic synthetic world for end-to-end checks.

A box room whose walls, floor and ceiling are tiled by flattened Gaussian
components, landmarks scattered on those surfaces, an analytic body
trajectory, and pinhole/IMU measurements with configurable noise.

Random streams use the counter-based Philox generator keyed by
``(rng_seed, stream)``, one stream per subsystem, so a change in one
subsystem never shifts the draws of another.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyOverlap
from .factors import PinholeCamera
from .gmm_map import GaussianMixture
from .imu import ImuNoiseParams, ImuSample
from .lie import exp_so3, log_so3, rotation_to_quaternion, rot_x, rot_y, rot_z
from .state import GRAVITY, Extrinsics

STREAM_WORLD = 0
STREAM_PIXELS = 1
STREAM_IMU = 2
STREAM_INIT = 3
STREAM_SCORES = 4

SURFACES = ("x0", "x1", "y0", "y1", "z0", "z1")

# camera looks along body +x, image x along body -y, image y along body -z
R_CB_FORWARD = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def rng_for(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class TrajectoryConfig:
    kind: str = "circle"            # circle | lissajous
    center: tuple = (4.0, 3.0, 1.5)
    radius: float = 2.0
    period: float = 10.0
    yaw_offset: float = 0.0         # 0: body x points radially outward
    amplitudes: tuple = (0.0, 0.0, 0.0)     # lissajous position amplitudes
    frequencies: tuple = (0.1, 0.1, 0.1)    # Hz
    phases: tuple = (0.0, 0.0, 0.0)
    z_amp: float = 0.1
    z_freq: float = 0.25
    yaw0: float = 0.0
    yaw_amp: float = 0.0
    yaw_freq: float = 0.1
    pitch_amp: float = 0.05
    pitch_freq: float = 0.3
    roll_amp: float = 0.05
    roll_freq: float = 0.2

    def __post_init__(self):
        if self.kind not in ("circle", "lissajous"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "circle" and not self.period > 0:
            raise ValueError("circle period must be positive")


@dataclass(frozen=True)
class WorldConfig:
    room: tuple = (8.0, 6.0, 3.0)
    surfaces: tuple = SURFACES
    n_components: int = 200
    component_thickness: float = 0.02     # sigma along the surface normal, m
    overlap: float = 0.6                  # in-plane sigma as a fraction of tile size
    n_landmarks: int = 1500
    landmark_dropout: float = 0.3
    landmark_offset_sigma: float = 0.005  # off-surface scatter of landmarks, m
    landmark_edge_margin: float = 0.15    # keep landmarks off surface borders, m


@dataclass(frozen=True)
class SimConfig:
    rng_seed: int = 0
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    duration: float = 10.0
    imu_rate: float = 200.0
    cam_rate: float = 20.0
    pixel_sigma: float = 1.0
    imu_noise: bool = True
    imu_params: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    imu_model: str = "consistent"         # consistent | analytic
    bias_g: tuple = (0.0, 0.0, 0.0)
    bias_a: tuple = (0.0, 0.0, 0.0)
    init_sigma_t: float = 0.0
    init_sigma_phi: float = 0.0
    camera: PinholeCamera = field(default_factory=PinholeCamera)
    t_CB: tuple = (0.0, 0.0, 0.05)
    image_margin: float = 2.0
    min_depth: float = 0.2

    def __post_init__(self):
        if not (self.imu_rate > 0 and self.cam_rate > 0):
            raise ValueError("rates must be positive")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("imu_rate must be an integer multiple of cam_rate")
        if self.imu_model not in ("consistent", "analytic"):
            raise ValueError(f"unknown imu_model {self.imu_model!r}")

    @property
    def extrinsics(self) -> Extrinsics:
        return Extrinsics(R_CB_FORWARD.copy(), np.array(self.t_CB, dtype=float))


# ---------------------------------------------------------------- trajectory

def _sinusoid(t, amp, freq, phase=0.0):
    w = 2.0 * np.pi * freq
    s, c = np.sin(w * t + phase), np.cos(w * t + phase)
    return amp * s, amp * w * c, -amp * w * w * s


@dataclass(frozen=True)
class Trajectory:
    """Closed-form body trajectory: position with two derivatives, ZYX Euler
    angles with one derivative."""

    cfg: TrajectoryConfig

    def position(self, t: float):
        c = self.cfg
        if c.kind == "circle":
            w = 2.0 * np.pi / c.period
            th = w * t
            p = np.array(c.center, float) + c.radius * np.array([np.cos(th), np.sin(th), 0.0])
            v = c.radius * w * np.array([-np.sin(th), np.cos(th), 0.0])
            a = -c.radius * w * w * np.array([np.cos(th), np.sin(th), 0.0])
            z, dz, ddz = _sinusoid(t, c.z_amp, c.z_freq)
            p[2] += z
            v[2] += dz
            a[2] += ddz
            return p, v, a
        p = np.array(c.center, float)
        v = np.zeros(3)
        a = np.zeros(3)
        for i in range(3):
            x, dx, ddx = _sinusoid(t, c.amplitudes[i], c.frequencies[i], c.phases[i])
            p[i] += x
            v[i] += dx
            a[i] += ddx
        return p, v, a

    def euler(self, t: float):
        """((yaw, pitch, roll), their rates)."""
        c = self.cfg
        if c.kind == "circle":
            w = 2.0 * np.pi / c.period
            yaw, dyaw = w * t + c.yaw_offset, w
        else:
            y, dy, _ = _sinusoid(t, c.yaw_amp, c.yaw_freq)
            yaw, dyaw = c.yaw0 + y, dy
        pitch, dpitch, _ = _sinusoid(t, c.pitch_amp, c.pitch_freq)
        roll, droll, _ = _sinusoid(t, c.roll_amp, c.roll_freq)
        return np.array([yaw, pitch, roll]), np.array([dyaw, dpitch, droll])

    def rotation(self, t: float) -> np.ndarray:
        (yaw, pitch, roll), _ = self.euler(t)
        return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)

    def body_rate(self, t: float) -> np.ndarray:
        (_, pitch, roll), (dyaw, dpitch, droll) = self.euler(t)
        sp, cp = np.sin(pitch), np.cos(pitch)
        sr, cr = np.sin(roll), np.cos(roll)
        return np.array([
            droll - dyaw * sp,
            dpitch * cr + dyaw * cp * sr,
            -dpitch * sr + dyaw * cp * cr,
        ])

    def specific_force(self, t: float, g: np.ndarray = GRAVITY) -> np.ndarray:
        _, _, a = self.position(t)
        return self.rotation(t).T @ (a - g)

    def state(self, t: float):
        p, v, a = self.position(t)
        return self.rotation(t), p, v


def generate_trajectory(cfg: SimConfig) -> Trajectory:
    return Trajectory(cfg.trajectory)


# ---------------------------------------------------------------- world

@dataclass
class World:
    mixture: GaussianMixture
    landmarks: np.ndarray          # (M, 3)
    landmark_component: np.ndarray  # (M,)
    in_prior_map: np.ndarray        # (M,) bool
    landmark_normals: np.ndarray    # (M, 3) inward surface normal
    surface_of_component: list


def _surface_frame(name: str, room):
    """(origin, u axis, v axis, inward normal, extent_u, extent_v)."""
    Lx, Ly, Lz = room
    ex, ey, ez = np.eye(3)
    if name == "x0":
        return np.zeros(3), ey, ez, ex, Ly, Lz
    if name == "x1":
        return np.array([Lx, 0, 0.0]), ey, ez, -ex, Ly, Lz
    if name == "y0":
        return np.zeros(3), ex, ez, ey, Lx, Lz
    if name == "y1":
        return np.array([0, Ly, 0.0]), ex, ez, -ey, Lx, Lz
    if name == "z0":
        return np.zeros(3), ex, ey, ez, Lx, Ly
    if name == "z1":
        return np.array([0, 0, Lz]), ex, ey, -ez, Lx, Ly
    raise ValueError(f"unknown surface {name!r}")


def _tiling(cfg: WorldConfig):
    frames = [_surface_frame(s, cfg.room) for s in cfg.surfaces]
    area = sum(f[4] * f[5] for f in frames)
    best = None
    for size in np.linspace(np.sqrt(area / cfg.n_components) * 0.5,
                            np.sqrt(area / cfg.n_components) * 2.0, 400):
        counts = [(max(1, int(round(f[4] / size))), max(1, int(round(f[5] / size))))
                  for f in frames]
        total = sum(a * b for a, b in counts)
        if best is None or abs(total - cfg.n_components) < abs(best[0] - cfg.n_components):
            best = (total, counts)
    return frames, best[1]


def generate_world(cfg: SimConfig) -> World:
    wc = cfg.world
    rng = rng_for(cfg.rng_seed, STREAM_WORLD)
    frames, counts = _tiling(wc)
    weights, means, covs, surf_of = [], [], [], []
    tiles = []   # per surface: (nu, nv, first component id)
    for si, ((o, u, v, n, Lu, Lv), (nu, nv)) in enumerate(zip(frames, counts)):
        su, sv = Lu / nu, Lv / nv
        sig_u, sig_v = wc.overlap * su, wc.overlap * sv
        sig_n = min(wc.component_thickness, min(sig_u, sig_v) / 5.0)
        R = np.column_stack([n, u, v])
        cov = R @ np.diag([sig_n ** 2, sig_u ** 2, sig_v ** 2]) @ R.T
        tiles.append((nu, nv, len(means)))
        for i in range(nu):
            for j in range(nv):
                means.append(o + (i + 0.5) * su * u + (j + 0.5) * sv * v)
                covs.append(cov)
                surf_of.append(cfg.world.surfaces[si])
    k = len(means)
    weights = np.full(k, 1.0 / k)
    mixture = GaussianMixture.from_arrays(weights, means, covs)

    areas = np.array([f[4] * f[5] for f in frames])
    m = wc.n_landmarks
    surf_idx = rng.choice(len(frames), size=m, p=areas / areas.sum())
    uv = rng.random((m, 2))
    offsets = rng.normal(size=m)
    keep = rng.random(m) >= wc.landmark_dropout
    pts = np.empty((m, 3))
    comp = np.empty(m, dtype=int)
    normals = np.empty((m, 3))
    margin = wc.landmark_edge_margin
    for i in range(m):
        o, u, v, n, Lu, Lv = frames[surf_idx[i]]
        nu, nv, first = tiles[surf_idx[i]]
        a = margin + uv[i, 0] * max(Lu - 2 * margin, 0.0)
        b = margin + uv[i, 1] * max(Lv - 2 * margin, 0.0)
        sig_n = np.sqrt(covs[first][np.argmax(np.abs(n)), np.argmax(np.abs(n))])
        off = np.clip(offsets[i], -3.0, 3.0) * min(wc.landmark_offset_sigma, sig_n)
        pts[i] = o + a * u + b * v + off * n
        ti = min(int(a / (Lu / nu)), nu - 1)
        tj = min(int(b / (Lv / nv)), nv - 1)
        comp[i] = first + ti * nv + tj
        normals[i] = n
    return World(mixture, pts, comp, keep, normals, surf_of)


# ---------------------------------------------------------------- measurements

@dataclass
class FrameTruth:
    stamp: float
    R_WB: np.ndarray
    p_W: np.ndarray
    v_W: np.ndarray
    bg: np.ndarray
    ba: np.ndarray


@dataclass
class GroundTruth:
    frames: list
    landmarks: np.ndarray
    landmark_component: np.ndarray


@dataclass
class FrameMeasurement:
    frame_id: int
    stamp: float
    landmark_ids: np.ndarray      # track ids (true landmark index)
    pixels: np.ndarray            # (N, 2)
    scores: np.ndarray            # (N,)
    imu: list                     # ImuSample list covering (prev frame, this frame]


@dataclass
class Dataset:
    cfg: SimConfig
    world: World
    truth: GroundTruth
    frames: list
    camera: PinholeCamera
    extrinsics: Extrinsics
    trajectory: Trajectory

    @property
    def imu_stream(self):
        """Flattened ``(stamp, ImuSample)`` pairs; stamp is the sample start."""
        out = []
        for fm in self.frames[1:]:
            t = fm.stamp - sum(s.dt for s in fm.imu)
            for s in fm.imu:
                out.append((t, s))
                t += s.dt
        return out


def _consistent_accels(traj: Trajectory, t0: float, dt: float, m: int, g):
    """World-frame specific forces c_i so that Euler integration from the
    analytic state at ``t0`` lands exactly on the analytic state at ``t0 + m dt``.

    Starts from the analytic value at each sub-interval midpoint and applies
    the least-norm correction meeting the velocity and position constraints.
    """
    T = m * dt
    p0, v0, _ = traj.position(t0)
    p1, v1, _ = traj.position(t0 + T)
    c0 = np.stack([traj.position(t0 + (i + 0.5) * dt)[2] - g for i in range(m)])
    A = np.vstack([np.full(m, dt), dt * dt * (m - np.arange(m) - 0.5)])
    req = np.vstack([v1 - v0 - g * T, p1 - p0 - v0 * T - 0.5 * g * T * T])
    resid = req - A @ c0
    corr = A.T @ np.linalg.solve(A @ A.T, resid)
    return c0 + corr


def synthesize_measurements(cfg: SimConfig, traj: Trajectory, world: World) -> Dataset:
    cam = cfg.camera
    extr = cfg.extrinsics
    g = GRAVITY
    n_frames = int(np.floor(cfg.duration * cfg.cam_rate + 1e-9)) + 1
    per = int(round(cfg.imu_rate / cfg.cam_rate))
    dt = 1.0 / cfg.imu_rate
    bg = np.array(cfg.bias_g, float)
    ba = np.array(cfg.bias_a, float)
    rng_px = rng_for(cfg.rng_seed, STREAM_PIXELS)
    rng_imu = rng_for(cfg.rng_seed, STREAM_IMU)
    rng_sc = rng_for(cfg.rng_seed, STREAM_SCORES)
    ip = cfg.imu_params

    truths, frames = [], []
    for k in range(n_frames):
        t = k / cfg.cam_rate
        R, p, v = traj.state(t)
        truths.append(FrameTruth(t, R, p, v, bg.copy(), ba.copy()))

        imu = []
        if k > 0:
            t0 = (k - 1) / cfg.cam_rate
            if cfg.imu_model == "consistent":
                cw = _consistent_accels(traj, t0, dt, per, g)
            for i in range(per):
                ts = t0 + i * dt
                if cfg.imu_model == "consistent":
                    Ri = traj.rotation(ts)
                    w = log_so3(Ri.T @ traj.rotation(ts + dt)) / dt
                    a = Ri.T @ cw[i]
                else:
                    w = traj.body_rate(ts)
                    a = traj.specific_force(ts, g)
                w = w + bg
                a = a + ba
                if cfg.imu_noise:
                    w = w + rng_imu.normal(size=3) * ip.sigma_g / np.sqrt(dt)
                    a = a + rng_imu.normal(size=3) * ip.sigma_a / np.sqrt(dt)
                imu.append(ImuSample(w, a, dt))

        R_CW = extr.R_CB @ R.T
        t_CW = -R_CW @ p + extr.t_CB
        c_W = -R_CW.T @ t_CW
        P_C = world.landmarks @ R_CW.T + t_CW
        facing = np.einsum("ij,ij->i", world.landmark_normals, c_W - world.landmarks) > 0
        front = P_C[:, 2] > cfg.min_depth
        z = np.where(front, P_C[:, 2], 1.0)
        uv = np.column_stack([cam.fx * P_C[:, 0] / z + cam.cx, cam.fy * P_C[:, 1] / z + cam.cy])
        vis = front & facing & cam.in_image(uv, cfg.image_margin)
        ids = np.flatnonzero(vis)
        noise = rng_px.normal(size=(len(ids), 2)) * cfg.pixel_sigma
        scores = rng_sc.random(len(ids))
        frames.append(FrameMeasurement(k, t, ids, uv[ids] + noise, scores, imu))

    truth = GroundTruth(truths, world.landmarks, world.landmark_component)
    return Dataset(cfg, world, truth, frames, cam, extr, traj)


def simulate(cfg: SimConfig) -> Dataset:
    traj = generate_trajectory(cfg)
    world = generate_world(cfg)
    return synthesize_measurements(cfg, traj, world)


def initial_pose(cfg: SimConfig, truth: FrameTruth):
    """Oracle initialization: ground truth perturbed by (init_sigma_t, init_sigma_phi)."""
    rng = rng_for(cfg.rng_seed, STREAM_INIT)
    dphi = rng.normal(size=3) * cfg.init_sigma_phi
    dp = rng.normal(size=3) * cfg.init_sigma_t
    return truth.R_WB @ exp_so3(dphi), truth.p_W + dp


# ---------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    mape_m: float
    recall_pct: float
    ape: np.ndarray
    rmse_m: float


def evaluate(est: dict, gt: GroundTruth, localized: dict | None = None) -> Evaluation:
    """Absolute position error in the shared map frame (no alignment).

    ``est`` maps frame index to an estimated world position; ``localized``
    maps frame index to the success flag (missing means localized).
    """
    ids = sorted(i for i in est if 0 <= i < len(gt.frames))
    if not ids:
        raise EmptyOverlap("no estimated frame matches the ground truth")
    ape = np.array([np.linalg.norm(np.asarray(est[i]) - gt.frames[i].p_W) for i in ids])
    loc = localized or {}
    n_ok = sum(1 for i in range(len(gt.frames)) if loc.get(i, i in est))
    return Evaluation(float(ape.mean()), 100.0 * n_ok / len(gt.frames), ape,
                      float(np.sqrt(np.mean(ape ** 2))))


def write_tum(path, stamps: Sequence[float], rotations: Sequence[np.ndarray],
              positions: Sequence[np.ndarray]) -> None:
    with open(path, "w") as fh:
        for t, R, p in zip(stamps, rotations, positions):
            q = rotation_to_quaternion(R)
            fh.write(" ".join(f"{x:.9f}" for x in (t, *p, *q)) + "\n")


def read_tum(path):
    data = np.loadtxt(path, ndmin=2)
    return data[:, 0], data[:, 1:4], data[:, 4:8]
