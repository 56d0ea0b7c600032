"""Frame-by-frame localization against a hybrid map.

Stages per frame, timed separately: ``Pred`` (IMU or constant-velocity
prediction), ``Track`` (instant localization on tracked 2D-3D matches),
``Update`` (seed bookkeeping), ``Creation`` (new seeds from unmatched
features) and ``Opt`` (windowed motion-only BA plus landmark refinement).
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .association import (AssocConfig, Ray, Seed, SeedConfig, associate_projection_baseline,
                          associate_raycast, seed_from_association, seed_update)
from .errors import InsufficientObservations, LocalizationError
from .estimator import (ReprojectionFactor, SolverConfig, StatePriorFactor, WindowConfig,
                        marginalize_visual, schur_marginal, solve_instant, structure_only_ba_batch,
                        windowed_motion_ba)
from .factors import Observation, unproject
from .gmm_map import GaussianMixture, build_voxel_index
from .imu import integrate
from .sim import initial_pose
from .state import (GRAVITY, StateVector, predict_constant_velocity,
                    predict_state_with_imu)

MODES = ("V", "V+I", "V+I+L", "V+I+P")
BACKENDS = ("prior", "visual")
STAGES = ("Pred", "Track", "Update", "Creation", "Opt")


@dataclass(frozen=True)
class LocalizerConfig:
    mode: str = "V+I+L"
    backend: str = "prior"              # window visual term: pose priors | raw reprojection
    window: WindowConfig = field(default_factory=WindowConfig)
    assoc: AssocConfig = field(default_factory=AssocConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    voxel_size: float = 0.1
    voxel_rel_mass: float = 0.1
    max_reproj_px: float = 3.0          # localized iff mean reprojection error below this
    init_sigma_t: float = 10.0          # weak prior on the first frame
    init_sigma_phi: float = 1.0
    init_sigma_v: float = 0.1
    init_sigma_bg: float = 0.01
    init_sigma_ba: float = 0.1
    refine_landmarks: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")

    @property
    def inertial(self) -> bool:
        return self.mode != "V"

    @property
    def creation(self) -> str | None:
        return {"V+I+L": "raycast", "V+I+P": "projection"}.get(self.mode)


@dataclass
class FrameResult:
    frame_id: int
    stamp: float
    state: StateVector
    localized: bool
    n_factors: int
    mean_reproj_px: float


@dataclass
class RunResult:
    frames: list                        # FrameResult, final (window-refined) states
    timings: dict                       # stage -> list of per-frame seconds
    opt_window_s: list                  # windowed BA time per frame
    n_active_landmarks: list
    seeds_created: int = 0

    def timing_table(self) -> list:
        out = []
        for name in STAGES:
            v = np.array(self.timings.get(name, []), dtype=float) * 1e3
            out.append({"name": name, "mean_ms": float(v.mean()) if v.size else 0.0,
                        "std_ms": float(v.std()) if v.size else 0.0})
        return out

    def positions(self) -> dict:
        return {f.frame_id: f.state.p_W for f in self.frames}

    def localized(self) -> dict:
        return {f.frame_id: f.localized for f in self.frames}


@dataclass(frozen=True)
class WindowInputs:
    """Everything a windowed BA call consumes, oldest frame first."""
    states: list
    inertial: list          # inertial[i] links frames i and i+1
    priors: list
    reproj: list


def optimize_window(w: WindowInputs, backend: str, cfg: WindowConfig = WindowConfig(),
                    g: np.ndarray = GRAVITY):
    if backend == "prior":
        return windowed_motion_ba(w.states, w.inertial, pose_priors=w.priors, cfg=cfg, g=g)
    return windowed_motion_ba(w.states, w.inertial, reproj=w.reproj, cfg=cfg, g=g)


def _diag_info(sig_phi, sig_t, sig_v, sig_bg, sig_ba) -> np.ndarray:
    s = np.concatenate([np.full(3, sig_phi), np.full(3, sig_t), np.full(3, sig_v),
                        np.full(3, sig_bg), np.full(3, sig_ba)])
    return np.diag(1.0 / s ** 2)


class Localizer:
    """Stateful per-sequence estimator. Feed frames in order with :meth:`step`."""

    def __init__(self, mixture: GaussianMixture, landmarks: np.ndarray, in_map: np.ndarray,
                 cam, extr, cfg: LocalizerConfig = LocalizerConfig(), imu_noise=None,
                 g: np.ndarray = GRAVITY):
        self.mixture = mixture
        self.landmarks = np.asarray(landmarks, dtype=float)
        self.in_map = np.asarray(in_map, dtype=bool)
        self.cam = cam
        self.extr = extr
        self.cfg = cfg
        self.imu_noise = imu_noise
        self.g = g
        self.grid = (build_voxel_index(mixture, cfg.voxel_size, cfg.voxel_rel_mass)
                     if cfg.creation == "raycast" else None)
        self.seeds: dict[int, Seed] = {}
        self.states: dict[int, StateVector] = {}
        self.localized: dict[int, bool] = {}
        self.stats: dict[int, tuple] = {}
        self.reproj: dict[int, ReprojectionFactor] = {}
        self.priors: dict = {}
        self.preint: dict = {}
        self.window: deque = deque(maxlen=cfg.window.size)
        self.prev_prior_info: np.ndarray | None = None
        self.timings = {s: [] for s in STAGES}
        self.opt_window_s: list = []
        self.n_active: list = []
        self.seeds_created = 0
        self.capture: list | None = None    # set to a list to record window inputs

    # ------------------------------------------------------------ helpers
    def _track_factor(self, fid: int, ids: np.ndarray, pixels: np.ndarray):
        """Reprojection factor for map landmarks and active temporal landmarks."""
        pts, px, used = [], [], []
        for lid, u in zip(ids, pixels):
            lid = int(lid)
            if self.in_map[lid]:
                pts.append(self.landmarks[lid])
            else:
                s = self.seeds.get(lid)
                if s is None or s.status != "active":
                    continue
                pts.append(s.position)
            px.append(u)
            used.append(lid)
        return ReprojectionFactor(0, np.array(pts).reshape(-1, 3), np.array(px).reshape(-1, 2),
                                  self.extr, self.cam, 1.0, ids=np.array(used, dtype=int))

    def _camera_rotation(self, x: StateVector) -> np.ndarray:
        return self.extr.R_CB @ x.R_BW

    # ------------------------------------------------------------ stages
    def _predict(self, fm, x_init):
        k = fm.frame_id
        if k == 0 or not self.window:
            return x_init, None
        prev = self.window[-1]
        x_prev = self.states[prev]
        if self.cfg.inertial:
            f = integrate(fm.imu, x_prev.bias, self.imu_noise)
            x = predict_state_with_imu(x_prev, f, self.g).replace(stamp=fm.stamp)
            return x, f
        if len(self.window) >= 2:
            x_pp = self.states[self.window[-2]]
            R, p = predict_constant_velocity(x_prev, x_pp)
            return StateVector.from_world(R, p, stamp=fm.stamp), None
        return x_prev.replace(stamp=fm.stamp), None

    def _instant(self, fm, x_pred, f):
        k = fm.frame_id
        reproj = self._track_factor(k, fm.landmark_ids, fm.pixels)
        first = not self.window
        try:
            if first or not self.cfg.inertial:
                prior = None
                if first:
                    c = self.cfg
                    prior = StatePriorFactor(0, x_pred, _diag_info(
                        c.init_sigma_phi, c.init_sigma_t, c.init_sigma_v,
                        c.init_sigma_bg, c.init_sigma_ba))
                res = solve_instant(x_pred, None, reproj, None, prior, self.g, self.cfg.solver)
                x_k = res.x_k
                if self.cfg.inertial:
                    c = self.cfg
                    Hp, _ = schur_marginal(res.ne, ["k.phi", "k.t"])
                    info = _diag_info(1.0, 1.0, c.init_sigma_v, c.init_sigma_bg, c.init_sigma_ba)
                    info[:6, :6] = Hp
                    self.prev_prior_info = info
            else:
                prev = self.window[-1]
                x_prev = self.states[prev]
                prior = StatePriorFactor(0, x_prev, self.prev_prior_info)
                res = solve_instant(x_pred, x_prev, reproj, f, prior, self.g, self.cfg.solver)
                x_k = res.x_k
                Hk, _ = schur_marginal(res.ne, res.ne.names_with_prefix("k"))
                self.prev_prior_info = Hk
            ok = res.mean_reproj_px <= self.cfg.max_reproj_px
            return x_k, ok, reproj, res.mean_reproj_px
        except (InsufficientObservations, np.linalg.LinAlgError, LocalizationError):
            if self.cfg.inertial and self.prev_prior_info is not None:
                # carry a deflated prior over the gap
                self.prev_prior_info = 0.01 * self.prev_prior_info
            return x_pred, False, reproj, float("inf")

    def _update(self, fm):
        k = fm.frame_id
        matched = {}
        for lid, u in zip(fm.landmark_ids, fm.pixels):
            lid = int(lid)
            if lid in self.seeds:
                matched[lid] = u
        rotations = {fid: self._camera_rotation(self.states[fid]) for fid in self.window}
        return seed_update(self.seeds, k, matched, list(self.window), rotations, self.cam,
                           self.cfg.seeds)

    def _create(self, fm):
        mode = self.cfg.creation
        if mode is None:
            return
        k = fm.frame_id
        x = self.states[k]
        feats = []
        for lid, u, sc in zip(fm.landmark_ids, fm.pixels, fm.scores):
            lid = int(lid)
            if self.in_map[lid] or lid in self.seeds:
                continue
            feats.append(Observation(u=np.asarray(u, float), feature_id=lid, frame_id=k,
                                     score=float(sc)))
        if not feats:
            return
        R_CW, t_CW = self.extr.camera_pose(x)
        pose = (R_CW.T, -R_CW.T @ t_CW)
        if mode == "raycast":
            assoc = associate_raycast(pose, feats, self.cam, self.grid, self.mixture,
                                      self.cfg.assoc)
        else:
            assoc = associate_projection_baseline(pose, feats, self.cam, self.mixture,
                                                  self.cfg.assoc)
        by_id = {f.feature_id: f for f in feats}
        for a in assoc:
            f = by_id[a.feature_id]
            ray = Ray(pose[1], pose[0] @ unproject(self.cam, f.u), f.feature_id)
            self.seeds[a.feature_id] = seed_from_association(a, ray, k, f.u)
            self.seeds_created += 1

    def _optimize(self, k):
        ids = list(self.window)
        t0 = time.perf_counter()
        if self.cfg.inertial and len(ids) >= 2:
            w = WindowInputs([self.states[i] for i in ids], [self.preint.get(i) for i in ids[1:]],
                             [self.priors.get(i) for i in ids], [self.reproj.get(i) for i in ids])
            if self.capture is not None:
                self.capture.append(w)
            res = optimize_window(w, self.cfg.backend, self.cfg.window, self.g)
            for i, x in zip(ids, res.states):
                self.states[i] = x
        self.opt_window_s.append(time.perf_counter() - t0)
        if self.cfg.refine_landmarks:
            self._refine_landmarks(ids)

    def _refine_landmarks(self, ids):
        poses = {i: self.extr.camera_pose(self.states[i]) for i in ids}
        todo, obs_all = [], []
        for sid, s in self.seeds.items():
            if s.status != "active":
                continue
            obs = [(poses[fid][0], poses[fid][1], u) for fid, u in s.observations
                   if fid in poses]
            if len(obs) >= 2:
                todo.append(s)
                obs_all.append(obs)
        if not todo:
            return
        comps = [self.mixture[s.component_id] for s in todo]
        planes = (np.stack([c.normal for c in comps]), np.stack([c.mean for c in comps]),
                  np.array([c.eigvals[0] for c in comps]))
        pos, ok, _ = structure_only_ba_batch([s.position for s in todo], obs_all, self.cam,
                                             planes)
        for s, p, good in zip(todo, pos, ok):
            if good:
                s.position = p
            else:
                # demote: needs fresh observations before it is trusted again
                s.status = "pending"
                s.observations = s.observations[-1:]
                s.max_parallax_px = 0.0

    # ------------------------------------------------------------ driver
    def step(self, fm, x_init: StateVector | None = None) -> None:
        """Process one frame. ``x_init`` seeds the very first frame."""
        k = fm.frame_id
        t = time.perf_counter()
        x_pred, f = self._predict(fm, x_init)
        t1 = time.perf_counter()
        self.timings["Pred"].append(t1 - t)

        x_k, ok, reproj, mean_px = self._instant(fm, x_pred, f)
        self.states[k] = x_k
        self.localized[k] = bool(ok)
        self.stats[k] = (len(reproj), mean_px)
        self.reproj[k] = reproj
        self.priors[k] = marginalize_visual(reproj, x_k, k)
        if f is not None:
            self.preint[k] = f
        self.window.append(k)
        t2 = time.perf_counter()
        self.timings["Track"].append(t2 - t1)

        self._update(fm)
        t3 = time.perf_counter()
        self.timings["Update"].append(t3 - t2)

        self._create(fm)
        t4 = time.perf_counter()
        self.timings["Creation"].append(t4 - t3)

        self._optimize(k)
        self.timings["Opt"].append(time.perf_counter() - t4)
        self.n_active.append(sum(1 for s in self.seeds.values() if s.status == "active"))
        # drop per-frame data that can no longer enter a window
        for d in (self.reproj, self.priors, self.preint):
            for old in [i for i in d if i < k - self.cfg.window.size]:
                del d[old]

    def result(self) -> RunResult:
        frames = [FrameResult(k, self.states[k].stamp, self.states[k], self.localized[k],
                              *self.stats[k]) for k in sorted(self.states)]
        return RunResult(frames, self.timings, self.opt_window_s, self.n_active,
                         self.seeds_created)


def initial_state(ds, cfg_sim) -> StateVector:
    """Oracle start: perturbed ground-truth pose, true velocity, zero bias."""
    tr = ds.truth.frames[0]
    R, p = initial_pose(cfg_sim, tr)
    return StateVector.from_world(R, p, tr.v_W, np.zeros(3), np.zeros(3), tr.stamp)


def run_sequence(ds, cfg: LocalizerConfig = LocalizerConfig(),
                 capture: list | None = None) -> RunResult:
    """Localize every frame of a simulated dataset.

    If ``capture`` is a list, the inputs of every windowed BA call are appended.
    """
    loc = Localizer(ds.world.mixture, ds.world.landmarks, ds.world.in_prior_map, ds.camera,
                    ds.extrinsics, cfg, ds.cfg.imu_params)
    loc.capture = capture
    x0 = initial_state(ds, ds.cfg)
    for fm in ds.frames:
        loc.step(fm, x0 if fm.frame_id == 0 else None)
    return loc.result()

