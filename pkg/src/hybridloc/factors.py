"""Residuals and analytic Jacobians: reprojection, inertial, pose prior.

Jacobians are taken w.r.t. the error state of :func:`hybridloc.state.boxplus`.
The inertial residual is ordered ``[rot, vel, pos, bias_g, bias_a]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DurationMismatch
from .imu import PreintegratedFactor
from .lie import (exp_so3, exp_so3_batch, hat, hat_batch, log_so3, log_so3_batch,
                  right_jacobian, right_jacobian_batch, right_jacobian_inv,
                  right_jacobian_inv_batch)
from .state import (BA, BG, GRAVITY, PHI, STATE_DIM, TRANS, VEL, Extrinsics,
                    StateVector)

MIN_DEPTH = 1e-6
HUBER_DELTA = 2.45


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    def in_image(self, u: np.ndarray, margin: float = 0.0) -> np.ndarray:
        u = np.atleast_2d(u)
        return ((u[:, 0] >= margin) & (u[:, 0] < self.width - margin)
                & (u[:, 1] >= margin) & (u[:, 1] < self.height - margin))


@dataclass(frozen=True)
class Observation:
    u: np.ndarray
    feature_id: int
    frame_id: int
    sigma: np.ndarray = field(default_factory=lambda: np.eye(2))
    score: float = 1.0


@dataclass(frozen=True)
class PosePriorFactor:
    R_hat: np.ndarray     # R_WB at the marginalization point
    t_hat: np.ndarray     # body-frame translation t_BW
    info: np.ndarray      # 6x6 over (dphi, dt)
    frame_id: int = -1
    rank_deficient: bool = False


@dataclass(frozen=True)
class RobustKernel:
    kind: str = "huber"
    delta: float = HUBER_DELTA

    def __post_init__(self):
        if self.kind not in ("none", "huber"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("huber delta must be positive")


def robust_weight(e_sq, kernel: RobustKernel):
    """IRLS weight for a squared whitened error (vectorized)."""
    e_sq = np.asarray(e_sq, dtype=float)
    if kernel.kind == "none":
        return np.ones_like(e_sq)
    e = np.sqrt(e_sq)
    with np.errstate(divide="ignore"):
        return np.where(e <= kernel.delta, 1.0, kernel.delta / np.maximum(e, 1e-300))


def robust_cost(e_sq, kernel: RobustKernel):
    """Huber rho of the squared error; ``e_sq`` itself when no kernel."""
    e_sq = np.asarray(e_sq, dtype=float)
    if kernel.kind == "none":
        return e_sq
    d = kernel.delta
    e = np.sqrt(e_sq)
    return np.where(e <= d, e_sq, 2.0 * d * e - d * d)


# ---------------------------------------------------------------- camera

def project(cam: PinholeCamera, p_C) -> np.ndarray:
    p = np.asarray(p_C, dtype=float)
    z = p[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCamera("point at or behind the image plane")
    return np.stack([cam.fx * p[..., 0] / z + cam.cx,
                     cam.fy * p[..., 1] / z + cam.cy], axis=-1)


def unproject(cam: PinholeCamera, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    b = np.stack([(u[..., 0] - cam.cx) / cam.fx,
                  (u[..., 1] - cam.cy) / cam.fy,
                  np.ones(u.shape[:-1])], axis=-1)
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def projection_jacobian(cam: PinholeCamera, p_C: np.ndarray) -> np.ndarray:
    """d pi / d p_C, shape (..., 2, 3)."""
    p = np.asarray(p_C, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    iz = 1.0 / z
    J = np.zeros(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = cam.fx * iz
    J[..., 0, 2] = -cam.fx * x * iz * iz
    J[..., 1, 1] = cam.fy * iz
    J[..., 1, 2] = -cam.fy * y * iz * iz
    return J


# ---------------------------------------------------------------- reprojection

def point_in_camera(x: StateVector, p_W, extr: Extrinsics) -> np.ndarray:
    R_CW, t_CW = extr.camera_pose(x)
    return np.asarray(p_W, dtype=float) @ R_CW.T + t_CW


def reprojection_residual(x: StateVector, p_W, obs_u, extr: Extrinsics,
                          cam: PinholeCamera) -> np.ndarray:
    """``pi(p_C) - u``; broadcasts over stacked landmarks ``(N, 3)``/``(N, 2)``."""
    p_C = point_in_camera(x, p_W, extr)
    return project(cam, p_C) - np.asarray(obs_u, dtype=float)


def reprojection_jacobian(x: StateVector, p_W, extr: Extrinsics, cam: PinholeCamera):
    """Returns ``(J_pose, J_point)``: (..., 2, 6) over [dphi, dt] and (..., 2, 3)."""
    p_W = np.asarray(p_W, dtype=float)
    R_BW = x.R_BW
    R_CW = extr.R_CB @ R_BW
    p_C = p_W @ R_CW.T + (extr.R_CB @ x.t + extr.t_CB)
    if np.any(p_C[..., 2] <= MIN_DEPTH):
        raise BehindCamera("point at or behind the image plane")
    Jpi = projection_jacobian(cam, p_C)
    # d p_C / d dphi = -R_CB R_BW [p_W]x
    P = _hat_stack(p_W)
    dpc_dphi = -np.einsum("ij,...jk->...ik", R_CW, P)
    J_pose = np.concatenate([Jpi @ dpc_dphi, Jpi @ extr.R_CB], axis=-1)
    J_point = Jpi @ R_CW
    return J_pose, J_point


def _hat_stack(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------- inertial

def _check_duration(x_j: StateVector, x_k: StateVector, f: PreintegratedFactor):
    if abs(f.duration - (x_k.stamp - x_j.stamp)) > 1e-6:
        raise DurationMismatch(
            f"factor spans {f.duration:.9f} s but states are "
            f"{x_k.stamp - x_j.stamp:.9f} s apart")


def inertial_residual(x_j: StateVector, x_k: StateVector, f: PreintegratedFactor,
                      g: np.ndarray = GRAVITY, check_duration: bool = True) -> np.ndarray:
    if check_duration:
        _check_duration(x_j, x_k, f)
    T = f.duration
    dbg = x_j.bg - f.bias_ref[:3]
    dba = x_j.ba - f.bias_ref[3:]
    dR, dv, dp = f.corrected(dbg, dba)
    R_j, R_k = x_j.R_WB, x_k.R_WB
    p_j, p_k = x_j.p_W, x_k.p_W
    e = np.empty(STATE_DIM)
    # the printed form log(dR R_BkW R_WBj) has mixed indices and lacks a
    # transpose; this is the variant that vanishes on consistent data
    e[0:3] = log_so3(dR.T @ R_j.T @ R_k)
    e[3:6] = R_j.T @ (x_k.v - x_j.v - g * T) - dv
    e[6:9] = R_j.T @ (p_k - p_j - x_j.v * T - 0.5 * g * T * T) - dp
    e[9:12] = x_j.bg - x_k.bg
    e[12:15] = x_j.ba - x_k.ba
    return e


def inertial_jacobians(x_j: StateVector, x_k: StateVector, f: PreintegratedFactor,
                       g: np.ndarray = GRAVITY, check_duration: bool = True):
    """``(J_j, J_k)``, each 15x15, of :func:`inertial_residual`.

    Derived in world-frame form (right perturbation ``theta`` of ``R_WB``,
    additive world position) and chained through the stored parameterization,
    where ``theta = -R_BW dphi``, ``dp_W/ddphi = [p_W]x`` and
    ``dp_W/ddt = -R_WB``. The printed appendix blocks differ in sign/frame
    (e.g. the pos/phi_k block); these forms are the ones that match finite
    differences.
    """
    if check_duration:
        _check_duration(x_j, x_k, f)
    T = f.duration
    dbg = x_j.bg - f.bias_ref[:3]
    dba = x_j.ba - f.bias_ref[3:]
    dR, _, _ = f.corrected(dbg, dba)
    R_j, R_k = x_j.R_WB, x_k.R_WB
    p_j, p_k = x_j.p_W, x_k.p_W
    Rjt = R_j.T
    r_rot = log_so3(dR.T @ Rjt @ R_k)
    Jri = right_jacobian_inv(r_rot)
    u_v = Rjt @ (x_k.v - x_j.v - g * T)
    u_p = Rjt @ (p_k - p_j - x_j.v * T - 0.5 * g * T * T)

    # world-form partials
    drot_dth_j = -Jri @ R_k.T @ R_j
    drot_dth_k = Jri
    dvel_dth_j = hat(u_v)
    dpos_dth_j = hat(u_p)
    dpos_dp_j = -Rjt
    dpos_dp_k = Rjt

    # chain to [dphi, dt]
    dth_dphi_j = -Rjt
    dth_dphi_k = -R_k.T
    dp_dphi_j, dp_dt_j = hat(p_j), -R_j
    dp_dphi_k, dp_dt_k = hat(p_k), -R_k

    Jj = np.zeros((STATE_DIM, STATE_DIM))
    Jk = np.zeros((STATE_DIM, STATE_DIM))
    ROT, V_, P_ = slice(0, 3), slice(3, 6), slice(6, 9)

    Jj[ROT, PHI] = drot_dth_j @ dth_dphi_j
    Jk[ROT, PHI] = drot_dth_k @ dth_dphi_k
    Jj[ROT, BG] = -Jri @ exp_so3(r_rot).T @ right_jacobian(f.J_dR_bg @ dbg) @ f.J_dR_bg

    Jj[V_, PHI] = dvel_dth_j @ dth_dphi_j
    Jj[V_, VEL] = -Rjt
    Jk[V_, VEL] = Rjt
    Jj[V_, BG] = -f.J_dv_bg
    Jj[V_, BA] = -f.J_dv_ba

    Jj[P_, PHI] = dpos_dth_j @ dth_dphi_j + dpos_dp_j @ dp_dphi_j
    Jj[P_, TRANS] = dpos_dp_j @ dp_dt_j
    Jk[P_, PHI] = dpos_dp_k @ dp_dphi_k
    Jk[P_, TRANS] = dpos_dp_k @ dp_dt_k
    Jj[P_, VEL] = -Rjt * T
    Jj[P_, BG] = -f.J_dp_bg
    Jj[P_, BA] = -f.J_dp_ba

    I3 = np.eye(3)
    Jj[9:12, BG] = I3
    Jk[9:12, BG] = -I3
    Jj[12:15, BA] = I3
    Jk[12:15, BA] = -I3
    return Jj, Jk


class PreintegratedBatch:
    """Several preintegrated factors stacked along a leading axis."""

    def __init__(self, factors):
        fs = list(factors)
        self.factors = fs
        self.dR = np.stack([f.dR for f in fs])
        self.dv = np.stack([f.dv for f in fs])
        self.dp = np.stack([f.dp for f in fs])
        self.J_dR_bg = np.stack([f.J_dR_bg for f in fs])
        self.J_dv_bg = np.stack([f.J_dv_bg for f in fs])
        self.J_dv_ba = np.stack([f.J_dv_ba for f in fs])
        self.J_dp_bg = np.stack([f.J_dp_bg for f in fs])
        self.J_dp_ba = np.stack([f.J_dp_ba for f in fs])
        self.bias_ref = np.stack([f.bias_ref for f in fs])
        self.T = np.array([f.duration for f in fs])

    def __len__(self):
        return len(self.factors)


def _stack_states(xs):
    R = np.stack([x._R_BW for x in xs]).transpose(0, 2, 1)     # R_WB
    t = np.stack([x.t for x in xs])
    p = -np.einsum("nij,nj->ni", R, t)
    v = np.stack([x.v for x in xs])
    bg = np.stack([x.bg for x in xs])
    ba = np.stack([x.ba for x in xs])
    return R, p, v, bg, ba


def _mv(A, x):
    return np.einsum("nij,nj->ni", A, x)


def inertial_batch(xs_j, xs_k, fb: PreintegratedBatch, g: np.ndarray = GRAVITY,
                   jacobians: bool = True):
    """Vectorized :func:`inertial_residual` / :func:`inertial_jacobians` over
    pairs ``(xs_j[n], xs_k[n])``. Returns ``e`` (N, 15) and, when asked,
    ``(J_j, J_k)`` each (N, 15, 15)."""
    Rj, pj, vj, bgj, baj = _stack_states(xs_j)
    Rk, pk, vk, bgk, bak = _stack_states(xs_k)
    T = fb.T[:, None]
    dbg = bgj - fb.bias_ref[:, :3]
    dba = baj - fb.bias_ref[:, 3:]
    corr_arg = _mv(fb.J_dR_bg, dbg)
    dR = fb.dR @ exp_so3_batch(corr_arg)
    dv = fb.dv + _mv(fb.J_dv_bg, dbg) + _mv(fb.J_dv_ba, dba)
    dp = fb.dp + _mv(fb.J_dp_bg, dbg) + _mv(fb.J_dp_ba, dba)
    Rjt = Rj.transpose(0, 2, 1)
    E_rot = dR.transpose(0, 2, 1) @ Rjt @ Rk
    r_rot = log_so3_batch(E_rot)
    u_v = _mv(Rjt, vk - vj - g * T)
    u_p = _mv(Rjt, pk - pj - vj * T - 0.5 * g * T * T)
    n = len(fb)
    e = np.empty((n, STATE_DIM))
    e[:, 0:3] = r_rot
    e[:, 3:6] = u_v - dv
    e[:, 6:9] = u_p - dp
    e[:, 9:12] = bgj - bgk
    e[:, 12:15] = baj - bak
    if not jacobians:
        return e

    Jri = right_jacobian_inv_batch(r_rot)
    Rkt = Rk.transpose(0, 2, 1)
    Jj = np.zeros((n, STATE_DIM, STATE_DIM))
    Jk = np.zeros((n, STATE_DIM, STATE_DIM))
    # world-form partials chained through theta = -R_BW dphi, see inertial_jacobians
    Jj[:, 0:3, PHI] = Jri @ Rkt
    Jk[:, 0:3, PHI] = -Jri @ Rkt
    Jj[:, 0:3, BG] = -(Jri @ exp_so3_batch(r_rot).transpose(0, 2, 1)
                       @ right_jacobian_batch(corr_arg) @ fb.J_dR_bg)
    Jj[:, 3:6, PHI] = -hat_batch(u_v) @ Rjt
    Jj[:, 3:6, VEL] = -Rjt
    Jk[:, 3:6, VEL] = Rjt
    Jj[:, 3:6, BG] = -fb.J_dv_bg
    Jj[:, 3:6, BA] = -fb.J_dv_ba
    Jj[:, 6:9, PHI] = -hat_batch(u_p) @ Rjt - Rjt @ hat_batch(pj)
    Jj[:, 6:9, TRANS] = np.broadcast_to(np.eye(3), (n, 3, 3))
    Jk[:, 6:9, PHI] = Rjt @ hat_batch(pk)
    Jk[:, 6:9, TRANS] = -Rjt @ Rk
    Jj[:, 6:9, VEL] = -Rjt * T[:, :, None]
    Jj[:, 6:9, BG] = -fb.J_dp_bg
    Jj[:, 6:9, BA] = -fb.J_dp_ba
    I3 = np.eye(3)
    Jj[:, 9:12, BG] = I3
    Jk[:, 9:12, BG] = -I3
    Jj[:, 12:15, BA] = I3
    Jk[:, 12:15, BA] = -I3
    return e, (Jj, Jk)


def inertial_information(f: PreintegratedFactor) -> np.ndarray:
    """15x15 information of the inertial residual (block-diagonal in bias)."""
    cov = np.zeros((STATE_DIM, STATE_DIM))
    cov[:9, :9] = f.cov
    cov[9:, 9:] = f.bias_cov
    # regularize the tiny-noise limit so the information stays finite
    cov += 1e-14 * np.eye(STATE_DIM)
    info = np.linalg.inv(cov)
    return 0.5 * (info + info.T)


# ---------------------------------------------------------------- pose prior

def pose_prior_residual(x: StateVector, prior: PosePriorFactor):
    """6-vector ``[log(R_hat_WB R_BW), t - t_hat]`` and its 6x6 Jacobian."""
    e = np.empty(6)
    e[:3] = log_so3(prior.R_hat @ x.R_BW)
    e[3:] = x.t - prior.t_hat
    J = np.zeros((6, 6))
    J[:3, :3] = right_jacobian_inv(e[:3])
    J[3:, 3:] = np.eye(3)
    return e, J


def make_pose_prior(x: StateVector, info: np.ndarray, frame_id: int = -1,
                    rank_deficient: bool = False) -> PosePriorFactor:
    return PosePriorFactor(R_hat=x.R_WB, t_hat=x.t.copy(), info=np.asarray(info, float),
                           frame_id=frame_id, rank_deficient=rank_deficient)
