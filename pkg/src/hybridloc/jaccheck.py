"""Finite-difference audit of every analytic Jacobian.

Each named block compares an analytic sub-Jacobian against central
differences taken through the same error-state retraction the solver uses.
Functions are looked up on their modules at call time, so a test can
monkeypatch e.g. ``factors.inertial_jacobians`` and watch the audit fail.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import factors, imu, lie, state
from .state import STATE_DIM, Extrinsics, StateVector

ABS_TOL = 1e-7
REL_TOL = 1e-5
STEP = 1e-6
DEFAULT_CONFIGS = 100


@dataclass
class BlockReport:
    name: str
    n_configs: int
    max_abs: float      # worst |analytic - numeric| over configs
    max_rel: float      # same, divided by the block's largest numeric entry
    passed: bool


def _central(fun, x0: np.ndarray, h: float = STEP) -> np.ndarray:
    """d fun / d delta at 0 for ``fun(delta)``; columns follow ``delta``."""
    n = x0.size
    cols = []
    for i in range(n):
        d = np.zeros(n)
        d[i] = h
        cols.append((fun(d) - fun(-d)) / (2 * h))
    return np.stack(cols, axis=-1)


def _random_state(rng, stamp=0.0) -> StateVector:
    return StateVector(phi=rng.normal(size=3), t=rng.normal(size=3) * 2,
                       v=rng.normal(size=3), bg=rng.normal(size=3) * 0.01,
                       ba=rng.normal(size=3) * 0.1, stamp=stamp)


def _random_preint(rng, n=10, dt=0.005):
    samples = [imu.ImuSample(rng.normal(size=3), rng.normal(size=3) * 3 + [0, 0, 9.81], dt)
               for _ in range(n)]
    bias_ref = np.concatenate([rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.1])
    return samples, imu.integrate(samples, bias_ref)


def _error_state_fd(res, x: StateVector, cols: slice):
    """Numeric Jacobian of ``res(x')`` over ``cols`` of the 15-dim error state."""
    def f(d):
        full = np.zeros(STATE_DIM)
        full[cols] = d
        return res(state.boxplus(x, full))
    return _central(f, np.zeros(cols.stop - cols.start))


# ---------------------------------------------------------------- suites

def _reprojection_cases(rng):
    cam = factors.PinholeCamera()
    extr = Extrinsics(lie.exp_so3(rng.normal(size=3) * 0.3), rng.normal(size=3) * 0.05)
    x = _random_state(rng)
    # landmark in front of the camera, inside the image
    u = np.array([rng.uniform(0, cam.width), rng.uniform(0, cam.height)])
    p_C = factors.unproject(cam, u) * rng.uniform(0.5, 6.0)
    R_CW, t_CW = extr.camera_pose(x)
    p_W = R_CW.T @ (p_C - t_CW)
    obs = u + rng.normal(size=2)
    J_pose, J_point = factors.reprojection_jacobian(x, p_W, extr, cam)

    def r_state(xx):
        return factors.reprojection_residual(xx, p_W, obs, extr, cam)

    def r_point(d):
        return factors.reprojection_residual(x, p_W + d, obs, extr, cam)

    yield "reproj/phi", J_pose[:, 0:3], _error_state_fd(r_state, x, state.PHI)
    yield "reproj/t", J_pose[:, 3:6], _error_state_fd(r_state, x, state.TRANS)
    yield "reproj/point", J_point, _central(r_point, np.zeros(3))


_GROUPS = (("rot", slice(0, 3)), ("vel", slice(3, 6)), ("pos", slice(6, 9)),
           ("bias_g", slice(9, 12)), ("bias_a", slice(12, 15)))


def _inertial_cases(rng):
    _, f = _random_preint(rng)
    x_j = _random_state(rng, 0.0)
    # put x_k near the IMU prediction so the rotation residual stays small
    x_k = state.predict_state_with_imu(x_j, f).replace(stamp=f.duration)
    x_k = state.boxplus(x_k, rng.normal(size=STATE_DIM) * 0.05)
    Jj, Jk = factors.inertial_jacobians(x_j, x_k, f)
    full = slice(0, STATE_DIM)
    Nj = _error_state_fd(lambda xx: factors.inertial_residual(xx, x_k, f), x_j, full)
    Nk = _error_state_fd(lambda xx: factors.inertial_residual(x_j, xx, f), x_k, full)
    for name, rows in _GROUPS:
        yield f"inertial/{name}/x_j", Jj[rows], Nj[rows]
        yield f"inertial/{name}/x_k", Jk[rows], Nk[rows]


def _pose_prior_cases(rng):
    x = _random_state(rng)
    prior = factors.make_pose_prior(state.boxplus(x, rng.normal(size=STATE_DIM) * 0.3),
                                    np.eye(6))
    _, J = factors.pose_prior_residual(x, prior)

    def r(xx):
        return factors.pose_prior_residual(xx, prior)[0]

    yield "pose_prior/phi", J[:, 0:3], _error_state_fd(r, x, state.PHI)
    yield "pose_prior/t", J[:, 3:6], _error_state_fd(r, x, state.TRANS)


def _preint_bias_cases(rng):
    samples, f = _random_preint(rng)

    def deltas(dbg, dba):
        g = imu.integrate(samples, f.bias_ref + np.concatenate([dbg, dba]))
        return np.concatenate([lie.log_so3(f.dR.T @ g.dR), g.dv, g.dp])

    z = np.zeros(3)
    Ng = _central(lambda d: deltas(d, z), z)
    Na = _central(lambda d: deltas(z, d), z)
    yield "preint/dR_bg", f.J_dR_bg, Ng[0:3]
    yield "preint/dv_bg", f.J_dv_bg, Ng[3:6]
    yield "preint/dv_ba", f.J_dv_ba, Na[3:6]
    yield "preint/dp_bg", f.J_dp_bg, Ng[6:9]
    yield "preint/dp_ba", f.J_dp_ba, Na[6:9]


SUITES = (_reprojection_cases, _inertial_cases, _pose_prior_cases, _preint_bias_cases)


def run_checks(n_configs: int = DEFAULT_CONFIGS, seed: int = 0) -> list[BlockReport]:
    rng = np.random.default_rng(seed)
    worst: dict[str, list] = {}
    for suite in SUITES:
        for _ in range(n_configs):
            for name, analytic, numeric in suite(rng):
                err = float(np.max(np.abs(np.asarray(analytic) - numeric)))
                scale = float(np.max(np.abs(numeric)))
                ok = err <= max(ABS_TOL, REL_TOL * scale)
                w = worst.setdefault(name, [0, 0.0, 0.0, True])
                w[0] += 1
                w[1] = max(w[1], err)
                w[2] = max(w[2], err / scale if scale > 0 else 0.0)
                w[3] = w[3] and ok
    return [BlockReport(k, *v) for k, v in worst.items()]


def format_report(reports, elapsed: float | None = None) -> str:
    lines = [f"{'block':<24} {'configs':>7} {'max_abs':>10} {'max_rel':>10}  status"]
    for r in reports:
        lines.append(f"{r.name:<24} {r.n_configs:>7d} {r.max_abs:>10.2e} {r.max_rel:>10.2e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in reports)
    tail = f"{len(reports)} blocks, {n_fail} failed"
    if elapsed is not None:
        tail += f", {elapsed:.2f} s"
    lines.append(tail)
    return "\n".join(lines)


def main(n_configs: int = DEFAULT_CONFIGS, seed: int = 0) -> int:
    t0 = time.monotonic()
    reports = run_checks(n_configs, seed)
    print(format_report(reports, time.monotonic() - t0))
    return 0 if all(r.passed for r in reports) else 1
