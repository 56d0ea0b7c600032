"""On-manifold IMU preintegration with first-order bias Jacobians.

Forward-Euler discretization: for each sample the position and velocity
deltas use the rotation delta *before* it absorbs the sample, then the
rotation delta is advanced. The Jacobian and covariance recursions are the
exact derivatives of that discrete update.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptySampleSet, NonPositiveDt, ParseError
from .lie import exp_so3, hat, right_jacobian


@dataclass(frozen=True)
class ImuSample:
    gyro: np.ndarray
    accel: np.ndarray
    dt: float


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time white-noise and bias random-walk densities."""

    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_bg: float = 1.9e-5
    sigma_ba: float = 3.0e-3

    def __post_init__(self):
        for k in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")


@dataclass(frozen=True)
class PreintegratedFactor:
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    J_dR_bg: np.ndarray
    J_dv_bg: np.ndarray
    J_dv_ba: np.ndarray
    J_dp_bg: np.ndarray
    J_dp_ba: np.ndarray
    cov: np.ndarray          # 9x9 over (rot, vel, pos)
    bias_ref: np.ndarray     # (bg, ba) linearization point, 6
    duration: float
    bias_cov: np.ndarray     # 6x6 random-walk covariance over the interval

    def corrected(self, dbg, dba):
        return correct_for_bias(self, dbg, dba)


def integrate(samples: Sequence[ImuSample], bias_ref, noise: ImuNoiseParams | None = None
              ) -> PreintegratedFactor:
    samples = list(samples)
    if not samples:
        raise EmptySampleSet("no IMU samples to integrate")
    noise = noise or ImuNoiseParams()
    bias_ref = np.asarray(bias_ref, dtype=float).reshape(6)
    bg, ba = bias_ref[:3], bias_ref[3:]

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    J_R_g = np.zeros((3, 3))
    J_v_g = np.zeros((3, 3))
    J_v_a = np.zeros((3, 3))
    J_p_g = np.zeros((3, 3))
    J_p_a = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    duration = 0.0
    I3 = np.eye(3)

    for s in samples:
        dt = float(s.dt)
        if not dt > 0:
            raise NonPositiveDt(f"sample dt {dt} <= 0")
        w = np.asarray(s.gyro, dtype=float) - bg
        a = np.asarray(s.accel, dtype=float) - ba
        dt2 = dt * dt
        step = exp_so3(w * dt)
        Jr = right_jacobian(w * dt)
        a_hat = hat(a)
        dRa = dR @ a_hat

        A = np.zeros((9, 9))
        A[0:3, 0:3] = step.T
        A[3:6, 0:3] = -dRa * dt
        A[3:6, 3:6] = I3
        A[6:9, 0:3] = -0.5 * dRa * dt2
        A[6:9, 3:6] = I3 * dt
        A[6:9, 6:9] = I3
        Bg = np.zeros((9, 3))
        Bg[0:3] = Jr * dt
        Ba = np.zeros((9, 3))
        Ba[3:6] = dR * dt
        Ba[6:9] = 0.5 * dR * dt2
        cov = (A @ cov @ A.T
               + (noise.sigma_g ** 2 / dt) * (Bg @ Bg.T)
               + (noise.sigma_a ** 2 / dt) * (Ba @ Ba.T))

        J_p_a = J_p_a + J_v_a * dt - 0.5 * dR * dt2
        J_p_g = J_p_g + J_v_g * dt - 0.5 * dRa @ J_R_g * dt2
        J_v_a = J_v_a - dR * dt
        J_v_g = J_v_g - dRa @ J_R_g * dt
        J_R_g = step.T @ J_R_g - Jr * dt

        dp = dp + dv * dt + 0.5 * (dR @ a) * dt2
        dv = dv + (dR @ a) * dt
        dR = dR @ step
        duration += dt

    # re-orthonormalize accumulated rounding
    u, _, vt = np.linalg.svd(dR)
    dR = u @ vt
    bias_cov = np.diag([noise.sigma_bg ** 2] * 3 + [noise.sigma_ba ** 2] * 3) * duration
    return PreintegratedFactor(
        dR=dR, dv=dv, dp=dp,
        J_dR_bg=J_R_g, J_dv_bg=J_v_g, J_dv_ba=J_v_a, J_dp_bg=J_p_g, J_dp_ba=J_p_a,
        cov=0.5 * (cov + cov.T), bias_ref=bias_ref.copy(), duration=duration,
        bias_cov=bias_cov,
    )


def correct_for_bias(f: PreintegratedFactor, dbg, dba):
    """First-order update of the deltas for a bias offset from ``f.bias_ref``."""
    dbg = np.asarray(dbg, dtype=float).reshape(3)
    dba = np.asarray(dba, dtype=float).reshape(3)
    dR = f.dR @ exp_so3(f.J_dR_bg @ dbg)
    dv = f.dv + f.J_dv_bg @ dbg + f.J_dv_ba @ dba
    dp = f.dp + f.J_dp_bg @ dbg + f.J_dp_ba @ dba
    return dR, dv, dp


def load_imu_csv(path) -> list[tuple[float, ImuSample]]:
    """Read ``t,wx,wy,wz,ax,ay,az`` rows.

    Each sample's ``dt`` is the gap to the next stamp; the last sample
    reuses the previous gap. A header line is allowed.
    """
    rows: list[tuple[float, np.ndarray, np.ndarray]] = []
    with open(Path(path), newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or rec[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and not _is_number(rec[0]):
                continue
            if len(rec) != 7:
                raise ParseError(f"{path}:{lineno}: expected 7 fields, got {len(rec)}")
            try:
                vals = [float(x) for x in rec]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            rows.append((vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    out = []
    for i, (t, w, a) in enumerate(rows):
        if i + 1 < len(rows):
            dt = rows[i + 1][0] - t
        elif i > 0:
            dt = t - rows[i - 1][0]
        else:
            raise ParseError(f"{path}: need at least two samples to infer dt")
        if dt <= 0:
            raise NonPositiveDt(f"{path}: non-increasing stamp at row {i + 1}")
        out.append((t, ImuSample(w, a, dt)))
    return out


def write_imu_csv(path, stamped: Iterable[tuple[float, ImuSample]]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "wx", "wy", "wz", "ax", "ay", "az"])
        for t, s in stamped:
            w.writerow([repr(float(t))] + [repr(float(x)) for x in (*s.gyro, *s.accel)])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
