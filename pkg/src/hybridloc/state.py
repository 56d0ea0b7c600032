"""Per-frame state, manifold update and pose prediction.

The stored convention follows the estimator: ``phi`` parameterizes the
world-to-body rotation ``R_BW = exp(phi^)`` and ``t`` is the body-frame
translation ``t_BW``, so a world point maps to the body as
``R_BW @ p_W + t``. World-frame accessors (``R_WB``, ``p_W``) are derived
here so the rest of the code never repeats the conversion.

Error-state ordering is ``[dphi, dt, dv, dbg, dba]`` (15 entries).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonMonotonicTime
from .lie import exp_so3, exp_so3_batch, log_so3, log_so3_batch

GRAVITY = np.array([0.0, 0.0, -9.81])

PHI = slice(0, 3)
TRANS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)
STATE_DIM = 15


def _vec(x) -> np.ndarray:
    return np.array(x, dtype=float).reshape(3)


@dataclass(frozen=True)
class StateVector:
    phi: np.ndarray
    t: np.ndarray
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stamp: float = 0.0

    def __post_init__(self):
        for name in ("phi", "t", "v", "bg", "ba"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        # rotation is read many times per solver iteration; compute it once
        object.__setattr__(self, "_R_BW", exp_so3(self.phi))

    @classmethod
    def from_world(cls, R_WB, p_W, v=None, bg=None, ba=None, stamp=0.0):
        """Build from a world-frame pose (body-to-world rotation and body origin)."""
        R_WB = np.asarray(R_WB, dtype=float)
        R_BW = R_WB.T
        return cls(
            phi=log_so3(R_BW),
            t=-R_BW @ _vec(p_W),
            v=np.zeros(3) if v is None else v,
            bg=np.zeros(3) if bg is None else bg,
            ba=np.zeros(3) if ba is None else ba,
            stamp=float(stamp),
        )

    @classmethod
    def _trusted(cls, phi, t, v, bg, ba, stamp, R_BW) -> "StateVector":
        """Construct from already-validated arrays and a matching rotation."""
        x = object.__new__(cls)
        for name, val in (("phi", phi), ("t", t), ("v", v), ("bg", bg), ("ba", ba),
                          ("stamp", stamp), ("_R_BW", R_BW)):
            object.__setattr__(x, name, val)
        return x

    @property
    def R_BW(self) -> np.ndarray:
        return self._R_BW.copy()

    @property
    def R_WB(self) -> np.ndarray:
        return self._R_BW.T.copy()

    @property
    def p_W(self) -> np.ndarray:
        """Body origin in the world frame, ``-R_WB t``."""
        return -(self.R_WB @ self.t)

    @property
    def bias(self) -> np.ndarray:
        return np.concatenate([self.bg, self.ba])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.t, self.v, self.bg, self.ba])

    def replace(self, **kw) -> "StateVector":
        d = dict(phi=self.phi, t=self.t, v=self.v, bg=self.bg, ba=self.ba,
                 stamp=self.stamp)
        d.update(kw)
        return StateVector(**d)


def boxplus(x: StateVector, d: np.ndarray) -> StateVector:
    """Rotation composed on the right, everything else added."""
    d = np.asarray(d, dtype=float).reshape(STATE_DIM)
    if not np.any(d[PHI]):
        phi = x.phi
    else:
        phi = log_so3(x._R_BW @ exp_so3(d[PHI]))
    return StateVector(
        phi=phi,
        t=x.t + d[TRANS],
        v=x.v + d[VEL],
        bg=x.bg + d[BG],
        ba=x.ba + d[BA],
        stamp=x.stamp,
    )


def boxplus_many(xs, ds: np.ndarray) -> list:
    """:func:`boxplus` applied pairwise, with the rotation maps batched."""
    ds = np.asarray(ds, dtype=float).reshape(len(xs), STATE_DIM)
    R = np.stack([x._R_BW for x in xs]) @ exp_so3_batch(ds[:, PHI])
    phi = log_so3_batch(R)
    # re-derive the rotation from phi so the cached matrix matches exp(phi) exactly
    R = exp_so3_batch(phi)
    return [StateVector._trusted(phi[i], x.t + d[TRANS], x.v + d[VEL], x.bg + d[BG],
                                 x.ba + d[BA], x.stamp, R[i])
            for i, (x, d) in enumerate(zip(xs, ds))]


def boxminus(x: StateVector, ref: StateVector) -> np.ndarray:
    """Error state ``d`` with ``boxplus(ref, d) == x``."""
    out = np.empty(STATE_DIM)
    out[PHI] = log_so3(ref.R_BW.T @ x.R_BW)
    out[TRANS] = x.t - ref.t
    out[VEL] = x.v - ref.v
    out[BG] = x.bg - ref.bg
    out[BA] = x.ba - ref.ba
    return out


def predict_with_imu(x: StateVector, f, g: np.ndarray = GRAVITY):
    """Propagate a state through a preintegrated factor.

    Returns ``(R_WB, v_W, p_W)`` of the next frame, with the bias offset
    from the factor's linearization point applied to first order.
    """
    if f.duration <= 0:
        raise NonMonotonicTime(f"factor duration {f.duration} <= 0")
    dR, dv, dp = f.corrected(x.bg - f.bias_ref[:3], x.ba - f.bias_ref[3:])
    T = f.duration
    R_WB = x.R_WB
    p = x.p_W
    R_next = R_WB @ dR
    v_next = x.v + g * T + R_WB @ dv
    p_next = p + x.v * T + 0.5 * g * T * T + R_WB @ dp
    return R_next, v_next, p_next


def predict_state_with_imu(x: StateVector, f, g: np.ndarray = GRAVITY) -> StateVector:
    R, v, p = predict_with_imu(x, f, g)
    return StateVector.from_world(R, p, v, x.bg, x.ba, x.stamp + f.duration)


def predict_constant_velocity(x_k: StateVector, x_km1: StateVector):
    """Repeat the last inter-frame motion: ``(R_WB, p_W)`` for the next frame."""
    R_k = x_k.R_WB
    R_next = R_k @ (x_km1.R_BW @ R_k)
    p_next = 2.0 * x_k.p_W - x_km1.p_W
    return R_next, p_next


@dataclass(frozen=True)
class Extrinsics:
    """Body(IMU)-to-camera transform: ``p_C = R_CB p_B + t_CB``."""

    R_CB: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_CB: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def camera_pose(self, x: StateVector):
        """World-to-camera ``(R_CW, t_CW)`` for a state."""
        R_CW = self.R_CB @ x.R_BW
        t_CW = self.R_CB @ x.t + self.t_CB
        return R_CW, t_CW

    def camera_center(self, x: StateVector) -> np.ndarray:
        R_CW, t_CW = self.camera_pose(x)
        return -R_CW.T @ t_CW
