"""SO(3) primitives: hat/vee, exponential and logarithm maps, right Jacobians.

Rotations are plain 3x3 ``numpy`` arrays and tangent vectors are length-3
arrays. All functions are pure.
"""
from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-4      # below this gap to pi the axis comes from the symmetric part


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(v) @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a second-order Taylor fallback near zero."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_so3`, returning a vector of norm at most pi."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - R.T)
    s = np.linalg.norm(w)
    # atan2 keeps theta accurate at both ends, where arccos is ill-conditioned
    theta = np.arctan2(s, 0.5 * (np.trace(R) - 1.0))
    if theta < SMALL_ANGLE:
        # R ~ I + K + K^2/2, the antisymmetric part already gives phi
        return w
    if np.pi - theta < NEAR_PI:
        return _log_near_pi(R, theta)
    return theta / s * w


def _log_near_pi(R: np.ndarray, theta: float) -> np.ndarray:
    # sym(R) = cos(theta) I + (1 - cos(theta)) a a^T; equals (R + I)/2 -> a a^T at pi.
    # Take the column with largest diagonal.
    c = np.cos(theta)
    B = (0.5 * (R + R.T) - c * np.eye(3)) / (1.0 - c)
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    # sign: agree with the antisymmetric part when it is informative,
    # otherwise make the first nonzero component positive
    w = 0.5 * vee(R - R.T)
    if np.linalg.norm(w) > 1e-12:
        if axis @ w < 0:
            axis = -axis
    else:
        nz = axis[np.abs(axis) > 1e-12]
        if nz.size and nz[0] < 0:
            axis = -axis
    return theta * axis


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """J_r with exp(phi + d) ~ exp(phi) exp(J_r(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / t2 * K
        + (theta - np.sin(theta)) / (t2 * theta) * (K @ K)
    )


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    t2 = theta * theta
    c = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + c * (K @ K)


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (
        np.linalg.norm(R.T @ R - np.eye(3)) < tol
        and abs(np.linalg.det(R) - 1.0) < tol
    )


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Hamilton quaternion (qx, qy, qz, qw) with qw >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------- batched forms
# Same formulas over a leading axis; used where many small rotations are
# processed per solver iteration.

def hat_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _series_coeffs(theta, f_small, f_big):
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    return np.where(small, f_small(theta), f_big(safe))


def exp_so3_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(phi, axis=1)
    K = hat_batch(phi)
    a = _series_coeffs(theta, lambda t: np.ones_like(t), lambda t: np.sin(t) / t)
    b = _series_coeffs(theta, lambda t: np.full_like(t, 0.5),
                       lambda t: (1.0 - np.cos(t)) / (t * t))
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def log_so3_batch(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    w = 0.5 * np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0],
                        R[:, 1, 0] - R[:, 0, 1]], axis=1)
    s = np.linalg.norm(w, axis=1)
    theta = np.arctan2(s, 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0))
    near_pi = np.pi - theta < NEAR_PI
    scale = _series_coeffs(theta, lambda t: np.ones_like(t),
                           lambda t: t / np.where(near_pi | (s == 0), 1.0, s))
    out = scale[:, None] * w
    for i in np.flatnonzero(near_pi):
        out[i] = log_so3(R[i])
    return out


def right_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(phi, axis=1)
    K = hat_batch(phi)
    a = _series_coeffs(theta, lambda t: np.full_like(t, 0.5),
                       lambda t: (1.0 - np.cos(t)) / (t * t))
    b = _series_coeffs(theta, lambda t: np.full_like(t, 1.0 / 6.0),
                       lambda t: (t - np.sin(t)) / (t ** 3))
    return np.eye(3) - a[:, None, None] * K + b[:, None, None] * (K @ K)


def right_jacobian_inv_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(phi, axis=1)
    K = hat_batch(phi)
    c = _series_coeffs(theta, lambda t: np.full_like(t, 1.0 / 12.0),
                       lambda t: 1.0 / (t * t) - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    return np.eye(3) + 0.5 * K + c[:, None, None] * (K @ K)
