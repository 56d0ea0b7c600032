import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hybridloc.lie import exp_so3, log_so3
from hybridloc.state import (GRAVITY, STATE_DIM, Extrinsics, StateVector, boxminus, boxplus,
                             boxplus_many, predict_constant_velocity)

small = arrays(np.float64, STATE_DIM, elements=st.floats(-1.0, 1.0, allow_nan=False))


def _state(rng):
    return StateVector(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3),
                       rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.1, 1.5)


def test_world_accessors(rng):
    R = exp_so3(rng.normal(size=3))
    p = rng.normal(size=3)
    x = StateVector.from_world(R, p, stamp=2.0)
    assert np.allclose(x.R_WB, R)
    assert np.allclose(x.p_W, p)
    assert np.allclose(x.R_BW @ p + x.t, 0.0)
    assert x.stamp == 2.0


def test_cached_rotation_not_aliased(rng):
    x = _state(rng)
    R = x.R_BW
    R[:] = 0.0
    assert np.allclose(x.R_BW, exp_so3(x.phi))


@given(small)
def test_boxplus_boxminus_roundtrip(d):
    x = StateVector(np.array([0.3, -0.2, 0.1]), np.ones(3), np.zeros(3))
    assert np.allclose(boxminus(boxplus(x, d), x), d, atol=1e-9)


def test_boxplus_zero_is_identity(rng):
    x = _state(rng)
    y = boxplus(x, np.zeros(STATE_DIM))
    assert np.allclose(y.as_vector(), x.as_vector())
    assert y.stamp == x.stamp


def test_boxplus_right_composition(rng):
    x = _state(rng)
    d = np.zeros(STATE_DIM)
    d[:3] = rng.normal(size=3) * 0.2
    assert np.allclose(boxplus(x, d).R_BW, x.R_BW @ exp_so3(d[:3]))


def test_boxplus_many_matches_scalar(rng):
    xs = [_state(rng) for _ in range(12)]
    ds = rng.normal(size=(12, STATE_DIM)) * 0.3
    for a, b in zip(boxplus_many(xs, ds), (boxplus(x, d) for x, d in zip(xs, ds))):
        assert np.allclose(a.as_vector(), b.as_vector(), atol=1e-12)
        assert np.allclose(a.R_BW, exp_so3(a.phi), atol=1e-14)


def test_replace_keeps_other_fields(rng):
    x = _state(rng)
    y = x.replace(stamp=9.0)
    assert y.stamp == 9.0 and np.allclose(y.as_vector(), x.as_vector())


def test_constant_velocity_repeats_motion(rng):
    x0 = _state(rng)
    step = np.zeros(STATE_DIM)
    step[:6] = rng.normal(size=6) * 0.1
    x1 = boxplus(x0, step)
    R2, p2 = predict_constant_velocity(x1, x0)
    # relative motion x0 -> x1 equals x1 -> x2 in the body frame
    rel01 = x0.R_WB.T @ x1.R_WB
    rel12 = x1.R_WB.T @ R2
    assert np.allclose(rel01, rel12, atol=1e-12)
    assert np.allclose(p2 - x1.p_W, x1.p_W - x0.p_W)


def test_extrinsics_camera_center(rng):
    x = _state(rng)
    extr = Extrinsics(exp_so3(rng.normal(size=3)), rng.normal(size=3))
    c = extr.camera_center(x)
    R_CW, t_CW = extr.camera_pose(x)
    assert np.allclose(R_CW @ c + t_CW, 0.0)
    # the body origin maps to t_CB in the camera frame
    assert np.allclose(R_CW @ x.p_W + t_CW, extr.t_CB)


def test_gravity_points_down():
    assert GRAVITY[2] < 0 and np.isclose(np.linalg.norm(GRAVITY), 9.81)
    assert np.allclose(log_so3(np.eye(3)), 0.0)
