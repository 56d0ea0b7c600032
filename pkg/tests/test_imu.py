import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from hybridloc.errors import EmptySampleSet, NonPositiveDt, ParseError
from hybridloc.imu import (ImuNoiseParams, ImuSample, correct_for_bias, integrate,
                           load_imu_csv, write_imu_csv)
from hybridloc.lie import exp_so3, log_so3


def _samples(rng, n=20, dt=0.005):
    return [ImuSample(rng.normal(size=3), rng.normal(size=3) * 2 + [0, 0, 9.81], dt)
            for _ in range(n)]


def _euler_oracle(samples, bias):
    """Independent forward-Euler integration using scipy rotations."""
    R = Rotation.identity()
    v = np.zeros(3)
    p = np.zeros(3)
    for s in samples:
        a = R.apply(s.accel - bias[3:])
        p = p + v * s.dt + 0.5 * a * s.dt ** 2
        v = v + a * s.dt
        R = R * Rotation.from_rotvec((s.gyro - bias[:3]) * s.dt)
    return R.as_matrix(), v, p


def test_deltas_match_oracle(rng):
    samples = _samples(rng)
    bias = np.concatenate([rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.1])
    f = integrate(samples, bias)
    R, v, p = _euler_oracle(samples, bias)
    assert np.allclose(f.dR, R, atol=1e-12)
    assert np.allclose(f.dv, v, atol=1e-12)
    assert np.allclose(f.dp, p, atol=1e-12)
    assert np.isclose(f.duration, 0.1)


def test_constant_rate_rotation(rng):
    w = np.array([0.2, -0.4, 1.0])
    f = integrate([ImuSample(w, np.zeros(3), 0.01)] * 50, np.zeros(6))
    assert np.allclose(f.dR, exp_so3(w * 0.5), atol=1e-12)


def test_bias_correction_first_order(rng):
    samples = _samples(rng)
    f = integrate(samples, np.zeros(6))
    for scale in (1e-3, 1e-4):
        dbg = rng.normal(size=3) * scale
        dba = rng.normal(size=3) * scale
        dR, dv, dp = correct_for_bias(f, dbg, dba)
        g = integrate(samples, np.concatenate([dbg, dba]))
        # residual of the linearization is second order in the offset
        assert np.linalg.norm(log_so3(dR.T @ g.dR)) < 50 * scale ** 2
        assert np.linalg.norm(dv - g.dv) < 50 * scale ** 2
        assert np.linalg.norm(dp - g.dp) < 50 * scale ** 2


def test_covariance_matches_monte_carlo(rng):
    n, dt = 20, 0.005
    noise = ImuNoiseParams(sigma_g=0.05, sigma_a=0.5, sigma_bg=1e-4, sigma_ba=1e-3)
    base = _samples(rng, n, dt)
    f = integrate(base, np.zeros(6), noise)
    draws = []
    for _ in range(3000):
        noisy = [ImuSample(s.gyro + rng.normal(size=3) * noise.sigma_g / np.sqrt(dt),
                           s.accel + rng.normal(size=3) * noise.sigma_a / np.sqrt(dt), dt)
                 for s in base]
        g = integrate(noisy, np.zeros(6), noise)
        draws.append(np.concatenate([log_so3(f.dR.T @ g.dR), g.dv - f.dv, g.dp - f.dp]))
    emp = np.cov(np.array(draws), rowvar=False)
    d = np.sqrt(np.diag(f.cov))
    corr_err = np.abs(emp / np.outer(d, d) - f.cov / np.outer(d, d))
    assert corr_err.max() < 0.1
    assert np.allclose(np.diag(emp), np.diag(f.cov), rtol=0.1)


def test_bias_random_walk_covariance():
    noise = ImuNoiseParams()
    f = integrate([ImuSample(np.zeros(3), np.zeros(3), 0.01)] * 10, np.zeros(6), noise)
    assert np.allclose(np.diag(f.bias_cov)[:3], noise.sigma_bg ** 2 * 0.1)
    assert np.allclose(np.diag(f.bias_cov)[3:], noise.sigma_ba ** 2 * 0.1)


def test_errors():
    with pytest.raises(EmptySampleSet):
        integrate([], np.zeros(6))
    with pytest.raises(NonPositiveDt):
        integrate([ImuSample(np.zeros(3), np.zeros(3), 0.0)], np.zeros(6))
    with pytest.raises(ValueError):
        ImuNoiseParams(sigma_g=0.0)


def test_csv_roundtrip(tmp_path, rng):
    stamped = [(0.01 * i, s) for i, s in enumerate(_samples(rng, 5, 0.01))]
    path = tmp_path / "imu.csv"
    write_imu_csv(path, stamped)
    back = load_imu_csv(path)
    assert len(back) == 5
    for (t0, s0), (t1, s1) in zip(stamped, back):
        assert t0 == t1
        assert np.array_equal(s0.gyro, s1.gyro) and np.array_equal(s0.accel, s1.accel)
        assert np.isclose(s1.dt, 0.01)


def test_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1,2,3\n")
    with pytest.raises(ParseError, match="7 fields"):
        load_imu_csv(bad)
    back = tmp_path / "back.csv"
    back.write_text("0.1,0,0,0,0,0,0\n0.05,0,0,0,0,0,0\n")
    with pytest.raises(NonPositiveDt):
        load_imu_csv(back)
