import numpy as np
import pytest

from hybridloc.errors import InsufficientObservations, TriangulationDiverged
from hybridloc.estimator import (NormalEquation, ReprojectionFactor, StatePriorFactor,
                                 WindowConfig, _solve_damped, crlb_position_std,
                                 marginalize_visual, recover_covariance, schur_marginal,
                                 solve_instant, structure_only_ba, windowed_motion_ba)
from hybridloc.factors import RobustKernel, project
from hybridloc.lie import log_so3
from hybridloc.imu import integrate
from hybridloc.sim import SimConfig, WorldConfig, simulate
from hybridloc.state import STATE_DIM, StateVector, boxplus

from oracles import dense_marginal_cov, mc_least_squares_cov, random_spd


def _ne(H, sizes=None):
    n = len(H)
    sizes = sizes or [3] * (n // 3)
    ordering, off = [], 0
    for i, s in enumerate(sizes):
        ordering.append((f"b{i}", off, s))
        off += s
    return NormalEquation(H, np.zeros(n), ordering)


def test_schur_matches_dense_inverse(rng):
    for _ in range(100):
        n = 3 * rng.integers(2, 11)
        H = random_spd(rng, n)
        ne = _ne(H)
        keep = [f"b{i}" for i in sorted(rng.choice(n // 3, size=rng.integers(1, n // 3),
                                                   replace=False))]
        idx = ne.indices(keep)
        Hbar, _ = schur_marginal(ne, keep)
        assert np.allclose(np.linalg.inv(Hbar), dense_marginal_cov(H, idx), atol=1e-8, rtol=0)


def test_schur_keep_all_is_identity(rng):
    H = random_spd(rng, 9)
    Hbar, _ = schur_marginal(_ne(H), ["b0", "b1", "b2"])
    assert np.allclose(Hbar, H)


def test_marginal_matches_monte_carlo(rng):
    J = rng.normal(size=(40, 12))
    sigma = rng.uniform(0.5, 2.0, size=40)
    H = J.T @ (J / sigma[:, None] ** 2)
    ne = _ne(H)
    for block in ("b0", "b2"):
        S = recover_covariance(ne, block).sigma
        emp = mc_least_squares_cov(J, sigma, ne.indices(block), seed=3)
        assert np.linalg.norm(S - emp) / np.linalg.norm(S) < 0.05


def test_banded_solve_matches_dense(rng):
    n, bw = 90, 5
    A = random_spd(rng, n)
    mask = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) <= bw
    H = A * mask + n * np.eye(n)
    b = rng.normal(size=n)
    assert np.allclose(_solve_damped(H, b, 1e-3), np.linalg.solve(H + 1e-3 * np.diag(np.diag(H)), b))


@pytest.fixture(scope="module")
def clean_data():
    cfg = SimConfig(duration=1.5, imu_noise=False, pixel_sigma=0.0,
                    world=WorldConfig(landmark_offset_sigma=0.0))
    return simulate(cfg)


def _truth_state(ds, k):
    tr = ds.truth.frames[k]
    return StateVector.from_world(tr.R_WB, tr.p_W, tr.v_W, tr.bg, tr.ba, tr.stamp)


def _reproj(ds, k, var=0):
    fm = ds.frames[k]
    keep = ds.world.in_prior_map[fm.landmark_ids]
    return ReprojectionFactor(var, ds.world.landmarks[fm.landmark_ids[keep]], fm.pixels[keep],
                              ds.extrinsics, ds.camera)


def test_instant_recovers_truth(clean_data, rng):
    ds = clean_data
    x_true = _truth_state(ds, 5)
    d = np.zeros(STATE_DIM)
    d[:6] = rng.normal(size=6) * 0.02
    res = solve_instant(boxplus(x_true, d), None, _reproj(ds, 5))
    assert np.allclose(res.x_k.p_W, x_true.p_W, atol=1e-8)
    assert res.mean_reproj_px < 1e-6
    assert crlb_position_std(res.ne, res.x_k) > 0


def test_instant_with_inertial_and_prior(clean_data, rng):
    ds = clean_data
    x0, x1 = _truth_state(ds, 3), _truth_state(ds, 4)
    f = integrate(ds.frames[4].imu, np.zeros(6))
    prior = StatePriorFactor(0, x0, np.eye(STATE_DIM) * 1e4)
    d = rng.normal(size=STATE_DIM) * 0.01
    res = solve_instant(boxplus(x1, d), x0, _reproj(ds, 4), f, prior)
    assert np.allclose(res.x_k.p_W, x1.p_W, atol=1e-7)
    assert set(res.ne.names_with_prefix("k")) == {f"k.{b}" for b in ("phi", "t", "v", "bg", "ba")}


def test_instant_needs_observations(clean_data):
    r = _reproj(clean_data, 0)
    few = ReprojectionFactor(0, r.points[:3], r.pixels[:3], r.extr, r.cam)
    with pytest.raises(InsufficientObservations):
        solve_instant(_truth_state(clean_data, 0), None, few)


def _noisy_frame(ds, k, rng, kernel):
    r = _reproj(ds, k)
    return ReprojectionFactor(0, r.points, r.pixels + rng.normal(size=r.pixels.shape),
                              r.extr, r.cam, 1.0, kernel)


def _pose_err(prior, x):
    e = np.zeros(STATE_DIM)
    e[:3] = log_so3(x.R_BW.T @ prior.R_hat.T)
    e[3:6] = prior.t_hat - x.t
    return e[:6]


def test_marginalized_prior_centres_on_visual_optimum(clean_data, rng):
    # quadratic cost: one Gauss-Newton step from a nearby point lands on the optimum
    noisy = _noisy_frame(clean_data, 6, rng, RobustKernel("none"))
    x_opt = solve_instant(_truth_state(clean_data, 6), None, noisy).x_k
    d = np.zeros(STATE_DIM)
    d[:6] = rng.normal(size=6) * 1e-3
    prior = marginalize_visual(noisy, boxplus(x_opt, d))
    assert not prior.rank_deficient
    assert np.abs(_pose_err(prior, x_opt)).max() < 1e-4
    assert marginalize_visual(None, x_opt).rank_deficient


def test_marginalized_prior_moves_towards_optimum_with_huber(clean_data, rng):
    noisy = _noisy_frame(clean_data, 6, rng, RobustKernel())
    x_opt = solve_instant(_truth_state(clean_data, 6), None, noisy).x_k
    for _ in range(5):
        d = np.zeros(STATE_DIM)
        d[:6] = rng.normal(size=6) * 1e-3
        x_hat = boxplus(x_opt, d)
        at_hat = marginalize_visual(noisy, x_hat, keep_gradient=False)
        moved = marginalize_visual(noisy, x_hat)
        H = moved.info
        before, after = _pose_err(at_hat, x_opt), _pose_err(moved, x_opt)
        assert after @ H @ after < 0.5 * before @ H @ before


@pytest.mark.parametrize("backend", ["prior", "visual"])
def test_window_recovers_truth(clean_data, rng, backend):
    ds = clean_data
    ids = list(range(10, 20))
    truth = [_truth_state(ds, k) for k in ids]
    start = [truth[0]] + [boxplus(x, rng.normal(size=STATE_DIM) * 0.005) for x in truth[1:]]
    inertial = [integrate(ds.frames[k].imu, np.zeros(6)) for k in ids[1:]]
    reproj = [_reproj(ds, k) for k in ids]
    kw = ({"pose_priors": [marginalize_visual(r, x) for r, x in zip(reproj, truth)]}
          if backend == "prior" else {"reproj": reproj})
    res = windowed_motion_ba(start, inertial, cfg=WindowConfig(size=10, max_iters=20), **kw)
    err = max(np.linalg.norm(a.p_W - b.p_W) for a, b in zip(res.states, truth))
    assert err < 1e-6
    assert res.stats.final_cost <= res.stats.initial_cost


def test_window_argument_checks(clean_data):
    x = _truth_state(clean_data, 0)
    with pytest.raises(ValueError):
        windowed_motion_ba([x], [])
    with pytest.raises(ValueError):
        windowed_motion_ba([x, x], [None])
    with pytest.raises(ValueError):
        WindowConfig(size=1)


def test_structure_ba_triangulates(clean_data, rng):
    ds = clean_data
    p_true = np.array([7.5, 3.4, 1.4])     # ahead of the outward-facing camera
    obs = []
    for k in (0, 5, 10, 15):
        R_CW, t_CW = ds.extrinsics.camera_pose(_truth_state(ds, k))
        p_C = R_CW @ p_true + t_CW
        if p_C[2] > 0.2:
            obs.append((R_CW, t_CW, project(ds.camera, p_C)))
    assert len(obs) >= 2
    p = structure_only_ba(p_true + rng.normal(size=3) * 0.05, obs, ds.camera)
    assert np.allclose(p, p_true, atol=1e-6)
    with pytest.raises(InsufficientObservations):
        structure_only_ba(p_true, obs[:1], ds.camera)
    bad = [(R, t, u + 200.0 * (-1) ** i) for i, (R, t, u) in enumerate(obs)]
    with pytest.raises(TriangulationDiverged):
        structure_only_ba(p_true, bad, ds.camera)
