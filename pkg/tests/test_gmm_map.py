import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridloc.errors import DegenerateCovariance, EmptyMixture, NonPsdCovariance, ParseError
from hybridloc.gmm_map import (GaussianComponent, GaussianMixture, box_mass,
                               build_voxel_index, load_map, save_map, standard_normal_qmc)
from hybridloc.lie import exp_so3

from oracles import mc_box_mass


def _component(rng, i=0, sig=(0.02, 0.2, 0.3), weight=1.0):
    R = exp_so3(rng.normal(size=3))
    cov = R @ np.diag(np.square(sig)) @ R.T
    return GaussianComponent(weight, rng.uniform(0, 2, size=3), 0.5 * (cov + cov.T), id=i)


@given(st.integers(0, 10_000))
def test_whitener_gives_mahalanobis(seed):
    rng = np.random.default_rng(seed)
    c = _component(rng)
    x = rng.normal(size=3)
    d_w = np.linalg.norm(c.whitener @ (x - c.mean))
    d_m = np.sqrt((x - c.mean) @ np.linalg.solve(c.cov, x - c.mean))
    assert np.isclose(d_w, d_m, rtol=1e-9)
    assert np.allclose(c.whitener @ c.cov @ c.whitener.T, np.eye(3), atol=1e-9)


def test_normal_is_flattest_axis(rng):
    c = _component(rng)
    assert np.isclose(c.normal @ c.cov @ c.normal, 0.02 ** 2)
    assert np.all(np.diff(c.eigvals) >= 0)
    assert np.allclose(c.sqrt_cov @ c.sqrt_cov.T, c.cov)


def test_bad_covariances():
    with pytest.raises(NonPsdCovariance):
        GaussianComponent(1.0, np.zeros(3), np.array([[1, 0.5, 0], [0, 1, 0], [0, 0, 1.0]]))
    with pytest.raises(NonPsdCovariance):
        GaussianComponent(1.0, np.zeros(3), np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(DegenerateCovariance):
        GaussianComponent(1.0, np.zeros(3), np.diag([1.0, 1.0, 0.0]))


def test_mixture_ids_must_match_index(rng):
    with pytest.raises(ValueError):
        GaussianMixture([_component(rng, i=1)])


def test_qmc_points_are_standard_normal():
    z = standard_normal_qmc()
    assert z.shape == (4096, 3)
    assert np.allclose(z.mean(axis=0), 0.0, atol=0.01)
    assert np.allclose(np.cov(z, rowvar=False), np.eye(3), atol=0.02)


def test_box_mass_matches_monte_carlo(rng):
    for i in range(4):
        c = _component(rng, sig=(0.05, 0.1, 0.15))
        cell = np.floor(c.mean / 0.1).astype(int)
        q = box_mass(c, cell, 0.1)
        mc = mc_box_mass(c.mean, c.cov, cell, 0.1, seed=i)
        assert abs(q - mc) < 0.01, (q, mc)


def test_voxel_index_registers_component_at_its_mean(rng):
    comps = [_component(rng, i) for i in range(30)]
    mix = GaussianMixture(comps)
    grid = build_voxel_index(mix, 0.1, 0.1)
    for c in comps:
        assert c.id in grid.lookup(c.mean)
    for ids in grid.cells.values():
        assert list(ids) == sorted(set(ids))


def test_voxel_index_threshold_monotone(rng):
    mix = GaussianMixture([_component(rng, i) for i in range(10)])
    loose = build_voxel_index(mix, 0.1, 0.01)
    tight = build_voxel_index(mix, 0.1, 0.5)
    n_loose = sum(len(v) for v in loose.cells.values())
    n_tight = sum(len(v) for v in tight.cells.values())
    assert n_tight < n_loose
    for cell, ids in tight.cells.items():
        assert set(ids) <= set(loose.cells[cell])


def test_voxel_index_deterministic(rng):
    mix = GaussianMixture([_component(rng, i) for i in range(10)])
    assert build_voxel_index(mix) == build_voxel_index(mix)


def test_empty_mixture():
    with pytest.raises(EmptyMixture):
        build_voxel_index(GaussianMixture([]))


def test_map_roundtrip(tmp_path, rng):
    mix = GaussianMixture([_component(rng, i, weight=0.2) for i in range(5)])
    path = tmp_path / "map.json"
    save_map(mix, path)
    back = load_map(path)
    assert len(back) == 5
    assert np.allclose(back.means, mix.means) and np.allclose(back.covs, mix.covs)


def test_map_weights_must_sum_to_one(tmp_path, rng):
    path = tmp_path / "map.json"
    save_map(GaussianMixture([_component(rng, i) for i in range(2)]), path)
    with pytest.raises(ParseError, match="weights"):
        load_map(path)


@pytest.mark.parametrize("text, msg", [
    ("{", "line 1"),
    ('{"comps": []}', "components"),
    ('{"components": [{"weight": 1, "mean": [0, 0]}]}', "mean"),
    ('{"components": [{"weight": 1, "mean": [0, 0, 0]}]}', "cov"),
])
def test_map_parse_errors(tmp_path, text, msg):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(ParseError, match=msg):
        load_map(path)
