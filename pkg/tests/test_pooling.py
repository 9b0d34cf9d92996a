import numpy as np
import pytest

from ensphere import metrics
from ensphere.grid import EARTH_RADIUS_KM, LatLonGrid, cell_area_weights, refine_icosahedron
from ensphere.pooling import (
    PoolRegionSet,
    build_pool_regions,
    pool,
    pool_average,
    pool_max,
    pooled_crps,
    regions_from_centers,
    subsample,
)

G1 = LatLonGrid(181, 360)


@pytest.fixture(scope="module")
def regions4():
    return build_pool_regions(G1, 4)


@pytest.mark.parametrize("k,size", [(7, 120), (6, 241), (5, 481), (4, 962), (3, 1922), (2, 3828)])
def test_region_diameters(k, size):
    mesh = refine_icosahedron(k)
    radius = mesh.mean_edge_length()
    assert 2 * radius == pytest.approx(size, rel=0.01)
    if k <= 5:
        assert build_pool_regions(G1, k).diameter_km == pytest.approx(2 * radius)


def test_level_out_of_range():
    for k in (1, 8):
        with pytest.raises(ValueError):
            build_pool_regions(G1, k)


def test_region_membership_matches_brute_force(regions4):
    unit = G1.unit_vectors().reshape(-1, 3)
    for r in range(0, regions4.n_regions, 97):
        d = EARTH_RADIUS_KM * np.arccos(np.clip(unit @ regions4.centers[r], -1, 1))
        want = np.flatnonzero(d <= regions4.radius_km)
        assert regions4.members(r).tolist() == want.tolist()


def test_every_cell_is_covered():
    for k in (2, 4):
        regions = build_pool_regions(G1, k)
        assert np.all(np.bincount(regions.cell_index, minlength=(181 * 360)) >= 1)
        assert np.all(np.diff(regions.offsets) > 0)


def test_region_weights_unit_mean(regions4):
    assert regions4.region_weight.mean() == pytest.approx(1.0)
    mesh = refine_icosahedron(4)
    np.testing.assert_allclose(regions4.region_weight, mesh.node_voronoi_weight / mesh.node_voronoi_weight.mean())


def test_pool_average_brute_force(regions4):
    rng = np.random.default_rng(0)
    f = rng.normal(size=(2,) + G1.shape)
    w = cell_area_weights(G1).ravel()
    got = pool_average(f, regions4)
    for r in range(0, regions4.n_regions, 131):
        idx = regions4.members(r)
        want = (f.reshape(2, -1)[:, idx] * w[idx]).sum(-1) / w[idx].sum()
        np.testing.assert_allclose(got[:, r], want, rtol=1e-12)


def test_pool_constant_linear_and_max(regions4):
    rng = np.random.default_rng(1)
    np.testing.assert_allclose(pool_average(np.full(G1.shape, 3.5), regions4), 3.5)
    np.testing.assert_allclose(pool_max(np.full(G1.shape, 3.5), regions4), 3.5)
    a, b = rng.normal(size=(2,) + G1.shape)
    np.testing.assert_allclose(pool_average(2 * a - b, regions4), 2 * pool_average(a, regions4) - pool_average(b, regions4), atol=1e-12)
    assert np.all(pool_max(a, regions4) >= pool_average(a, regions4) - 1e-12)


def test_pool_max_single_spike(regions4):
    f = np.zeros(G1.shape)
    cell = 50 * 360 + 123
    f.flat[cell] = 7.0
    got = pool_max(f, regions4)
    contains = np.array([cell in set(regions4.members(r)) for r in range(regions4.n_regions)])
    assert contains.sum() >= 1
    np.testing.assert_array_equal(got, np.where(contains, 7.0, 0.0))


def test_grid_mismatch_and_mode_errors(regions4):
    with pytest.raises(ValueError):
        pool_average(np.zeros((90, 180)), regions4)
    with pytest.raises(ValueError):
        pool(np.zeros(G1.shape), regions4, "median")


def test_empty_region_is_an_error():
    coarse = LatLonGrid(19, 36)
    with pytest.raises(ValueError, match="no grid cells"):
        regions_from_centers(coarse, refine_icosahedron(7).nodes[:50], 60.0)


def test_one_cell_regions_reduce_to_plain_crps():
    g = LatLonGrid(8, 12, include_poles=False)  # no duplicated pole points
    centers = g.unit_vectors().reshape(-1, 3)
    w = cell_area_weights(g).ravel()
    regions = regions_from_centers(g, centers, 1.0, region_weight=w)
    rng = np.random.default_rng(2)
    ens, tgt = rng.normal(size=(5, 3) + g.shape), rng.normal(size=(3,) + g.shape)
    assert pooled_crps(ens, tgt, regions) == pytest.approx(metrics.crps(ens, tgt, cell_area_weights(g)), rel=1e-12)
    assert pooled_crps(np.stack([tgt] * 4), tgt, regions, "max") == pytest.approx(0.0, abs=1e-15)


def test_pooled_crps_composition_and_permutation(regions4):
    rng = np.random.default_rng(3)
    ens, tgt = rng.normal(size=(4, 2) + G1.shape), rng.normal(size=(2,) + G1.shape)
    for mode in ("avg", "max"):
        pe = pool(ens, regions4, mode)
        pt = pool(tgt, regions4, mode)
        # sequential oracle: explicit double-sum CRPS over pooled values
        skill = np.abs(pe - pt).mean(0)
        spread = np.abs(pe[:, None] - pe[None]).mean((0, 1)) / 2
        want = np.mean((skill - spread) * regions4.region_weight)
        assert pooled_crps(ens, tgt, regions4, mode) == pytest.approx(want, rel=1e-10)
        assert pooled_crps(ens[::-1], tgt, regions4, mode) == pytest.approx(want, rel=1e-10)


def test_avg_pooling_acts_as_low_pass_filter():
    rng = np.random.default_rng(4)
    ens, tgt = 5 + rng.normal(size=(4, 2) + G1.shape), 5 + rng.normal(size=(2,) + G1.shape)
    scores = [pooled_crps(ens, tgt, build_pool_regions(G1, k)) for k in (5, 4, 3, 2)]
    assert np.all(np.diff(scores) < 0)


def test_cache_round_trip(tmp_path):
    a = build_pool_regions(LatLonGrid(91, 180), 3, cache_dir=tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    b = build_pool_regions(LatLonGrid(91, 180), 3, cache_dir=tmp_path)
    np.testing.assert_array_equal(a.cell_index, b.cell_index)
    np.testing.assert_array_equal(a.region_weight, b.region_weight)
    assert isinstance(b, PoolRegionSet) and b.level == 3


def test_subsample_to_one_degree():
    g = LatLonGrid(721, 1440)
    f = np.arange(721 * 1440, dtype=float).reshape(g.shape)
    sub, g1 = subsample(f, g, 4)
    assert g1 == G1 and sub.shape == G1.shape
    assert sub[1, 1] == f[4, 4]
    with pytest.raises(ValueError):
        subsample(f, g, 7)
