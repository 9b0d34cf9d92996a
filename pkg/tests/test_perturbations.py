import numpy as np
import pytest
from scipy import special, stats

from ensphere.grid import LatLonGrid, cell_area_weights, central_angle, latlon_to_xyz
from ensphere.perturbations import (
    GPPerturbSpec,
    SphericalNoiseSpec,
    correlation_spectrum,
    eda_style_perturb,
    gaspari_cohn,
    gaussian_like_correlation,
    get_transform,
    gp_perturbation,
    load_std_table,
    power_spectrum,
    quadrature_area_weights,
    sample_spherical_noise,
    six_hour_difference_std,
    upsample_field,
)
from ensphere.sht import SphericalHarmonicTransform, degree_mask, exact_lmax, legendre_order_blocks, resolvable_lmax

# -- transform --------------------------------------------------------------------------


def _legendre_oracle(l, m, x):
    """4pi-normalised associated Legendre function from scipy, Condon-Shortley phase removed."""
    norm = np.sqrt((2 - (m == 0)) * (2 * l + 1) * special.factorial(l - m) / special.factorial(l + m))
    return norm * (-1) ** m * special.lpmv(m, l, x)


def test_legendre_recurrence_matches_scipy():
    x = np.linspace(-0.99, 0.99, 13)
    for m, block in legendre_order_blocks(12, x):
        for l in range(m, 13):
            np.testing.assert_allclose(block[l - m], _legendre_oracle(l, m, x), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize(
    "grid", [LatLonGrid(181, 360), LatLonGrid(91, 180), LatLonGrid(90, 180, include_poles=False)]
)
def test_round_trip_exact_to_lmax(grid):
    t = SphericalHarmonicTransform(grid, exact_lmax(grid))
    rng = np.random.default_rng(0)
    valid_c, valid_s = degree_mask(t.l_max)
    C = rng.normal(size=t.coeff_shape) * valid_c
    S = rng.normal(size=t.coeff_shape) * valid_s
    C2, S2 = t.analyze(t.synthesize(C, S))
    np.testing.assert_allclose(C2, C, atol=1e-11)
    np.testing.assert_allclose(S2, S, atol=1e-11)


def test_synthesis_matches_pointwise_evaluation():
    grid = LatLonGrid(19, 36)
    t = SphericalHarmonicTransform(grid, 8)
    rng = np.random.default_rng(3)
    valid_c, valid_s = degree_mask(8)
    C = rng.normal(size=t.coeff_shape) * valid_c
    S = rng.normal(size=t.coeff_shape) * valid_s
    lat2d, lon2d = grid.mesh()
    np.testing.assert_allclose(
        t.synthesize(C, S).ravel(), t.synthesize_at(C, S, lat2d.ravel(), lon2d.ravel()), atol=1e-11
    )


def test_dense_and_per_order_paths_agree(monkeypatch):
    import ensphere.sht as sht_mod

    grid = LatLonGrid(37, 72)
    rng = np.random.default_rng(4)
    valid_c, valid_s = degree_mask(18)
    C = rng.normal(size=(3, 19, 19)) * valid_c
    S = rng.normal(size=(3, 19, 19)) * valid_s
    field = rng.normal(size=(2,) + grid.shape)
    dense = SphericalHarmonicTransform(grid, 18)
    assert dense._dense is not None
    monkeypatch.setattr(sht_mod, "_DENSE_LIMIT", 0)
    loop = SphericalHarmonicTransform(grid, 18)
    assert loop._dense is None
    np.testing.assert_allclose(dense.synthesize(C, S), loop.synthesize(C, S), atol=1e-12)
    for a, b in zip(dense.analyze(field), loop.analyze(field)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_transform_rejects_unresolvable_degree():
    grid = LatLonGrid(19, 36)
    with pytest.raises(ValueError):
        SphericalHarmonicTransform(grid, resolvable_lmax(grid) + 1)


# -- power spectrum ---------------------------------------------------------------------


def test_spectrum_of_single_harmonic_and_constant():
    grid = LatLonGrid(91, 180)
    t = get_transform(grid, exact_lmax(grid))
    C = np.zeros(t.coeff_shape)
    S = np.zeros(t.coeff_shape)
    C[2, 0] = 1.0
    p = power_spectrum(t.synthesize(C, S), grid).power
    assert p[2] == pytest.approx(1.0, rel=1e-12)
    assert np.delete(p, 2).max() < 1e-24
    const = power_spectrum(np.full(grid.shape, 3.0), grid).power
    assert const[0] == pytest.approx(9.0, rel=1e-12) and const[1:].max() < 1e-24


def test_parseval_with_quadrature_weights():
    grid = LatLonGrid(181, 360)
    f = sample_spherical_noise(SphericalNoiseSpec(grid, sigma=2.0), seed=5)
    total = power_spectrum(f, grid).power.sum()
    mean_square = np.mean(quadrature_area_weights(grid) * f**2)
    assert total == pytest.approx(mean_square, rel=1e-6)


def test_power_spectrum_rejects_partial_fields():
    grid = LatLonGrid(19, 36)
    with pytest.raises(ValueError):
        power_spectrum(np.zeros((10, 36)), grid)
    f = np.zeros(grid.shape)
    f[3, 3] = np.nan
    with pytest.raises(ValueError):
        power_spectrum(f, grid)


# -- spherical noise --------------------------------------------------------------------


def test_zero_sigma_gives_zero_field():
    assert not sample_spherical_noise(SphericalNoiseSpec(LatLonGrid(19, 36), sigma=0.0), seed=1).any()


def test_noise_spectrum_is_flat_and_truncated():
    grid = LatLonGrid(91, 180)
    L = 30
    fields = sample_spherical_noise(SphericalNoiseSpec(grid, l_max=L), seed=11, size=1000)
    t = get_transform(grid, exact_lmax(grid))
    power = power_spectrum(fields, grid).per_coefficient.mean(axis=0)
    flat = power[1 : L + 1]
    assert np.abs(flat / flat.mean() - 1).max() < 0.05
    assert power[L + 1 :].max() < 1e-20 * flat.mean()
    assert t.l_max > L


def test_noise_mean_square_equals_sigma_squared():
    grid = LatLonGrid(91, 180)
    fields = sample_spherical_noise(SphericalNoiseSpec(grid, sigma=3.0), seed=4, size=400)
    ms = np.mean(quadrature_area_weights(grid) * fields**2, axis=(-2, -1))
    assert ms.mean() == pytest.approx(9.0, rel=0.02)


def test_noise_is_deterministic_given_seed():
    spec = SphericalNoiseSpec(LatLonGrid(19, 36))
    np.testing.assert_array_equal(sample_spherical_noise(spec, 3), sample_spherical_noise(spec, 3))


def test_noise_marginals_are_isotropic():
    # values at a pole and at the equator have the same distribution
    grid = LatLonGrid(37, 72)
    fields = sample_spherical_noise(SphericalNoiseSpec(grid), seed=8, size=3000)
    assert stats.ks_2samp(fields[:, 0, 0], fields[:, 18, 5]).pvalue > 0.01


def test_noise_spectrum_invariant_under_rotation():
    grid = LatLonGrid(37, 72)
    L = exact_lmax(grid)
    t = get_transform(grid, L)
    field = sample_spherical_noise(SphericalNoiseSpec(grid), seed=2)
    C, S = t.analyze(field)
    # rotate by 40 degrees about the x axis and resample the band-limited expansion
    lat2d, lon2d = grid.mesh()
    xyz = latlon_to_xyz(lat2d, lon2d)
    a = np.deg2rad(40.0)
    rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    p = xyz @ rot.T
    lat_r = np.rad2deg(np.arcsin(np.clip(p[..., 2], -1, 1)))
    lon_r = np.rad2deg(np.arctan2(p[..., 1], p[..., 0]))
    rotated = t.synthesize_at(C, S, lat_r.ravel(), lon_r.ravel()).reshape(grid.shape)
    np.testing.assert_allclose(power_spectrum(rotated, grid).power, power_spectrum(field, grid).power, rtol=1e-8, atol=1e-10)


# -- GP perturbations -------------------------------------------------------------------


def test_gaspari_cohn_shape():
    assert gaspari_cohn(0.0) == 1.0
    assert gaspari_cohn(2.0) == 0.0 and gaspari_cohn(3.0) == 0.0
    z = np.linspace(0, 2, 201)
    g = gaspari_cohn(z)
    assert np.all(np.diff(g) <= 1e-15)
    # continuous at the breakpoint and close to a Gaussian with matched curvature near 0
    assert gaspari_cohn(1 - 1e-9) == pytest.approx(gaspari_cohn(1 + 1e-9), abs=1e-7)
    # inner piece as a plain polynomial in x = z
    x = np.linspace(0, 0.99, 12)
    np.testing.assert_allclose(gaspari_cohn(x), 1 - 5 / 3 * x**2 + 5 / 8 * x**3 + x**4 / 2 - x**5 / 4, atol=1e-12)
    # the quadratic term matches a unit Gaussian after scaling by c; the residual is the cubic term
    c = np.sqrt(10 / 3)
    r = np.linspace(0.01, 0.08, 8)
    resid = gaspari_cohn(r / c) - np.exp(-0.5 * r**2)
    np.testing.assert_allclose(resid, 5 / 8 * (r / c) ** 3, rtol=0.1)


def test_correlation_at_zero_distance_is_one():
    assert gaussian_like_correlation(0.0) == 1.0


def test_kernel_expansion_reproduces_kernel():
    L = 90
    c = correlation_spectrum(L, 1200.0)
    assert np.all(c > -1e-12)
    gamma = np.linspace(0, np.pi, 50)
    series = special.eval_legendre(np.arange(L + 1)[:, None], np.cos(gamma)) * (2 * np.arange(L + 1)[:, None] + 1)
    np.testing.assert_allclose(c @ series, gaussian_like_correlation(gamma * 6371.0), atol=1e-4)


STD = {"z": {500: 50.0, 850: 30.0}, "t": {500: 0.8}, "u": {500: 2.0}, "v": {500: 2.0}, "2t": {None: 1.5}}


def test_gp_marginal_std_matches_scale_factor():
    grid = LatLonGrid(91, 180)
    spec = GPPerturbSpec(STD)
    draws = np.array([gp_perturbation(spec, grid, seed=s)["z"] for s in range(1000)])  # (1000, 2, lat, lon)
    w = cell_area_weights(grid)
    std = np.sqrt(np.mean(w * draws.var(axis=0), axis=(-2, -1)))
    np.testing.assert_allclose(std, 0.085 * np.array([50.0, 30.0]), rtol=0.03)
    # one horizontal field reused across levels
    np.testing.assert_allclose(draws[:, 0] / 50.0, draws[:, 1] / 30.0, rtol=1e-12)


def test_gp_correlation_at_lengthscale_matches_kernel():
    grid = LatLonGrid(101, 200)  # 1.8 degree spacing: six columns on the equator span 1200.9 km
    spec = GPPerturbSpec({"t": {500: 1.0}}, variables=("t",))
    n = 1000
    eq = grid.n_lat // 2
    a = np.empty((n, grid.n_lon))
    b = np.empty((n, grid.n_lon))
    for s in range(n):
        f = gp_perturbation(spec, grid, seed=s)["t"][0]
        a[s] = f[eq]
        b[s] = np.roll(f[eq], -6)
    rho_hat = np.mean(np.sum(a * b, axis=0) / np.sqrt(np.sum(a * a, axis=0) * np.sum(b * b, axis=0)))
    d = 6371.0 * central_angle(latlon_to_xyz(0, 0), latlon_to_xyz(0, 6 * grid.dlon))
    rho = float(gaussian_like_correlation(d))
    assert abs(rho_hat - rho) < 3 * (1 - rho**2) / np.sqrt(n)


def test_gp_variables_are_independent():
    grid = LatLonGrid(37, 72)
    draws = [gp_perturbation(GPPerturbSpec(STD), grid, seed=s) for s in range(300)]
    u = np.array([d["u"][0, 18, 5] for d in draws])
    v = np.array([d["v"][0, 18, 5] for d in draws])
    assert abs(np.corrcoef(u, v)[0, 1]) < 3 / np.sqrt(300)


def test_gp_missing_std_entry_raises():
    with pytest.raises(KeyError):
        gp_perturbation(GPPerturbSpec({"z": {500: 1.0}}), LatLonGrid(19, 36), seed=0)


def test_gp_spec_validation():
    with pytest.raises(ValueError):
        GPPerturbSpec(STD, lengthscale_km=0)
    with pytest.raises(ValueError):
        GPPerturbSpec(STD, scale_factor=1.5)


def test_std_table_round_trip(tmp_path):
    import json

    path = tmp_path / "std.json"
    path.write_text(json.dumps([
        {"variable": "z", "level": 500, "std_6h_diff": 50.0, "residual_std": 40.0},
        {"variable": "2t", "level": None, "std_6h_diff": 1.5, "residual_std": 1.0},
    ]))
    table = load_std_table(path)
    assert table["std_6h_diff"] == {"z": {500: 50.0}, "2t": {None: 1.5}}
    assert table["residual_std"]["z"][500] == 40.0


def test_six_hour_difference_std_is_area_weighted():
    grid = LatLonGrid(19, 36)
    w = cell_area_weights(grid)
    rng = np.random.default_rng(0)
    states = rng.normal(size=(5,) + grid.shape)
    d = np.diff(states, axis=0)
    mu = np.mean(w * d)
    oracle = np.sqrt(np.mean(w * (d - mu) ** 2))
    assert six_hour_difference_std(states, grid) == pytest.approx(oracle, rel=1e-12)


# -- EDA-style perturbations and regridding ---------------------------------------------


def test_eda_style_perturb_examples():
    rng = np.random.default_rng(1)
    det = rng.normal(size=(4, 5))
    d = rng.normal(size=(4, 5))
    out = eda_style_perturb(det, np.stack([d + 1, d - 1]))
    np.testing.assert_allclose(out, np.stack([det + 1, det - 1]), atol=1e-14)
    same = eda_style_perturb(det, np.stack([d, d, d]))
    np.testing.assert_allclose(same, np.broadcast_to(det, same.shape), atol=1e-14)
    members = rng.normal(size=(7, 4, 5))
    np.testing.assert_allclose(eda_style_perturb(det, members).mean(axis=0), det, atol=1e-12)
    with pytest.raises(ValueError):
        eda_style_perturb(det, rng.normal(size=(3, 4, 6)))
    with pytest.raises(ValueError):
        eda_style_perturb(det, rng.normal(size=(1, 4, 5)))


def test_upsample_identity_and_linear_fields():
    coarse = LatLonGrid(37, 72)
    fine = LatLonGrid(73, 144)
    f = np.random.default_rng(2).normal(size=coarse.shape)
    np.testing.assert_allclose(upsample_field(f, coarse, coarse), f, atol=1e-12)
    lat2d, _ = coarse.mesh()
    lin = 0.5 * lat2d + 3.0
    flat, _ = fine.mesh()
    np.testing.assert_allclose(upsample_field(lin, coarse, fine), 0.5 * flat + 3.0, atol=1e-10)


def test_upsample_nan_island_falls_back():
    coarse = LatLonGrid(19, 36)
    fine = LatLonGrid(37, 72)
    f = np.ones(coarse.shape)
    f[9, 10] = np.nan
    fallback = np.full(fine.shape, 7.0)
    out = upsample_field(f, coarse, fine, fallback=fallback)
    assert not np.isnan(out).any()
    touched = np.zeros(fine.shape, dtype=bool)
    # fine rows 17..19 and columns 19..21 have the NaN cell in their stencil
    touched[17:20, 19:22] = True
    np.testing.assert_array_equal(out[touched], 7.0)
    np.testing.assert_array_equal(out[~touched], 1.0)
