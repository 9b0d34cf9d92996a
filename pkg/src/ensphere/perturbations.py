"""Random fields on the sphere: diffusion noise, GP perturbations, EDA-style perturbations, spectra."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special

from .grid import EARTH_RADIUS_KM, LatLonGrid, bilinear_interpolate, cell_area_weights
from .sht import SphericalHarmonicTransform, degree_mask, degree_power, exact_lmax

GP_VARIABLES = ("z", "t", "u", "v", "2t")


@lru_cache(maxsize=32)
def get_transform(grid: LatLonGrid, l_max: int) -> SphericalHarmonicTransform:
    return SphericalHarmonicTransform(grid, l_max)


def quadrature_area_weights(grid: LatLonGrid, l_max: int | None = None) -> np.ndarray:
    """Per-cell weights (unit mean) that integrate band-limited fields exactly."""
    t = get_transform(grid, exact_lmax(grid) if l_max is None else l_max)
    w = np.repeat(t.lat_weights[:, None], grid.n_lon, axis=1)
    return w / w.mean()


@dataclass(frozen=True)
class SphericalNoiseSpec:
    grid: LatLonGrid
    l_max: int | None = None  # defaults to the exact round-trip limit of the grid
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def degree(self) -> int:
        return exact_lmax(self.grid) if self.l_max is None else self.l_max


def sample_noise_coefficients(l_max: int, sigma: float, rng, size=()) -> tuple[np.ndarray, np.ndarray]:
    """i.i.d. coefficients with a flat angular spectrum and expected mean square sigma**2."""
    size = tuple(np.atleast_1d(size)) if size != () else ()
    valid_c, valid_s = degree_mask(l_max)
    scale = sigma / (l_max + 1)
    C = rng.standard_normal(size + valid_c.shape) * scale * valid_c
    S = rng.standard_normal(size + valid_s.shape) * scale * valid_s
    return C, S


def sample_spherical_noise(spec: SphericalNoiseSpec, seed=None, size=()) -> np.ndarray:
    """Isotropic Gaussian noise drawn in the harmonic domain and projected onto the grid.

    Every harmonic up to ``spec.degree`` gets the same variance, so the field
    has a flat angular power spectrum and is truncated beyond it. The expected
    area-weighted mean square is ``spec.sigma**2``; pointwise variance is the
    same everywhere (isotropy), though neighbouring polar cells are strongly
    correlated.
    """
    rng = np.random.default_rng(seed)
    t = get_transform(spec.grid, spec.degree)
    C, S = sample_noise_coefficients(spec.degree, spec.sigma, rng, size)
    return t.synthesize(C, S)


@dataclass(frozen=True)
class SpectrumResult:
    power: np.ndarray  # (..., l_max + 1), sum of squared coefficients per degree

    @property
    def degrees(self) -> np.ndarray:
        return np.arange(self.power.shape[-1])

    @property
    def per_coefficient(self) -> np.ndarray:
        """Angular power spectrum: mean squared coefficient per degree."""
        return self.power / (2 * self.degrees + 1)


def power_spectrum(field, grid: LatLonGrid, l_max: int | None = None) -> SpectrumResult:
    field = np.asarray(field, dtype=float)
    if field.shape[-2:] != grid.shape:
        raise ValueError(f"power spectrum needs a full global field of shape {grid.shape}, got {field.shape[-2:]}")
    if not np.all(np.isfinite(field)):
        raise ValueError("power spectrum needs a full global field; found non-finite cells")
    t = get_transform(grid, exact_lmax(grid) if l_max is None else l_max)
    return SpectrumResult(degree_power(*t.analyze(field)))


def gaspari_cohn(z) -> np.ndarray:
    """Fifth-order piecewise rational correlation function, support ``z <= 2``."""
    z = np.abs(np.asarray(z, dtype=float))
    out = np.zeros_like(z)
    inner = z <= 1
    zi = z[inner]
    out[inner] = -0.25 * zi**5 + 0.5 * zi**4 + 0.625 * zi**3 - 5.0 / 3.0 * zi**2 + 1.0
    outer = (z > 1) & (z < 2)
    zo = z[outer]
    out[outer] = (
        zo**5 / 12.0 - 0.5 * zo**4 + 0.625 * zo**3 + 5.0 / 3.0 * zo**2 - 5.0 * zo + 4.0 - 2.0 / (3.0 * zo)
    )
    return out


def gaussian_like_correlation(distance_km, lengthscale_km: float = 1200.0, radius: float = EARTH_RADIUS_KM):
    """Compactly supported Gaussian-shaped correlation of great-circle distance.

    Gaspari-Cohn on chordal distance with half-support ``sqrt(10/3) * L``,
    which matches the curvature of ``exp(-r**2 / (2 L**2))`` at the origin and
    stays positive definite on the sphere.
    """
    gamma = np.asarray(distance_km, dtype=float) / radius
    chord = 2.0 * radius * np.sin(0.5 * gamma)
    return gaspari_cohn(chord / (np.sqrt(10.0 / 3.0) * lengthscale_km))


def correlation_spectrum(l_max: int, lengthscale_km: float, radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    """Per-coefficient variances ``c_l`` with ``sum_l (2l+1) c_l P_l(cos g) = rho(g)``.

    ``c_l = 1/2 int_{-1}^{1} rho P_l dx`` by Gauss-Legendre in angle, split at
    the kernel's breakpoints so each piece is smooth.
    """
    c = np.sqrt(10.0 / 3.0) * lengthscale_km
    # chord = 2 R sin(g/2) -> angle where the chord reaches c and 2c
    breaks = [0.0]
    for r in (c, 2 * c):
        breaks.append(2.0 * np.arcsin(min(1.0, r / (2.0 * radius))))
    breaks = np.unique(breaks)
    nodes, weights = np.polynomial.legendre.leggauss(max(256, 4 * l_max + 64))
    degrees = np.arange(l_max + 1)
    out = np.zeros(l_max + 1)
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        g = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        wg = 0.5 * (hi - lo) * weights
        rho = gaussian_like_correlation(g * radius, lengthscale_km, radius)
        P = special.eval_legendre(degrees[:, None], np.cos(g)[None, :])
        out += P @ (wg * rho * np.sin(g))
    return 0.5 * out


@dataclass
class GPPerturbSpec:
    """target_std maps variable -> {level: std of 6-hour differences}; surface level key is None."""

    target_std: dict
    lengthscale_km: float = 1200.0
    scale_factor: float = 0.085
    variables: tuple = GP_VARIABLES

    def __post_init__(self):
        if self.lengthscale_km <= 0:
            raise ValueError("lengthscale must be positive")
        if not 0 < self.scale_factor < 1:
            raise ValueError("scale factor must lie in (0, 1)")


def load_std_table(path) -> dict:
    """Read ``[{variable, level, std_6h_diff, residual_std}, ...]`` JSON records.

    Returns ``{"std_6h_diff": {var: {level: value}}, "residual_std": {...}}``.
    """
    with open(path) as fh:
        records = json.load(fh)
    out = {"std_6h_diff": {}, "residual_std": {}}
    for rec in records:
        for key in out:
            if rec.get(key) is not None:
                out[key].setdefault(rec["variable"], {})[rec.get("level")] = float(rec[key])
    return out


def gp_perturbation(spec: GPPerturbSpec, grid: LatLonGrid, seed=None, l_max: int | None = None) -> dict:
    """Independent isotropic GP fields per variable, scaled per level.

    Returns ``{variable: array (n_levels, n_lat, n_lon)}`` with levels in the
    order of ``spec.target_std[variable]``. One horizontal field is drawn per
    variable and reused for every level (and both input timesteps).
    """
    missing = [v for v in spec.variables if not spec.target_std.get(v)]
    if missing:
        raise KeyError(f"no 6-hour-difference std for variables {missing}")
    rng = np.random.default_rng(seed)
    L = exact_lmax(grid) if l_max is None else l_max
    t = get_transform(grid, L)
    c_l = np.clip(correlation_spectrum(L, spec.lengthscale_km), 0.0, None)
    c_l /= np.sum((2 * np.arange(L + 1) + 1) * c_l)  # unit pointwise variance after truncation
    sd = np.sqrt(c_l)[:, None]
    valid_c, valid_s = degree_mask(L)
    out = {}
    for var in spec.variables:
        C = rng.standard_normal(valid_c.shape) * sd * valid_c
        S = rng.standard_normal(valid_s.shape) * sd * valid_s
        unit = t.synthesize(C, S)
        stds = np.array([spec.target_std[var][lev] for lev in spec.target_std[var]])
        out[var] = spec.scale_factor * stds[:, None, None] * unit[None]
    return out


def eda_style_perturb(det_analysis, eda_members) -> np.ndarray:
    """Deterministic analysis plus each EDA member's deviation from the EDA mean."""
    det = np.asarray(det_analysis, dtype=float)
    members = np.asarray(eda_members, dtype=float)
    if members.ndim != det.ndim + 1 or members.shape[1:] != det.shape:
        raise ValueError(f"member shape {members.shape[1:]} does not match analysis {det.shape}")
    if len(members) < 2:
        raise ValueError("need at least two EDA members")
    return det[None] + (members - members.mean(axis=0, keepdims=True))


def upsample_field(field, source: LatLonGrid, target: LatLonGrid, fallback=None) -> np.ndarray:
    """Bilinear regridding of ``field`` (trailing dims ``source.shape``) onto ``target``.

    A target cell whose stencil touches a NaN source cell takes the matching
    ``fallback`` value (e.g. the deterministic analysis), or stays NaN.
    """
    field = np.asarray(field, dtype=float)
    lat2d, lon2d = target.mesh()
    out = bilinear_interpolate(field, source, lat2d, lon2d).values
    if fallback is not None:
        fallback = np.broadcast_to(np.asarray(fallback, dtype=float), out.shape)
        bad = np.isnan(out)
        out = np.where(bad, fallback, out)
    return out


def six_hour_difference_std(states, grid: LatLonGrid) -> float:
    """Area-weighted std of successive differences of a ``(T, n_lat, n_lon)`` state series."""
    d = np.diff(np.asarray(states, dtype=float), axis=0)
    w = cell_area_weights(grid)
    mu = np.mean(w * d)
    return float(np.sqrt(np.mean(w * (d - mu) ** 2)))
