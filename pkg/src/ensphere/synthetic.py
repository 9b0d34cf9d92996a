"""Constructed fields for tests, demos and smoke runs."""

from __future__ import annotations

import numpy as np

from .grid import LatLonGrid, central_angle, latlon_to_xyz

BACKGROUND_MSL_PA = 101_325.0
BACKGROUND_THICKNESS = 20_000.0  # z300 - z500, m^2 s^-2
Z500 = 55_000.0


def angular_distance_deg(grid: LatLonGrid, lat: float, lon: float) -> np.ndarray:
    """Great-circle distance in degrees from every cell centre to one point."""
    return np.rad2deg(central_angle(grid.unit_vectors(), latlon_to_xyz(lat, lon)))


def cyclone_state(
    grid: LatLonGrid,
    centers=(),
    depth_pa: float = 2_000.0,
    width_deg: float = 2.0,
    warm_core: float = 200.0,
    core_width_deg: float = 3.0,
    peak_wind_ms: float = 15.0,
    elevation_m: float = 0.0,
) -> dict:
    """One time slice with Gaussian MSL depressions under warm cores.

    ``centers`` is a sequence of ``(lat, lon)`` or ``(lat, lon, scale)``; the
    scale multiplies depth, warm core and wind for that system.
    """
    msl = np.full(grid.shape, BACKGROUND_MSL_PA)
    thick = np.full(grid.shape, BACKGROUND_THICKNESS)
    wind = np.zeros(grid.shape)
    for c in centers:
        lat, lon = c[0], c[1]
        scale = c[2] if len(c) > 2 else 1.0
        dist = angular_distance_deg(grid, lat, lon)
        msl -= scale * depth_pa * np.exp(-0.5 * (dist / width_deg) ** 2)
        thick += scale * warm_core * np.exp(-0.5 * (dist / core_width_deg) ** 2)
        wind = np.maximum(wind, scale * peak_wind_ms * np.exp(-0.5 * (dist / core_width_deg) ** 2))
    return {
        "msl": msl,
        "z500": np.full(grid.shape, Z500),
        "z300": Z500 + thick,
        "10u": wind,
        "10v": np.zeros(grid.shape),
        "zs": np.full(grid.shape, 9.80665 * elevation_m),
    }


def cyclone_scene(grid: LatLonGrid, tracks, n_slices: int, **kwargs) -> list:
    """Slices where ``tracks[j]`` maps slice index to ``(lat, lon)`` for system ``j``."""
    return [cyclone_state(grid, [tr[t] for tr in tracks if t in tr], **kwargs) for t in range(n_slices)]


def exchangeable_ensemble(rng, n_members: int, shape, truth_shift: float = 0.0):
    """Members and truth drawn i.i.d. from the same unit normal (plus an optional truth offset)."""
    ens = rng.standard_normal((n_members,) + tuple(shape))
    tgt = rng.standard_normal(tuple(shape)) + truth_shift
    return ens, tgt
