"""Wind-farm power from 10 m wind speed, regional aggregation and CRPS."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import metrics
from .grid import EARTH_RADIUS_KM, LatLonGrid, bilinear_interpolate, latlon_to_xyz, refine_icosahedron

CUT_IN_MS = 3.0
RATED_MS = 14.0
CUT_OUT_MS = 25.0
GROUP_DIAMETERS_KM = (120.0, 240.0, 480.0)


@dataclass(frozen=True)
class PowerCurve:
    """Tabulated load factor; linear between knots, 0 outside ``[cut_in, cut_out]``."""

    speed: np.ndarray
    load: np.ndarray
    cut_in: float = CUT_IN_MS
    rated: float = RATED_MS
    cut_out: float = CUT_OUT_MS

    def __post_init__(self):
        s = np.asarray(self.speed, dtype=float)
        p = np.asarray(self.load, dtype=float)
        object.__setattr__(self, "speed", s)
        object.__setattr__(self, "load", p)
        if s.ndim != 1 or s.shape != p.shape or len(s) < 2:
            raise ValueError("power curve needs matching 1-D speed and load columns")
        if np.any(np.diff(s) <= 0):
            raise ValueError("power curve speeds must be strictly increasing")
        if np.any((p < 0) | (p > 1)):
            raise ValueError("load factors must lie in [0, 1]")
        ramp = (s >= self.cut_in) & (s <= self.rated)
        if np.any(np.diff(p[ramp]) < 0):
            raise ValueError("load factor must be non-decreasing between cut-in and rated speed")
        if s[0] > self.cut_in or s[-1] < self.cut_out:
            raise ValueError("power curve table must span cut-in to cut-out")
        for speed, want in ((self.rated, 1.0), (self.cut_out, 1.0)):
            got = np.interp(speed, s, p)
            if not np.isclose(got, want, atol=1e-9):
                raise ValueError(f"load factor at {speed} m/s is {got}, expected {want}")
        if np.any(p[s < self.cut_in] != 0):
            raise ValueError("load factor must be 0 below cut-in")

    @classmethod
    def from_csv(cls, path) -> "PowerCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            speed = [float(r["wind_speed_ms"]) for r in rows]
            load = [float(r["normalized_power"]) for r in rows]
        except KeyError as err:
            raise ValueError(f"power curve CSV is missing column {err}") from None
        return cls(np.array(speed), np.array(load))

    @classmethod
    def parametric(cls, cut_in=CUT_IN_MS, rated=RATED_MS, cut_out=CUT_OUT_MS, n: int = 45) -> "PowerCurve":
        """Idealised cubic ramp between cut-in and rated speed.

        A stand-in when no tabulated turbine curve is available; it satisfies
        the anchor behaviour but is not a manufacturer curve.
        """
        ramp = np.linspace(cut_in, rated, n)
        frac = (ramp**3 - cut_in**3) / (rated**3 - cut_in**3)
        speed = np.concatenate([[0.0], ramp, [cut_out]])
        load = np.concatenate([[0.0], frac, [1.0]])
        return cls(speed, load, cut_in, rated, cut_out)


def load_factor(curve: PowerCurve, speed) -> np.ndarray:
    speed = np.asarray(speed, dtype=float)
    if np.any(speed < 0):
        raise ValueError("wind speed must be non-negative")
    lf = np.interp(speed, curve.speed, curve.load)
    lf = np.where(speed < curve.cut_in, 0.0, lf)
    lf = np.where(speed >= curve.rated, 1.0, lf)
    return np.where(speed > curve.cut_out, 0.0, lf)


@dataclass(frozen=True)
class WindFarms:
    lat: np.ndarray
    lon: np.ndarray
    capacity_mw: np.ndarray

    def __post_init__(self):
        for name in ("lat", "lon", "capacity_mw"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not self.lat.shape == self.lon.shape == self.capacity_mw.shape:
            raise ValueError("farm columns differ in length")
        if np.any(self.capacity_mw <= 0):
            raise ValueError("farm capacities must be positive")

    def __len__(self) -> int:
        return len(self.lat)

    @classmethod
    def from_csv(cls, path) -> "WindFarms":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            return cls(
                np.array([float(r["latitude"]) for r in rows]),
                np.array([float(r["longitude"]) for r in rows]),
                np.array([float(r["capacity_mw"]) for r in rows]),
            )
        except KeyError as err:
            raise ValueError(f"farms CSV is missing column {err}") from None


def farm_speeds(u, v, grid: LatLonGrid, farms: WindFarms) -> np.ndarray:
    """Bilinearly interpolated wind speed at each farm, shape ``(..., n_farms)``."""
    speed = metrics.derive_wind_speed(u, v)
    return bilinear_interpolate(speed, grid, farms.lat, farms.lon).values


def farm_power(speeds, farms: WindFarms, curve: PowerCurve) -> np.ndarray:
    """Megawatts per farm from speeds ``(..., n_farms)``."""
    speeds = np.asarray(speeds, dtype=float)
    if speeds.shape[-1] != len(farms):
        raise ValueError(f"got speeds for {speeds.shape[-1]} farms, expected {len(farms)}")
    if np.any(np.isnan(speeds)):
        raise ValueError("missing wind speed at one or more farms")
    return load_factor(curve, speeds) * farms.capacity_mw


@dataclass(frozen=True)
class FarmGroups:
    """Farm membership of each non-empty pooling disc: ``(n_groups, n_farms)`` 0/1 matrix."""

    membership: np.ndarray
    centers: np.ndarray
    diameter_km: float

    def total_capacity(self, farms: WindFarms) -> np.ndarray:
        return self.membership @ farms.capacity_mw


def farm_groups(farms: WindFarms, centers, diameter_km: float) -> FarmGroups:
    """Group farms within ``diameter_km / 2`` of each centre; empty groups are dropped."""
    pts = latlon_to_xyz(farms.lat, farms.lon)
    centers = np.asarray(centers, dtype=float)
    chord = 2.0 * np.sin(0.25 * diameter_km / EARTH_RADIUS_KM)
    hits = cKDTree(pts).query_ball_point(centers, r=chord * (1 + 1e-12))
    rows = [(k, h) for k, h in enumerate(hits) if h]
    member = np.zeros((len(rows), len(farms)))
    for i, (_, h) in enumerate(rows):
        member[i, h] = 1.0
    return FarmGroups(member, centers[[k for k, _ in rows]], diameter_km)


def mesh_farm_groups(farms: WindFarms, diameter_km: float) -> FarmGroups:
    """Groups centred on the level-7 mesh nodes."""
    if diameter_km not in GROUP_DIAMETERS_KM:
        raise ValueError(f"group diameter must be one of {GROUP_DIAMETERS_KM}")
    return farm_groups(farms, refine_icosahedron(7).nodes, diameter_km)


def group_power(power, groups: FarmGroups) -> np.ndarray:
    """Summed MW per group, ``(..., n_groups)``."""
    return np.asarray(power) @ groups.membership.T


def regional_power_crps_series(ens_speeds, tgt_speeds, farms: WindFarms, groups: FarmGroups, curve: PowerCurve) -> np.ndarray:
    """Per-init mean over groups of the CRPS of summed power; speeds are ``(M, K, F)`` and ``(K, F)``."""
    fc = group_power(farm_power(ens_speeds, farms, curve), groups)
    ob = group_power(farm_power(tgt_speeds, farms, curve), groups)
    return metrics.crps_series(fc, ob)


def regional_power_crps(ens_speeds, tgt_speeds, farms: WindFarms, groups: FarmGroups, curve: PowerCurve, mask=None) -> float:
    return float(metrics.time_mean(regional_power_crps_series(ens_speeds, tgt_speeds, farms, groups, curve), mask))


def leadtime_interpolate(lead_hours, values, targets) -> np.ndarray:
    """Linear interpolation of a metric curve in lead time; no extrapolation."""
    x = np.asarray(lead_hours, dtype=float)
    y = np.asarray(values, dtype=float)
    t = np.asarray(targets, dtype=float)
    if np.any(np.diff(x) <= 0):
        raise ValueError("lead times must be strictly increasing")
    if np.any((t < x[0]) | (t > x[-1])):
        raise ValueError(f"target lead times outside [{x[0]}, {x[-1]}] h would need extrapolation")
    return np.interp(t, x, y)
