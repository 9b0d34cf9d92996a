"""Neighbourhood verification: pooling over geodesic discs centred on mesh nodes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import metrics
from .grid import EARTH_RADIUS_KM, LatLonGrid, cell_area_weights, refine_icosahedron

POOL_LEVELS = (7, 6, 5, 4, 3, 2)


@dataclass(frozen=True, eq=False)
class PoolRegionSet:
    grid: LatLonGrid
    level: int
    centers: np.ndarray  # (N, 3) unit vectors
    radius_km: float
    cell_index: np.ndarray  # flat grid indices, concatenated region by region
    offsets: np.ndarray  # (N + 1,), region r owns cell_index[offsets[r]:offsets[r+1]]
    cell_weight: np.ndarray  # area weight of each entry in cell_index
    region_weight: np.ndarray  # Voronoi area of each centre, unit mean

    @property
    def n_regions(self) -> int:
        return len(self.centers)

    @property
    def diameter_km(self) -> float:
        return 2.0 * self.radius_km

    def members(self, r: int) -> np.ndarray:
        return self.cell_index[self.offsets[r]:self.offsets[r + 1]]

    def save(self, path) -> None:
        np.savez(
            path,
            grid=np.array([self.grid.n_lat, self.grid.n_lon, int(self.grid.include_poles)]),
            level=self.level,
            centers=self.centers,
            radius_km=self.radius_km,
            cell_index=self.cell_index,
            offsets=self.offsets,
            cell_weight=self.cell_weight,
            region_weight=self.region_weight,
        )

    @classmethod
    def load(cls, path) -> "PoolRegionSet":
        with np.load(path) as z:
            n_lat, n_lon, poles = z["grid"]
            return cls(
                LatLonGrid(int(n_lat), int(n_lon), bool(poles)),
                int(z["level"]),
                z["centers"],
                float(z["radius_km"]),
                z["cell_index"],
                z["offsets"],
                z["cell_weight"],
                z["region_weight"],
            )


def _cache_path(cache_dir, grid: LatLonGrid, level: int, radius_km: float) -> Path:
    return Path(cache_dir) / f"pool_{grid.key()}_k{level}_r{radius_km:.3f}.npz"


def regions_from_centers(
    grid: LatLonGrid, centers: np.ndarray, radius_km: float, level: int = -1, region_weight=None
) -> PoolRegionSet:
    """Grid cells within ``radius_km`` (great-circle) of each centre."""
    pts = grid.unit_vectors().reshape(-1, 3)
    tree = cKDTree(pts)
    chord = 2.0 * np.sin(0.5 * radius_km / EARTH_RADIUS_KM)
    hits = tree.query_ball_point(centers, r=chord * (1 + 1e-12))
    lengths = np.array([len(h) for h in hits])
    if np.any(lengths == 0):
        raise ValueError(
            f"{np.sum(lengths == 0)} pooling regions contain no grid cells; "
            f"grid {grid.key()} is too coarse for radius {radius_km:.1f} km"
        )
    index = np.concatenate([np.sort(np.asarray(h, dtype=np.int64)) for h in hits])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    w = cell_area_weights(grid).ravel()[index]
    if region_weight is None:
        region_weight = np.ones(len(centers))
    region_weight = np.asarray(region_weight, dtype=float)
    return PoolRegionSet(grid, level, centers, float(radius_km), index, offsets, w, region_weight / region_weight.mean())


def build_pool_regions(grid: LatLonGrid, level: int, cache_dir=None) -> PoolRegionSet:
    """Pooling discs on a ``level``-refined icosahedral mesh.

    The radius is the mean great-circle edge length of that mesh, so the
    region diameters are about 120, 241, 481, 962, 1922 and 3828 km for
    levels 7..2. Regions are weighted by their centre's Voronoi area.
    """
    if level not in POOL_LEVELS:
        raise ValueError(f"pool level must be in 2..7, got {level}")
    mesh = refine_icosahedron(level)
    radius = mesh.mean_edge_length()
    if cache_dir is not None:
        path = _cache_path(cache_dir, grid, level, radius)
        if path.exists():
            return PoolRegionSet.load(path)
    regions = regions_from_centers(grid, mesh.nodes, radius, level, mesh.node_voronoi_weight)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        regions.save(path)
    return regions


def _flat_members(field, regions: PoolRegionSet) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    if field.shape[-2:] != regions.grid.shape:
        raise ValueError(f"field grid {field.shape[-2:]} != region grid {regions.grid.shape}")
    flat = field.reshape(field.shape[:-2] + (-1,))
    return flat[..., regions.cell_index]


def pool_average(field, regions: PoolRegionSet) -> np.ndarray:
    """Area-weighted mean within each region, shape ``(..., n_regions)``."""
    vals = _flat_members(field, regions)
    starts = regions.offsets[:-1]
    num = np.add.reduceat(vals * regions.cell_weight, starts, axis=-1)
    den = np.add.reduceat(regions.cell_weight, starts)
    return num / den


def pool_max(field, regions: PoolRegionSet) -> np.ndarray:
    vals = _flat_members(field, regions)
    return np.maximum.reduceat(vals, regions.offsets[:-1], axis=-1)


def pool(field, regions: PoolRegionSet, mode: str) -> np.ndarray:
    if mode == "avg":
        return pool_average(field, regions)
    if mode == "max":
        return pool_max(field, regions)
    raise ValueError(f"pooling mode must be 'avg' or 'max', got {mode!r}")


def pooled_crps_series(ens, tgt, regions: PoolRegionSet, mode: str = "avg") -> np.ndarray:
    ens = np.asarray(ens)
    tgt = np.asarray(tgt)
    if ens.shape[1:] != tgt.shape:
        raise ValueError(f"ensemble shape {ens.shape} does not pair with target shape {tgt.shape}")
    return metrics.crps_series(pool(ens, regions, mode), pool(tgt, regions, mode), regions.region_weight)


def pooled_crps(ens, tgt, regions: PoolRegionSet, mode: str = "avg", mask=None) -> float:
    """CRPS of pooled members against the pooled target, regions weighted by Voronoi area."""
    return float(metrics.time_mean(pooled_crps_series(ens, tgt, regions, mode), mask))


def subsample(field, grid: LatLonGrid, factor: int) -> tuple[np.ndarray, LatLonGrid]:
    """Keep every ``factor``-th row and column (e.g. 0.25 deg -> 1 deg with factor 4)."""
    if grid.include_poles and (grid.n_lat - 1) % factor:
        raise ValueError(f"factor {factor} does not divide the grid")
    field = np.asarray(field)[..., ::factor, ::factor]
    return field, LatLonGrid(field.shape[-2], field.shape[-1], grid.include_poles)
