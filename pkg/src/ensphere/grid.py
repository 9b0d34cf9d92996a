"""Geometry of equiangular latitude-longitude grids and refined icosahedral meshes."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

EARTH_RADIUS_KM = 6371.0
MAX_REFINEMENT = 8


@dataclass(frozen=True)
class LatLonGrid:
    """Equiangular grid of cell centres.

    With ``include_poles`` (the ERA5 convention, e.g. 721 x 1440) the first and
    last rows sit on the poles and their cells are half-height caps. Otherwise
    rows are offset by half a spacing and no cell centre lies on a pole.
    Latitudes run north to south, longitudes start at 0 and increase east.
    """

    n_lat: int
    n_lon: int
    include_poles: bool = True

    def __post_init__(self):
        if self.n_lat < 2 or self.n_lon < 3:
            raise ValueError(f"grid too small: {self.n_lat} x {self.n_lon}")

    @classmethod
    def from_resolution(cls, degrees: float) -> "LatLonGrid":
        n_lon = int(round(360.0 / degrees))
        return cls(n_lon // 2 + 1, n_lon, include_poles=True)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def dlat(self) -> float:
        if self.include_poles:
            return 180.0 / (self.n_lat - 1)
        return 180.0 / self.n_lat

    @property
    def dlon(self) -> float:
        return 360.0 / self.n_lon

    @cached_property
    def lat(self) -> np.ndarray:
        j = np.arange(self.n_lat)
        if self.include_poles:
            return 90.0 - j * self.dlat
        return 90.0 - (j + 0.5) * self.dlat

    @cached_property
    def lon(self) -> np.ndarray:
        return np.arange(self.n_lon) * self.dlon

    @cached_property
    def lat_bounds(self) -> np.ndarray:
        """(n_lat, 2) array of (north, south) cell edges in degrees."""
        half = 0.5 * self.dlat
        north = np.clip(self.lat + half, -90.0, 90.0)
        south = np.clip(self.lat - half, -90.0, 90.0)
        return np.stack([north, south], axis=1)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.lat, self.lon, indexing="ij")

    def unit_vectors(self) -> np.ndarray:
        lat2d, lon2d = self.mesh()
        return latlon_to_xyz(lat2d, lon2d)

    def key(self) -> str:
        return f"{self.n_lat}x{self.n_lon}{'p' if self.include_poles else 'o'}"


def latlon_to_xyz(lat, lon) -> np.ndarray:
    lat = np.deg2rad(np.asarray(lat, dtype=float))
    lon = np.deg2rad(np.asarray(lon, dtype=float))
    clat = np.cos(lat)
    return np.stack([clat * np.cos(lon), clat * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_latlon(xyz) -> tuple[np.ndarray, np.ndarray]:
    xyz = np.asarray(xyz, dtype=float)
    lat = np.rad2deg(np.arcsin(np.clip(xyz[..., 2], -1.0, 1.0)))
    lon = np.rad2deg(np.arctan2(xyz[..., 1], xyz[..., 0])) % 360.0
    return lat, lon


def cell_solid_angles(grid: LatLonGrid) -> np.ndarray:
    """Exact solid angle (steradians) of every cell, shape ``grid.shape``."""
    bounds = np.deg2rad(grid.lat_bounds)
    band = np.sin(bounds[:, 0]) - np.sin(bounds[:, 1])
    per_row = band * np.deg2rad(grid.dlon)
    return np.repeat(per_row[:, None], grid.n_lon, axis=1)


def cell_area_weights(grid: LatLonGrid) -> np.ndarray:
    """Cell area weights normalised to unit mean over the grid."""
    omega = cell_solid_angles(grid)
    return omega / omega.mean()


def _as_unit_vectors(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] == 3:
        return p / np.linalg.norm(p, axis=-1, keepdims=True)
    if p.shape[-1] == 2:
        return latlon_to_xyz(p[..., 0], p[..., 1])
    raise ValueError("points must be (..., 3) unit vectors or (..., 2) lat/lon degrees")


def central_angle(p, q) -> np.ndarray:
    """Great-circle angle in radians between points (xyz or lat/lon pairs)."""
    a = _as_unit_vectors(p)
    b = _as_unit_vectors(q)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def geodesic_distance(p, q, radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    """Great-circle distance in km between points given as xyz or (lat, lon)."""
    return radius * central_angle(p, q)


@dataclass(frozen=True)
class Interpolated:
    values: np.ndarray
    clamped: np.ndarray  # True where the query latitude lay poleward of the outer rows


def bilinear_interpolate(field, grid: LatLonGrid, lat, lon) -> Interpolated:
    """Bilinear blend of the four surrounding cell centres.

    ``field`` has trailing dims ``grid.shape``; leading dims are carried
    through. Longitude wraps periodically. Latitudes beyond the outermost rows
    are clamped onto the nearest row and flagged.
    """
    field = np.asarray(field)
    if field.shape[-2:] != grid.shape:
        raise ValueError(f"field trailing shape {field.shape[-2:]} != grid {grid.shape}")
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    row = (grid.lat[0] - lat) / grid.dlat
    clamped = (row < 0) | (row > grid.n_lat - 1)
    row = np.clip(row, 0, grid.n_lat - 1)
    r0 = np.minimum(np.floor(row).astype(int), grid.n_lat - 2)
    fr = row - r0

    col = np.mod(lon - grid.lon[0], 360.0) / grid.dlon
    c0 = np.floor(col).astype(int) % grid.n_lon
    fc = col - np.floor(col)
    c1 = (c0 + 1) % grid.n_lon

    v00 = field[..., r0, c0]
    v01 = field[..., r0, c1]
    v10 = field[..., r0 + 1, c0]
    v11 = field[..., r0 + 1, c1]
    # zero-weight corners are dropped so a NaN there cannot leak in
    top = _blend(v00, v01, fc)
    bottom = _blend(v10, v11, fc)
    return Interpolated(_blend(top, bottom, fr), clamped)


def _blend(a, b, t):
    out = np.where(t == 0, a, a * (1 - t) + b * t)
    return np.where(t == 1, b, out)


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    # orient every face counter-clockwise seen from outside
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    outward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) > 0
    faces[~outward] = faces[~outward][:, [0, 2, 1]]
    return verts, faces


def _edges_from_faces(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def _subdivide(nodes: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    edges = _edges_from_faces(faces)
    n = len(nodes)
    mid = nodes[edges[:, 0]] + nodes[edges[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    # edge (i, j) -> index of its midpoint node
    code = edges[:, 0].astype(np.int64) * n + edges[:, 1]

    def midpoint(i, j):
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        return n + np.searchsorted(code, lo.astype(np.int64) * n + hi)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
    new_faces = np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )
    return np.concatenate([nodes, mid]), new_faces


def _signed_triangle_area(a, b, c) -> np.ndarray:
    # Van Oosterom & Strackee solid angle, sign follows orientation
    triple = np.einsum("ij,ij->i", a, np.cross(b, c))
    denom = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(triple, denom)


@dataclass(frozen=True, eq=False)
class IcosahedralMesh:
    level: int
    nodes: np.ndarray  # (N, 3) unit vectors
    faces: np.ndarray  # (F, 3), counter-clockwise from outside

    @cached_property
    def edges(self) -> np.ndarray:
        return _edges_from_faces(self.faces)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def node_voronoi_weight(self) -> np.ndarray:
        """Voronoi cell solid angle of every node (steradians, sums to 4*pi)."""
        return voronoi_weights(self, radius=1.0)

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        splits = np.searchsorted(both[:, 0], np.arange(1, self.n_nodes))
        return np.split(both[:, 1], splits)

    def latlon(self) -> tuple[np.ndarray, np.ndarray]:
        return xyz_to_latlon(self.nodes)

    def mean_edge_length(self, radius: float = EARTH_RADIUS_KM) -> float:
        e = self.edges
        return float(geodesic_distance(self.nodes[e[:, 0]], self.nodes[e[:, 1]], radius).mean())

    def to_json(self) -> str:
        lat, lon = self.latlon()
        return json.dumps(
            {
                "level": self.level,
                "nodes": self.nodes.tolist(),
                "lat": lat.tolist(),
                "lon": lon.tolist(),
                "edges": self.edges.tolist(),
                "voronoi_weight": self.node_voronoi_weight.tolist(),
            }
        )


def refine_icosahedron(k: int) -> IcosahedralMesh:
    """Icosahedron refined ``k`` times by edge-midpoint subdivision.

    New nodes are appended after their parents in order of the sorted parent
    edge list, so node ids are stable across runs.
    """
    if not 0 <= k <= MAX_REFINEMENT:
        raise ValueError(f"refinement level must be in [0, {MAX_REFINEMENT}], got {k}")
    nodes, faces = _icosahedron()
    for _ in range(k):
        nodes, faces = _subdivide(nodes, faces)
    return IcosahedralMesh(k, nodes, faces)


def voronoi_weights(mesh: IcosahedralMesh, radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    """Spherical Voronoi cell area of each node.

    Each triangle is split at its circumcentre and edge midpoints; the two
    sub-triangles adjacent to a vertex belong to that vertex's cell. Signed
    areas keep the decomposition exact even for obtuse triangles.
    """
    x = mesh.nodes
    f = mesh.faces
    area = np.zeros(mesh.n_nodes)
    a, b, c = x[f[:, 0]], x[f[:, 1]], x[f[:, 2]]
    cc = np.cross(b - a, c - a)
    cc /= np.linalg.norm(cc, axis=1, keepdims=True)

    def unit(v):
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    m_ab, m_bc, m_ca = unit(a + b), unit(b + c), unit(c + a)
    for idx, p, m_next, m_prev in (
        (f[:, 0], a, m_ab, m_ca),
        (f[:, 1], b, m_bc, m_ab),
        (f[:, 2], c, m_ca, m_bc),
    ):
        part = _signed_triangle_area(p, m_next, cc) + _signed_triangle_area(p, cc, m_prev)
        np.add.at(area, idx, part)
    return area * radius**2


def khop_neighborhood(mesh: IcosahedralMesh, node: int, hops: int) -> np.ndarray:
    """Sorted ids of all nodes within ``hops`` edges of ``node`` (inclusive)."""
    if not 0 <= node < mesh.n_nodes:
        raise ValueError(f"node {node} not in mesh with {mesh.n_nodes} nodes")
    if hops < 0:
        raise ValueError("hops must be non-negative")
    nbrs = mesh.neighbors
    depth = {node: 0}
    queue = deque([node])
    while queue:
        u = queue.popleft()
        if depth[u] == hops:
            continue
        for v in nbrs[u]:
            v = int(v)
            if v not in depth:
                depth[v] = depth[u] + 1
                queue.append(v)
    return np.array(sorted(depth))
