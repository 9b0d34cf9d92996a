"""Tropical cyclone detection, stitching, strike probabilities and REV.

Detection follows the DetectNodes/StitchNodes recipe: strict MSL minima that
sit inside a closed MSL contour and under a warm core, merged within a fixed
radius, then stitched greedily in time into tracks that must last long
enough and be strong enough often enough.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .grid import LatLonGrid, cell_area_weights, central_angle, latlon_to_xyz

GRAVITY = 9.80665
REQUIRED_FIELDS = ("msl", "z500", "z300", "10u", "10v", "zs")


@dataclass(frozen=True)
class DetectParams:
    merge_deg: float = 6.0
    msl_delta_pa: float = 200.0
    msl_radius_deg: float = 5.5
    thickness_delta: float = 58.8  # m^2 s^-2
    thickness_radius_deg: float = 6.5
    thickness_search_deg: float = 1.0
    wind_radius_deg: float = 2.0


@dataclass(frozen=True)
class StitchParams:
    range_deg: float = 12.0
    max_gap_h: float = 24.0
    min_duration_h: float = 54.0
    min_qualifying: int = 5
    min_wind_ms: float = 10.0
    max_elevation_m: float = 150.0
    max_abs_lat: float = 50.0


@dataclass(frozen=True)
class CycloneCandidate:
    time: np.datetime64
    lat: float
    lon: float
    msl_pa: float
    wind_ms: float
    elevation_m: float

    def __post_init__(self):
        if abs(self.lat) > 90:
            raise ValueError(f"latitude {self.lat} out of range")
        object.__setattr__(self, "time", np.datetime64(self.time, "m"))
        for name in ("lat", "lon", "msl_pa", "wind_ms", "elevation_m"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def qualifies(self, p: StitchParams) -> bool:
        return self.wind_ms > p.min_wind_ms and self.elevation_m < p.max_elevation_m and abs(self.lat) <= p.max_abs_lat


@dataclass
class CycloneTrack:
    candidates: list = field(default_factory=list)

    @property
    def start(self) -> np.datetime64:
        return self.candidates[0].time

    @property
    def end(self) -> np.datetime64:
        return self.candidates[-1].time

    @property
    def duration_h(self) -> float:
        return _hours(self.end - self.start)

    @property
    def times(self) -> np.ndarray:
        return np.array([c.time for c in self.candidates])

    @property
    def positions(self) -> np.ndarray:
        return np.array([(c.lat, c.lon) for c in self.candidates])

    def at(self, time) -> CycloneCandidate | None:
        t = np.datetime64(time, "m")
        for c in self.candidates:
            if c.time == t:
                return c
        return None

    def clipped(self, start, stop) -> "CycloneTrack":
        lo, hi = np.datetime64(start, "m"), np.datetime64(stop, "m")
        return CycloneTrack([c for c in self.candidates if lo <= c.time <= hi])


def _hours(td) -> float:
    return float(td / np.timedelta64(1, "h"))


def _angle_deg(lat1, lon1, lat2, lon2):
    return np.rad2deg(central_angle(latlon_to_xyz(lat1, lon1), latlon_to_xyz(lat2, lon2)))


def local_minima(field: np.ndarray) -> np.ndarray:
    """``(n, 2)`` (row, col) of cells strictly below all 8 neighbours; longitude wraps."""
    f = np.asarray(field, dtype=float)
    padded = np.pad(f, ((1, 1), (0, 0)), constant_values=np.inf)
    is_min = np.ones(f.shape, dtype=bool)
    for dr in (-1, 0, 1):
        rows = padded[1 + dr:1 + dr + f.shape[0]]
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            is_min &= f < np.roll(rows, -dc, axis=1)
    return np.argwhere(is_min)


class _GridGeometry:
    def __init__(self, grid: LatLonGrid):
        self.grid = grid
        self.xyz = grid.unit_vectors()

    def within(self, row: int, col: int, radius_deg: float) -> np.ndarray:
        cosang = self.xyz @ self.xyz[row, col]
        return cosang >= np.cos(np.deg2rad(radius_deg)) - 1e-12

    def neighbours(self, row: int, col: int):
        n_lat, n_lon = self.grid.shape
        for dr in (-1, 0, 1):
            r = row + dr
            if not 0 <= r < n_lat:
                continue
            for dc in (-1, 0, 1):
                if dr or dc:
                    yield r, (col + dc) % n_lon


def closed_contour(field, geom: _GridGeometry, row: int, col: int, delta: float, radius_deg: float) -> bool:
    """True if the region ``field < field[row, col] + delta`` connected to the seed stays within the radius."""
    ref = field[row, col] + delta
    inside = geom.within(row, col, radius_deg)
    seen = np.zeros(field.shape, dtype=bool)
    seen[row, col] = True
    queue = deque([(row, col)])
    while queue:
        r, c = queue.popleft()
        for rr, cc in geom.neighbours(r, c):
            if seen[rr, cc] or field[rr, cc] >= ref:
                continue
            if not inside[rr, cc]:
                return False
            seen[rr, cc] = True
            queue.append((rr, cc))
    return True


def detect_nodes(state: dict, grid: LatLonGrid, time, params: DetectParams = DetectParams()) -> list:
    """Candidate cyclone centres in one time slice.

    ``state`` maps ``msl`` (Pa), ``z500``/``z300`` (geopotential, m^2 s^-2),
    ``10u``/``10v`` (m/s) and ``zs`` (surface geopotential) to grid fields.
    """
    missing = [k for k in REQUIRED_FIELDS if k not in state]
    if missing:
        raise KeyError(f"cyclone detection needs fields {missing}")
    msl = np.asarray(state["msl"], dtype=float)
    thickness = np.asarray(state["z300"], dtype=float) - np.asarray(state["z500"], dtype=float)
    wind = np.hypot(np.asarray(state["10u"], dtype=float), np.asarray(state["10v"], dtype=float))
    elevation = np.asarray(state["zs"], dtype=float) / GRAVITY
    geom = _GridGeometry(grid)

    mins = local_minima(msl)
    order = np.argsort(msl[mins[:, 0], mins[:, 1]], kind="stable")
    kept = []
    for r, c in mins[order]:
        if all(_angle_deg(grid.lat[r], grid.lon[c], grid.lat[kr], grid.lon[kc]) > params.merge_deg for kr, kc in kept):
            kept.append((r, c))

    out = []
    for r, c in kept:
        if not closed_contour(msl, geom, r, c, params.msl_delta_pa, params.msl_radius_deg):
            continue
        near = geom.within(r, c, params.thickness_search_deg)
        masked = np.where(near, thickness, -np.inf)
        tr, tc = np.unravel_index(np.argmax(masked), masked.shape)
        if not closed_contour(-thickness, geom, tr, tc, params.thickness_delta, params.thickness_radius_deg):
            continue
        w = wind[geom.within(r, c, params.wind_radius_deg)].max()
        out.append(CycloneCandidate(time, float(grid.lat[r]), float(grid.lon[c]), float(msl[r, c]), float(w), float(elevation[r, c])))
    return out


def stitch_nodes(slices, params: StitchParams = StitchParams()) -> list:
    """Link per-slice candidates into tracks and keep those that pass the track rules.

    ``slices`` is an iterable of candidate lists (one per time, any order of
    times). Within each slice, (track, candidate) pairs within range are
    matched greedily: nearest first, then deeper MSL, then lat/lon.
    """
    by_time = {}
    for cands in slices:
        for c in cands:
            by_time.setdefault(c.time, []).append(c)
    tracks: list[CycloneTrack] = []
    for t in sorted(by_time):
        cands = sorted(by_time[t], key=lambda c: (c.msl_pa, c.lat, c.lon))
        live = [k for k, tr in enumerate(tracks) if 0 < _hours(t - tr.end) <= params.max_gap_h]
        pairs = []
        for k in live:
            last = tracks[k].candidates[-1]
            for j, c in enumerate(cands):
                d = float(_angle_deg(last.lat, last.lon, c.lat, c.lon))
                if d <= params.range_deg:
                    pairs.append((d, c.msl_pa, c.lat, c.lon, k, j))
        used_tracks, used_cands = set(), set()
        for _, _, _, _, k, j in sorted(pairs):
            if k in used_tracks or j in used_cands:
                continue
            tracks[k].candidates.append(cands[j])
            used_tracks.add(k)
            used_cands.add(j)
        for j, c in enumerate(cands):
            if j not in used_cands:
                tracks.append(CycloneTrack([c]))
    return [tr for tr in tracks if track_is_valid(tr, params)]


def track_is_valid(track: CycloneTrack, params: StitchParams = StitchParams()) -> bool:
    cs = track.candidates
    if not cs or track.duration_h < params.min_duration_h:
        return False
    for a, b in zip(cs[:-1], cs[1:]):
        gap = _hours(b.time - a.time)
        if not 0 < gap <= params.max_gap_h:
            return False
        if _angle_deg(a.lat, a.lon, b.lat, b.lon) > params.range_deg:
            return False
    return sum(c.qualifies(params) for c in cs) >= params.min_qualifying


def track_cyclones(states, grid: LatLonGrid, times, detect: DetectParams = DetectParams(), stitch: StitchParams = StitchParams()) -> list:
    """Detect in every slice, then stitch."""
    return stitch_nodes([detect_nodes(s, grid, t, detect) for s, t in zip(states, times)], stitch)


def prepend_context(context_states, context_times, forecast_states, forecast_times, grid: LatLonGrid,
                    max_lead_h: float = 216.0, detect: DetectParams = DetectParams(), stitch: StitchParams = StitchParams()) -> list:
    """Track over ground-truth context followed by the forecast; keep forecast-time points up to ``max_lead_h``.

    The context must end exactly one cadence step before the first forecast time.
    """
    f_times = np.asarray(forecast_times, dtype="datetime64[m]")
    c_times = np.asarray(context_times, dtype="datetime64[m]")
    if len(c_times):
        cadence = f_times[1] - f_times[0] if len(f_times) > 1 else c_times[-1] - c_times[-2]
        if f_times[0] - c_times[-1] != cadence:
            raise ValueError(f"context ends at {c_times[-1]} but forecast starts at {f_times[0]}; gap at the splice")
    states = list(context_states) + list(forecast_states)
    times = np.concatenate([c_times, f_times])
    tracks = track_cyclones(states, grid, times, detect, stitch)
    init = f_times[0] - (f_times[1] - f_times[0] if len(f_times) > 1 else np.timedelta64(0, "m"))
    start = f_times[0]
    stop = min(f_times[-1], init + np.timedelta64(int(max_lead_h * 60), "m"))
    clipped = [tr.clipped(start, stop) for tr in tracks]
    return [tr for tr in clipped if tr.candidates]


def strike_heatmap(member_tracks, time, grid: LatLonGrid = LatLonGrid(181, 360)) -> np.ndarray:
    """Fraction of members with a cyclone centre in each cell at ``time``."""
    n_members = len(member_tracks)
    if n_members < 1:
        raise ValueError("need at least one member")
    t = np.datetime64(time, "m")
    counts = np.zeros(grid.shape)
    for tracks in member_tracks:
        hit = np.zeros(grid.shape, dtype=bool)
        for tr in tracks:
            c = tr.at(t)
            if c is not None:
                hit[nearest_cell(grid, c.lat, c.lon)] = True
        counts += hit
    return counts / n_members


def nearest_cell(grid: LatLonGrid, lat: float, lon: float) -> tuple[int, int]:
    row = int(np.clip(np.round((grid.lat[0] - lat) / grid.dlat), 0, grid.n_lat - 1))
    col = int(np.round(np.mod(lon - grid.lon[0], 360.0) / grid.dlon)) % grid.n_lon
    return row, col


def truth_map(tracks, time, grid: LatLonGrid = LatLonGrid(181, 360)) -> np.ndarray:
    return strike_heatmap([tracks], time, grid)


def cyclone_rev(heatmaps, truth_maps, n_members: int, cost_loss_ratios, grid: LatLonGrid = LatLonGrid(181, 360)) -> np.ndarray:
    """REV* of strike probabilities ``(T, lat, lon)`` against binary truth maps."""
    return metrics.rev_from_probabilities(heatmaps, truth_maps, cell_area_weights(grid), n_members, cost_loss_ratios)


def write_tracks_csv(path, member_tracks) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["member", "track_id", "time", "lat", "lon", "msl_pa", "wind_ms"])
        for m, tracks in enumerate(member_tracks):
            for k, tr in enumerate(tracks):
                for c in tr.candidates:
                    w.writerow([m, k, str(c.time), c.lat, c.lon, c.msl_pa, c.wind_ms])
