"""Binary field container and run configuration.

File layout (see docs/format.md)::

    b"ENSF"                      4-byte magic
    uint64 little-endian         header length in bytes, including the trailing newline
    header                       UTF-8 JSON followed by b"\\n"
    payload                      float32 little-endian, one block per variable in header order,
                                 each block C-ordered as (member, init, lead, level, lat, lon)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import LatLonGrid

MAGIC = b"ENSF"
SCHEMA_VERSION = 1
_PREFIX = struct.Struct("<4sQ")


class ContainerError(ValueError):
    pass


@dataclass
class FieldContainer:
    """Gridded ensemble data: ``fields[name]`` is ``(member, init, lead, level, lat, lon)``."""

    grid: LatLonGrid
    init_times: np.ndarray
    lead_hours: np.ndarray
    fields: dict
    levels: dict = field(default_factory=dict)  # name -> list of hPa levels, or None for surface
    masks: dict = field(default_factory=dict)  # name -> bool array of cells that were NaN before filling

    def __post_init__(self):
        self.init_times = np.asarray(self.init_times, dtype="datetime64[m]")
        self.lead_hours = np.asarray(self.lead_hours, dtype=float)
        n_members = None
        for name, arr in self.fields.items():
            arr = np.asarray(arr)
            lev = self.levels.get(name)
            want = (len(self.init_times), len(self.lead_hours), 1 if lev is None else len(lev)) + self.grid.shape
            if arr.ndim != 6 or arr.shape[1:] != want:
                raise ContainerError(f"variable {name!r} has shape {arr.shape}, expected (M,) + {want}")
            if n_members is None:
                n_members = arr.shape[0]
            elif arr.shape[0] != n_members:
                raise ContainerError("variables disagree on the member count")
            self.levels.setdefault(name, None)

    @property
    def n_members(self) -> int:
        return next(iter(self.fields.values())).shape[0] if self.fields else 0

    def level_index(self, name: str, level) -> int:
        lev = self.levels[name]
        if lev is None:
            if level is not None:
                raise KeyError(f"{name} is a surface variable")
            return 0
        try:
            return list(lev).index(level)
        except ValueError:
            raise KeyError(f"{name} has no level {level}; available {lev}") from None

    def get(self, name: str, level=None) -> np.ndarray:
        """``(member, init, lead, lat, lon)`` slice of one variable-level."""
        if name not in self.fields:
            raise KeyError(f"container has no variable {name!r}")
        return self.fields[name][:, :, :, self.level_index(name, level)]

    def variable_levels(self):
        for name, lev in self.levels.items():
            for level in [None] if lev is None else lev:
                yield name, level

    def header(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "grid": {"n_lat": self.grid.n_lat, "n_lon": self.grid.n_lon, "include_poles": self.grid.include_poles},
            "init_times": [str(t) for t in self.init_times],
            "lead_hours": [float(h) for h in self.lead_hours],
            "n_members": self.n_members,
            "variables": [{"name": n, "levels": self.levels[n]} for n in self.fields],
            "layout": ["member", "init", "lead", "level", "lat", "lon"],
            "dtype": "float32",
            "byte_order": "little",
        }


def write_container(path, container: FieldContainer) -> None:
    head = (json.dumps(container.header(), separators=(",", ":")) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, len(head)))
        fh.write(head)
        for name in container.fields:
            fh.write(np.ascontiguousarray(container.fields[name], dtype="<f4").tobytes())


def read_container(path, fill_values: dict | None = None) -> FieldContainer:
    """Load a container; NaNs in variables listed in ``fill_values`` are replaced and masked."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ContainerError(f"{path}: file is {len(raw)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, n_head = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r} at byte 0")
    start = _PREFIX.size
    if len(raw) < start + n_head:
        raise ContainerError(f"{path}: header needs bytes {start}..{start + n_head}, file has {len(raw)}")
    head_bytes = raw[start:start + n_head]
    if not head_bytes.endswith(b"\n"):
        raise ContainerError(f"{path}: header at byte {start} is not newline-terminated")
    head = json.loads(head_bytes.decode("utf-8"))
    if head.get("schema_version") != SCHEMA_VERSION:
        raise ContainerError(f"{path}: unsupported schema version {head.get('schema_version')}")
    if head.get("dtype") != "float32":
        raise ContainerError(f"{path}: payload dtype {head.get('dtype')!r}, expected 'float32'")
    if head.get("byte_order") != "little":
        raise ContainerError(f"{path}: byte order {head.get('byte_order')!r}, expected 'little'")
    g = head["grid"]
    grid = LatLonGrid(g["n_lat"], g["n_lon"], g["include_poles"])
    n_init, n_lead, n_mem = len(head["init_times"]), len(head["lead_hours"]), head["n_members"]
    offset = start + n_head
    fields, levels, masks = {}, {}, {}
    fill_values = fill_values or {}
    for var in head["variables"]:
        name, lev = var["name"], var["levels"]
        shape = (n_mem, n_init, n_lead, 1 if lev is None else len(lev)) + grid.shape
        n_bytes = 4 * int(np.prod(shape))
        if len(raw) < offset + n_bytes:
            raise ContainerError(
                f"{path}: payload truncated in variable {name!r} at byte {offset}: "
                f"expected {offset + n_bytes} bytes in total, file has {len(raw)}"
            )
        arr = np.frombuffer(raw, dtype="<f4", count=n_bytes // 4, offset=offset).reshape(shape).copy()
        offset += n_bytes
        if name in fill_values:
            nan = np.isnan(arr)
            if nan.any():
                masks[name] = nan
                arr[nan] = fill_values[name]
        fields[name] = arr
        levels[name] = lev
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes after payload end at byte {offset}")
    return FieldContainer(grid, np.array(head["init_times"], dtype="datetime64[m]"), np.array(head["lead_hours"]), fields, levels, masks)


@dataclass
class SamplerSettings:
    sigma_max: float = 80.0
    sigma_min: float = 0.03
    rho: float = 7.0
    n_steps: int = 20
    s_churn: float = 2.5
    s_tmin: float = 0.75
    s_tmax: float = 80.0
    s_noise: float = 1.05


@dataclass
class RunConfig:
    metrics: list = field(default_factory=lambda: ["crps", "rmse", "spread_skill", "bias"])
    percentiles: list = field(default_factory=lambda: [99.99])
    pool_levels: list = field(default_factory=lambda: [7, 6, 5, 4, 3, 2])
    cost_loss: list = field(default_factory=lambda: [round(x, 4) for x in np.linspace(0.05, 0.95, 19)])
    seed: int = 0
    n_resamples: int = 10000
    alpha: float = 0.05
    rollout_steps: int = 30
    members: int = 8
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    level_weights: dict = field(default_factory=dict)
    fill_values: dict = field(default_factory=lambda: {"sst": 271.35})

    KNOWN_METRICS = ("crps", "rmse", "spread_skill", "bias", "brier")

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            self.sampler = SamplerSettings(**self.sampler)
        self.validate()

    def validate(self) -> None:
        bad = [m for m in self.metrics if m not in self.KNOWN_METRICS]
        if bad:
            raise ValueError(f"unknown metrics {bad}; choose from {self.KNOWN_METRICS}")
        if any(not 0 < p < 100 for p in self.percentiles):
            raise ValueError("percentiles must lie in (0, 100)")
        if any(k not in range(2, 8) for k in self.pool_levels):
            raise ValueError("pool levels must lie in 2..7")
        if any(not 0 < a < 1 for a in self.cost_loss):
            raise ValueError("cost/loss ratios must lie in (0, 1)")
        if self.n_resamples < 100:
            raise ValueError("need at least 100 bootstrap resamples")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.rollout_steps < 1 or self.members < 1:
            raise ValueError("rollout_steps and members must be positive")
        s = self.sampler
        if not s.sigma_max > s.sigma_min > 0 or s.n_steps < 2 or s.s_churn < 0 or not s.s_tmin < s.s_tmax:
            raise ValueError("invalid sampler settings")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
