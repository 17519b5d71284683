"""BEV / range-view grid specs and point<->grid transfer maps."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import yaml

from .config import get_thread_count
from .errors import InvalidInputError, RigFormatError, ShapeError
from .pointcloud import PointCloud

logger = logging.getLogger(__name__)

REDUCTIONS = ('max', 'mean')
DEFAULT_REDUCTION = 'max'
DEFAULT_RV_ELEVATION_DEG = (-30.0, 10.0)


def _check_range(name: str, bounds) -> Tuple[float, float]:
    lo, hi = (float(b) for b in bounds)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
        raise InvalidInputError(f"{name} must satisfy lo < hi, got {bounds}")
    return lo, hi


@dataclass(frozen=True)
class BevSpec:
    x_range: Tuple[float, float] = (-51.2, 51.2)
    y_range: Tuple[float, float] = (-51.2, 51.2)
    z_range: Tuple[float, float] = (-5.0, 3.0)
    cells_x: int = 512
    cells_y: int = 512

    def __post_init__(self):
        for name in ('x_range', 'y_range', 'z_range'):
            object.__setattr__(self, name, _check_range(name, getattr(self, name)))
        if int(self.cells_x) < 1 or int(self.cells_y) < 1:
            raise InvalidInputError(f"cell counts must be >= 1, got {self.cells_x}x{self.cells_y}")

    @classmethod
    def nuscenes(cls) -> 'BevSpec':
        return cls()

    @classmethod
    def semantickitti(cls) -> 'BevSpec':
        return cls(x_range=(-75.2, 75.2), y_range=(-75.2, 75.2), z_range=(-4.0, 2.0))

    @property
    def rows(self) -> int:
        return int(self.cells_y)

    @property
    def cols(self) -> int:
        return int(self.cells_x)

    @property
    def cell_x(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.cells_x

    @property
    def cell_y(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.cells_y

    def shifted(self, offset) -> 'BevSpec':
        dx, dy, dz = (float(o) for o in offset)
        return BevSpec(
            (self.x_range[0] + dx, self.x_range[1] + dx),
            (self.y_range[0] + dy, self.y_range[1] + dy),
            (self.z_range[0] + dz, self.z_range[1] + dz),
            self.cells_x,
            self.cells_y,
        )


@dataclass(frozen=True)
class RvSpec:
    """Spherical range view: azimuth covers [-pi, pi) over cols, elevation hi maps to row 0."""

    rows: int = 64
    cols: int = 2048
    elevation_range: Tuple[float, float] = tuple(math.radians(a) for a in DEFAULT_RV_ELEVATION_DEG)

    def __post_init__(self):
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise InvalidInputError(f"range view must have rows, cols >= 1, got {self.rows}x{self.cols}")
        object.__setattr__(self, 'elevation_range', _check_range('elevation_range', self.elevation_range))


@dataclass(frozen=True, eq=False)
class GridIndexMap:
    """Per-point cell assignment plus four-neighbor bilinear gather weights."""

    row: np.ndarray
    col: np.ndarray
    in_bounds: np.ndarray
    gather_rows: np.ndarray  # N x 4
    gather_cols: np.ndarray  # N x 4
    gather_weights: np.ndarray  # N x 4, zero for out-of-bounds points
    rows: int
    cols: int

    def __len__(self) -> int:
        return int(self.row.shape[0])

    @property
    def flat_index(self) -> np.ndarray:
        return self.row * self.cols + self.col


def _neighbors(continuous: np.ndarray):
    """Lower neighbor index and fractional offset for cell-center-relative coordinates."""
    base = np.floor(continuous)
    return base.astype(np.int64), continuous - base


def _build_map(row, col, in_bounds, row_cont, col_cont, rows, cols, wrap_cols: bool) -> GridIndexMap:
    r0, fr = _neighbors(row_cont)
    c0, fc = _neighbors(col_cont)
    gather_rows = np.stack([r0, r0, r0 + 1, r0 + 1], axis=1)
    gather_cols = np.stack([c0, c0 + 1, c0, c0 + 1], axis=1)
    weights = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    # Neighbors past the border fold onto the nearest cell so weights still sum to one.
    gather_rows = np.clip(gather_rows, 0, rows - 1)
    gather_cols = np.mod(gather_cols, cols) if wrap_cols else np.clip(gather_cols, 0, cols - 1)
    weights = np.where(in_bounds[:, None], weights, 0.0)
    row = np.where(in_bounds, row, 0)
    col = np.where(in_bounds, col, 0)
    gather_rows = np.where(in_bounds[:, None], gather_rows, 0)
    gather_cols = np.where(in_bounds[:, None], gather_cols, 0)
    return GridIndexMap(row, col, in_bounds, gather_rows, gather_cols, weights, rows, cols)


def bev_index(cloud: PointCloud, spec: BevSpec) -> GridIndexMap:
    x, y, z = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    col_cont = (x - spec.x_range[0]) / spec.cell_x
    row_cont = (y - spec.y_range[0]) / spec.cell_y
    col = np.floor(col_cont).astype(np.int64)
    row = np.floor(row_cont).astype(np.int64)
    in_bounds = (
        (x >= spec.x_range[0]) & (x < spec.x_range[1])
        & (y >= spec.y_range[0]) & (y < spec.y_range[1])
        & (z >= spec.z_range[0]) & (z < spec.z_range[1])
        & (col >= 0) & (col < spec.cols) & (row >= 0) & (row < spec.rows)
    )
    return _build_map(row, col, in_bounds, row_cont - 0.5, col_cont - 0.5, spec.rows, spec.cols, wrap_cols=False)


def rv_index(cloud: PointCloud, spec: RvSpec) -> GridIndexMap:
    x, y, z = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    planar = np.hypot(x, y)
    azimuth = np.arctan2(y, x)
    elevation = np.arctan2(z, planar)
    el_lo, el_hi = spec.elevation_range

    col_cont = (azimuth + math.pi) / (2.0 * math.pi) * spec.cols
    row_cont = (el_hi - elevation) / (el_hi - el_lo) * spec.rows
    col = np.mod(np.floor(col_cont).astype(np.int64), spec.cols)
    row = np.floor(row_cont).astype(np.int64)
    in_bounds = (planar > 0) & (row >= 0) & (row < spec.rows)
    return _build_map(row, col, in_bounds, row_cont - 0.5, col_cont - 0.5, spec.rows, spec.cols, wrap_cols=True)


def _scatter_cells(features, flat, cell_lo, cell_hi, reduce):
    """Reduce the points whose cell lies in [cell_lo, cell_hi), visiting points in input order."""
    selected = (flat >= cell_lo) & (flat < cell_hi)
    local = flat[selected] - cell_lo
    chunk = features[selected]
    size = cell_hi - cell_lo
    counts = np.bincount(local, minlength=size)
    if reduce == 'max':
        values = np.full((size, features.shape[1]), -np.inf)
        np.maximum.at(values, local, chunk)
    else:
        values = np.zeros((size, features.shape[1]))
        np.add.at(values, local, chunk)
    return values, counts


def scatter(features: np.ndarray, index_map: GridIndexMap, rows: int, cols: int,
            reduce: str = DEFAULT_REDUCTION, threads: Optional[int] = None):
    """Reduce in-bounds point features into their cell; returns (C x rows x cols grid, occupancy mask).

    Work is split by cell range, never by point, so each cell is always reduced over its
    points in input order and the result does not depend on the thread count.
    """
    if reduce not in REDUCTIONS:
        raise InvalidInputError(f"reduce must be one of {REDUCTIONS}, got {reduce!r}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(index_map):
        raise ShapeError(f"features of shape {features.shape} do not match a map of {len(index_map)} points")
    if (rows, cols) != (index_map.rows, index_map.cols):
        raise ShapeError(f"grid {rows}x{cols} does not match the map's {index_map.rows}x{index_map.cols}")

    n_cells = rows * cols
    channels = features.shape[1]
    flat = index_map.flat_index[index_map.in_bounds]
    selected = features[index_map.in_bounds]

    workers = max(1, min(get_thread_count(threads), n_cells))
    bounds = np.linspace(0, n_cells, workers + 1).astype(np.int64)
    if workers == 1:
        parts = [_scatter_cells(selected, flat, 0, n_cells, reduce)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(
                lambda i: _scatter_cells(selected, flat, bounds[i], bounds[i + 1], reduce), range(workers)
            ))

    values = np.concatenate([p[0] for p in parts], axis=0)
    counts = np.concatenate([p[1] for p in parts])
    occupied = counts > 0
    if reduce == 'mean':
        values[occupied] /= counts[occupied][:, None]
    values[~occupied] = 0.0
    grid = values.T.reshape(channels, rows, cols)
    return grid, occupied.reshape(rows, cols)


def gather(grid: np.ndarray, index_map: GridIndexMap) -> np.ndarray:
    """Bilinear grid-to-point transfer using the map's stored weights."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[1:] != (index_map.rows, index_map.cols):
        raise ShapeError(f"grid of shape {grid.shape} does not match a {index_map.rows}x{index_map.cols} map")
    out = np.zeros((len(index_map), grid.shape[0]))
    for k in range(4):
        cells = grid[:, index_map.gather_rows[:, k], index_map.gather_cols[:, k]].T
        out += cells * index_map.gather_weights[:, k:k + 1]
    return out


def grid_specs_from_dict(document: dict, source: str = '<dict>') -> Tuple[BevSpec, RvSpec]:
    section = (document or {}).get('grids', {}) or {}
    preset = section.get('preset', 'nuscenes')
    if preset == 'nuscenes':
        bev = BevSpec.nuscenes()
    elif preset == 'semantickitti':
        bev = BevSpec.semantickitti()
    else:
        raise RigFormatError(f"{source}: unknown grid preset {preset!r}")
    bev_overrides = section.get('bev', {}) or {}
    rv_section = section.get('rv', {}) or {}
    try:
        if bev_overrides:
            bev = BevSpec(
                tuple(bev_overrides.get('x_range', bev.x_range)),
                tuple(bev_overrides.get('y_range', bev.y_range)),
                tuple(bev_overrides.get('z_range', bev.z_range)),
                int(bev_overrides.get('cells_x', bev.cells_x)),
                int(bev_overrides.get('cells_y', bev.cells_y)),
            )
        elevation_deg = rv_section.get('elevation_range_deg', DEFAULT_RV_ELEVATION_DEG)
        rv = RvSpec(
            int(rv_section.get('rows', 64)),
            int(rv_section.get('cols', 2048)),
            tuple(math.radians(float(a)) for a in elevation_deg),
        )
    except (TypeError, ValueError) as e:
        raise RigFormatError(f"{source}: malformed grids section: {e}") from e
    return bev, rv


def load_grid_specs(path) -> Tuple[BevSpec, RvSpec]:
    """Read the optional ``grids:`` section of a rig/config YAML file."""
    with open(path, 'r', encoding='utf-8') as handle:
        document = yaml.safe_load(handle) or {}
    return grid_specs_from_dict(document, str(path))
