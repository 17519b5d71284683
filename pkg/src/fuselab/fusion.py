"""Bilinear sampling of camera feature maps at projected points and multi-camera fusion."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .calib import CalibrationRig, ProjectionResult, project_rig
from .errors import InvalidInputError, MalformedHeaderError, ShapeError, TruncatedPayloadError, CountMismatchError
from .pointcloud import PointCloud

logger = logging.getLogger(__name__)

DEFAULT_STRIDE = 8
# Rows per gather in sample_points; keeps the scratch buffers cache sized.
SAMPLE_CHUNK = 4096
# Zero border around a map: one cell before, two after, so both corners of any clipped coordinate exist.
PAD_AFTER = 2

# FLFM layout: magic, version u16, camera_id u16, C2 u16, H1 u32, W1 u32, stride u16, f32 data.
MAP_MAGIC = b'FLFM'
MAP_VERSION = 1
MAP_HEADER = struct.Struct('<4sHHHIIH')


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """C2 x H1 x W1 camera features; map coordinates are image pixels divided by ``stride``."""

    camera_id: int
    data: np.ndarray
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeError(f"feature map must be C2 x H1 x W1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError(f"feature map of camera {self.camera_id} has non-finite entries")
        if int(self.stride) < 1:
            raise InvalidInputError(f"stride must be >= 1, got {self.stride}")
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'stride', int(self.stride))
        object.__setattr__(self, 'camera_id', int(self.camera_id))

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @cached_property
    def padded_rows(self) -> np.ndarray:
        """((H1 + 3) * (W1 + 3), C2) zero-bordered copy used for row gathers."""
        padded = np.pad(self.data, ((0, 0), (1, PAD_AFTER), (1, PAD_AFTER)))
        return np.ascontiguousarray(padded.reshape(self.channels, -1).T)


@dataclass(frozen=True, eq=False)
class FusedPointFeatures:
    """N x (C1 + M * C2) image-augmented point features, point features first."""

    data: np.ndarray
    point_dims: int

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def dims(self) -> int:
        return int(self.data.shape[1])

    @property
    def point_features(self) -> np.ndarray:
        return self.data[:, :self.point_dims]

    @property
    def camera_features(self) -> np.ndarray:
        return self.data[:, self.point_dims:]


def check_maps_against_rig(maps: Sequence[FeatureMap], rig: CalibrationRig) -> None:
    if len(maps) != rig.m:
        raise ShapeError(f"{len(maps)} feature maps for {rig.m} cameras")
    for camera_id, (feature_map, camera) in enumerate(zip(maps, rig.cameras)):
        if feature_map.height * feature_map.stride != camera.height or feature_map.width * feature_map.stride != camera.width:
            raise ShapeError(
                f"camera {camera_id}: map {feature_map.height}x{feature_map.width} at stride {feature_map.stride} "
                f"does not cover the {camera.height}x{camera.width} image"
            )


def _bilinear_blocks(feature_map: FeatureMap, u: np.ndarray, v: np.ndarray) -> Iterator[Tuple[int, int, np.ndarray]]:
    """Yield (start, stop, samples) per chunk; ``samples`` is a reused buffer, copy it before the next step."""
    # Coordinates past the border only touch the zero padding of ``padded_rows``.
    u = np.clip(u, -1.0, float(feature_map.width))
    v = np.clip(v, -1.0, float(feature_map.height))
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = u - x0
    fy = v - y0
    pitch = feature_map.width + PAD_AFTER + 1
    base = (y0.astype(np.intp) + 1) * pitch + (x0.astype(np.intp) + 1)
    corners = (
        (0, (1.0 - fx) * (1.0 - fy)),
        (1, fx * (1.0 - fy)),
        (pitch, (1.0 - fx) * fy),
        (pitch + 1, fx * fy),
    )

    rows = feature_map.padded_rows
    size = min(SAMPLE_CHUNK, u.shape[0])
    block = np.empty((size, feature_map.channels), dtype=np.float64)
    scratch = np.empty_like(block)
    for start in range(0, u.shape[0], SAMPLE_CHUNK):
        stop = min(start + SAMPLE_CHUNK, u.shape[0])
        samples = block[:stop - start]
        buffer = scratch[:stop - start]
        chunk_base = base[start:stop]
        for corner, (offset, weight) in enumerate(corners):
            target = samples if corner == 0 else buffer
            np.take(rows, chunk_base + offset, axis=0, out=target, mode='clip')
            target *= weight[start:stop, None]
            if corner:
                samples += buffer
        yield start, stop, samples


def _checked_coordinates(u, v) -> Tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"u and v differ in length: {u.shape[0]} vs {v.shape[0]}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise InvalidInputError("sampling coordinates must be finite")
    return u, v


def sample_points(feature_map: FeatureMap, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling at map coordinates (u along width, v along height).

    Weights are (1 - |u - (floor(u) + p)|) * (1 - |v - (floor(v) + q)|) for p, q in {0, 1};
    neighbors outside the map contribute zero.
    """
    u, v = _checked_coordinates(u, v)
    out = np.empty((u.shape[0], feature_map.channels), dtype=np.float64)
    for start, stop, samples in _bilinear_blocks(feature_map, u, v):
        out[start:stop] = samples
    return out


def bilinear_sample(feature_map: FeatureMap, u: float, v: float) -> np.ndarray:
    """C2-vector sampled at one map coordinate."""
    if not (math.isfinite(u) and math.isfinite(v)):
        raise InvalidInputError(f"sampling coordinates must be finite, got ({u}, {v})")
    return sample_points(feature_map, np.array([u]), np.array([v]))[0]


def sample_all_cameras(maps: Sequence[FeatureMap], projections: Sequence[ProjectionResult]) -> np.ndarray:
    """N x (M * C2) camera features, camera blocks in rig order, zero where a projection is invalid."""
    if len(maps) != len(projections):
        raise ShapeError(f"{len(maps)} feature maps for {len(projections)} projection lists")
    if not maps:
        raise ShapeError("at least one camera is required")
    channels = {m.channels for m in maps}
    if len(channels) != 1:
        raise ShapeError(f"feature maps disagree on C2: {sorted(channels)}")
    counts = {len(p) for p in projections}
    if len(counts) != 1:
        raise ShapeError(f"projection lists disagree on N: {sorted(counts)}")
    c2 = channels.pop()
    n = counts.pop()

    out = np.zeros((n, len(maps), c2), dtype=np.float64)
    for camera_id, (feature_map, projection) in enumerate(zip(maps, projections)):
        index = np.flatnonzero(np.asarray(projection.valid, dtype=bool))
        if not index.size:
            continue
        scale = 1.0 / feature_map.stride
        u, v = _checked_coordinates(projection.u[index] * scale, projection.v[index] * scale)
        block = out[:, camera_id]
        # Scatter each chunk while it is still in cache.
        for start, stop, samples in _bilinear_blocks(feature_map, u, v):
            block[index[start:stop]] = samples
    return out.reshape(n, len(maps) * c2)


def fuse(point_features: np.ndarray, camera_features: np.ndarray) -> FusedPointFeatures:
    point_features = np.asarray(point_features, dtype=np.float64)
    camera_features = np.asarray(camera_features, dtype=np.float64)
    if point_features.ndim != 2 or camera_features.ndim != 2:
        raise ShapeError("point and camera features must be 2-D matrices")
    if point_features.shape[0] != camera_features.shape[0]:
        raise ShapeError(f"row mismatch: {point_features.shape[0]} point rows vs {camera_features.shape[0]} camera rows")
    return FusedPointFeatures(np.hstack([point_features, camera_features]), point_features.shape[1])


def image_augmented_features(cloud: PointCloud, rig: CalibrationRig, maps: Sequence[FeatureMap],
                             point_features: np.ndarray) -> FusedPointFeatures:
    """Project through every camera of ``rig``, sample ``maps`` and append to ``point_features``."""
    check_maps_against_rig(maps, rig)
    return fuse(point_features, sample_all_cameras(maps, project_rig(cloud, rig)))


def save_feature_map(feature_map: FeatureMap, path) -> Path:
    path = Path(path)
    header = MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, feature_map.camera_id, feature_map.channels,
                             feature_map.height, feature_map.width, feature_map.stride)
    with open(path, 'wb') as handle:
        handle.write(header)
        handle.write(np.ascontiguousarray(feature_map.data, dtype='<f4').tobytes())
    return path


def load_feature_map(path) -> FeatureMap:
    data = Path(path).read_bytes()
    if len(data) < MAP_HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {MAP_HEADER.size}-byte header")
    magic, version, camera_id, channels, height, width, stride = MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != MAP_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    expected = channels * height * width * 4
    payload = len(data) - MAP_HEADER.size
    if payload < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} payload bytes, found {payload}")
    if payload > expected:
        raise CountMismatchError(f"{path}: {payload - expected} trailing bytes")
    values = np.frombuffer(data, dtype='<f4', count=channels * height * width, offset=MAP_HEADER.size)
    return FeatureMap(camera_id, values.reshape(channels, height, width).astype(np.float64), stride)
