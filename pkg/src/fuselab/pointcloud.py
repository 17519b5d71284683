"""Point-cloud container, labels, the FLPC file format and training-time augmentation."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import (
    CountMismatchError,
    InvalidInputError,
    LabelRangeError,
    MalformedHeaderError,
    ShapeError,
    TruncatedPayloadError,
)

logger = logging.getLogger(__name__)

# FLPC layout: magic, version u16, point count u64, flags u16, then records.
CLOUD_MAGIC = b'FLPC'
CLOUD_VERSION = 1
CLOUD_HEADER = struct.Struct('<4sHQH')
FLAG_LABELS = 0x1
FLAG_INTENSITY = 0x2
KNOWN_FLAGS = FLAG_LABELS | FLAG_INTENSITY
MAX_LABEL_CLASSES = 0xFFFF + 1

PathLike = Union[str, Path]


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with xyz coordinates (meters) and reflection intensity in [0, 1]."""

    xyz: np.ndarray
    intensity: Optional[np.ndarray] = None
    has_intensity: bool = field(default=True, compare=False)

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ShapeError(f"xyz must have shape (N, 3), got {xyz.shape}")
        if not np.all(np.isfinite(xyz)):
            raise InvalidInputError("point coordinates must be finite")
        if self.intensity is None:
            intensity = np.zeros(len(xyz), dtype=np.float64)
            object.__setattr__(self, 'has_intensity', False)
        else:
            intensity = np.array(self.intensity, dtype=np.float64).reshape(-1)
            if intensity.shape[0] != xyz.shape[0]:
                raise ShapeError(f"intensity has {intensity.shape[0]} entries for {xyz.shape[0]} points")
            if not np.all(np.isfinite(intensity)):
                raise InvalidInputError("intensity must be finite")
            if intensity.size and (intensity.min() < 0.0 or intensity.max() > 1.0):
                raise InvalidInputError(
                    f"intensity must lie in [0, 1], got range [{intensity.min()}, {intensity.max()}]"
                )
        object.__setattr__(self, 'xyz', _readonly(xyz))
        object.__setattr__(self, 'intensity', _readonly(intensity))

    @property
    def n(self) -> int:
        return int(self.xyz.shape[0])

    def __len__(self) -> int:
        return self.n

    def require_nonempty(self) -> 'PointCloud':
        if self.n < 1:
            raise InvalidInputError("operation requires a non-empty point cloud")
        return self

    def with_xyz(self, xyz: np.ndarray) -> 'PointCloud':
        return PointCloud(xyz, self.intensity if self.has_intensity else None)

    def features(self) -> np.ndarray:
        """The raw N x 4 (x, y, z, intensity) matrix."""
        return np.column_stack([self.xyz, self.intensity])


@dataclass(frozen=True, eq=False)
class LabelArray:
    """Per-point class ids in [0, n_cls)."""

    labels: np.ndarray
    n_cls: int

    def __post_init__(self):
        labels = np.array(self.labels).reshape(-1)
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise InvalidInputError("labels must be integers")
        labels = labels.astype(np.int64)
        if self.n_cls < 1:
            raise InvalidInputError(f"n_cls must be >= 1, got {self.n_cls}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_cls):
            raise LabelRangeError(
                f"labels must lie in [0, {self.n_cls}), got range [{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, 'labels', _readonly(labels))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def check_matches(self, cloud: PointCloud) -> None:
        if len(self) != cloud.n:
            raise CountMismatchError(f"{len(self)} labels for {cloud.n} points")


def as_label_array(labels, n_cls: Optional[int] = None) -> LabelArray:
    if isinstance(labels, LabelArray):
        return labels
    values = np.asarray(labels, dtype=np.int64).reshape(-1)
    if n_cls is None:
        n_cls = int(values.max()) + 1 if values.size else 1
    return LabelArray(values, n_cls)


def save_cloud(cloud: PointCloud, labels: Optional[LabelArray], path: PathLike) -> Path:
    """Write ``cloud`` (and optional labels) in the FLPC binary format."""
    path = Path(path)
    flags = 0
    columns = [cloud.xyz]
    if cloud.has_intensity:
        flags |= FLAG_INTENSITY
        columns.append(cloud.intensity[:, None])
    if labels is not None:
        labels.check_matches(cloud)
        if labels.n_cls > MAX_LABEL_CLASSES:
            raise LabelRangeError(f"FLPC stores labels as u16; n_cls={labels.n_cls} is too large")
        flags |= FLAG_LABELS
    records = np.ascontiguousarray(np.hstack(columns), dtype='<f4')
    with open(path, 'wb') as handle:
        handle.write(CLOUD_HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, cloud.n, flags))
        handle.write(records.tobytes())
        if labels is not None:
            handle.write(labels.labels.astype('<u2').tobytes())
    logger.debug(f"Wrote {cloud.n} points to {path}")
    return path


def load_cloud(path: PathLike, n_cls: Optional[int] = None) -> Tuple[PointCloud, Optional[LabelArray]]:
    """Read an FLPC file; labels are validated against ``n_cls`` when given."""
    data = Path(path).read_bytes()
    if len(data) < CLOUD_HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {CLOUD_HEADER.size}-byte header")
    magic, version, count, flags = CLOUD_HEADER.unpack_from(data)
    if magic != CLOUD_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != CLOUD_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    if flags & ~KNOWN_FLAGS:
        raise MalformedHeaderError(f"{path}: unknown flag bits 0x{flags:04x}")

    width = 4 if flags & FLAG_INTENSITY else 3
    record_bytes = count * width * 4
    label_bytes = count * 2 if flags & FLAG_LABELS else 0
    payload = len(data) - CLOUD_HEADER.size
    if payload < record_bytes + label_bytes:
        raise TruncatedPayloadError(
            f"{path}: header declares {count} points but only {payload} payload bytes follow"
        )
    if payload > record_bytes + label_bytes:
        raise CountMismatchError(
            f"{path}: {payload - record_bytes - label_bytes} trailing bytes after {count} records"
        )

    offset = CLOUD_HEADER.size
    records = np.frombuffer(data, dtype='<f4', count=count * width, offset=offset).reshape(count, width)
    offset += record_bytes
    cloud = PointCloud(
        records[:, :3].astype(np.float64),
        records[:, 3].astype(np.float64) if width == 4 else None,
    )
    labels = None
    if flags & FLAG_LABELS:
        raw = np.frombuffer(data, dtype='<u2', count=count, offset=offset).astype(np.int64)
        labels = as_label_array(raw, n_cls)
    return cloud, labels


@dataclass(frozen=True)
class AugmentationConfig:
    """Global geometric augmentation applied to whole clouds during training."""

    flip_x: bool = True
    flip_y: bool = True
    scale_range: Tuple[float, float] = (0.95, 1.05)
    rotate_z: bool = True
    jitter_sigma: float = 0.02

    def __post_init__(self):
        lo, hi = (float(v) for v in self.scale_range)
        if not (math.isfinite(lo) and math.isfinite(hi)) or not 0 < lo <= hi:
            raise InvalidInputError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not math.isfinite(self.jitter_sigma) or self.jitter_sigma < 0:
            raise InvalidInputError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        object.__setattr__(self, 'scale_range', (lo, hi))

    @classmethod
    def training_default(cls) -> 'AugmentationConfig':
        return cls()

    @classmethod
    def disabled(cls) -> 'AugmentationConfig':
        return cls(flip_x=False, flip_y=False, scale_range=(1.0, 1.0), rotate_z=False, jitter_sigma=0.0)


def augment(cloud: PointCloud, cfg: AugmentationConfig, rng_seed: int) -> Tuple[PointCloud, np.ndarray]:
    """Flip, scale, rotate about Z, then jitter; returns the cloud and the 4x4 non-noise transform.

    Random draws come from numpy's PCG64 generator seeded with ``rng_seed`` and are
    taken in a fixed order whether or not a step is enabled, so toggling one step
    does not reshuffle the others.
    """
    cloud.require_nonempty()
    rng = np.random.Generator(np.random.PCG64(int(rng_seed) & 0xFFFFFFFFFFFFFFFF))

    flip_draws = rng.random(2)
    scale_draw = rng.uniform(*cfg.scale_range)
    angle_draw = rng.uniform(0.0, 2.0 * math.pi)

    flips = np.diag([
        -1.0 if cfg.flip_x and flip_draws[0] < 0.5 else 1.0,
        -1.0 if cfg.flip_y and flip_draws[1] < 0.5 else 1.0,
        1.0,
    ])
    scale = scale_draw if cfg.scale_range[0] != cfg.scale_range[1] else cfg.scale_range[0]
    angle = angle_draw if cfg.rotate_z else 0.0
    c, s = math.cos(angle), math.sin(angle)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    linear = rotation @ (scale * flips)
    xyz = cloud.xyz @ linear.T
    if cfg.jitter_sigma > 0:
        xyz = xyz + rng.normal(0.0, cfg.jitter_sigma, size=xyz.shape)

    transform = np.eye(4)
    transform[:3, :3] = linear
    return cloud.with_xyz(xyz), transform


def invert_transform(transform: np.ndarray) -> np.ndarray:
    """Inverse of an augmentation transform (maps augmented xyz back to the sensor frame)."""
    transform = np.asarray(transform, dtype=np.float64)
    if transform.shape != (4, 4):
        raise ShapeError(f"transform must be 4x4, got {transform.shape}")
    return np.linalg.inv(transform)
