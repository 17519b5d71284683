"""Calibration data model, rigid-transform algebra, projection and weak-calibration disturbances.

Conventions:
- Extrinsics map LiDAR coordinates to camera coordinates: X_cam = T @ X_lidar.
- Camera frame is right-handed with x right, y down, z forward.
- Rotations are right-handed and act on column vectors; the public API takes degrees.
- A weak calibration replaces T with T @ E where E = Ex @ Ey @ Ez (rotation only).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
import yaml

from .errors import InvalidInputError, RigFormatError, ShapeError
from .pointcloud import PointCloud

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9
DEPTH_EPSILON = 1e-6  # meters; points at or behind this depth never project
MAX_DISTURBANCE_DEG = 45.0
UINT64_MASK = 0xFFFFFFFFFFFFFFFF

# Symmetric angle-noise bound (degrees) of each weak-calibration level.
LEVEL_RANGES: Dict[int, float] = {0: 0.0, 1: 1.0, 2: 2.0, 3: 4.0}


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """3x4 projective matrix [[fx, 0, cx, 0], [0, fy, cy, 0], [0, 0, 1, 0]] in pixels."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.shape != (3, 4):
            raise InvalidInputError(f"intrinsics must be 3x4, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise InvalidInputError("intrinsics must be finite")
        if not (matrix[0, 0] > 0 and matrix[1, 1] > 0):
            raise InvalidInputError(f"focal lengths must be positive, got fx={matrix[0, 0]}, fy={matrix[1, 1]}")
        if not np.array_equal(matrix[2], [0.0, 0.0, 1.0, 0.0]):
            raise InvalidInputError(f"intrinsics bottom row must be (0, 0, 1, 0), got {matrix[2].tolist()}")
        object.__setattr__(self, 'matrix', _readonly(matrix))

    @classmethod
    def from_pinhole(cls, fx: float, fy: float, cx: float, cy: float) -> 'CameraIntrinsics':
        return cls(np.array([[fx, 0.0, cx, 0.0], [0.0, fy, cy, 0.0], [0.0, 0.0, 1.0, 0.0]]))

    @property
    def fx(self) -> float:
        return float(self.matrix[0, 0])

    @property
    def fy(self) -> float:
        return float(self.matrix[1, 1])

    @property
    def cx(self) -> float:
        return float(self.matrix[0, 2])

    @property
    def cy(self) -> float:
        return float(self.matrix[1, 2])


def _check_rotation(rotation: np.ndarray, what: str) -> None:
    gram = rotation.T @ rotation
    if np.max(np.abs(gram - np.eye(3))) > ORTHONORMAL_TOL:
        raise InvalidInputError(f"{what} rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
        raise InvalidInputError(f"{what} rotation determinant must be 1")


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """Rigid LiDAR-to-camera transform stored as a 4x4 homogeneous matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise InvalidInputError(f"extrinsics must be 4x4, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise InvalidInputError("extrinsics must be finite")
        if not np.array_equal(matrix[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidInputError(f"extrinsics bottom row must be (0, 0, 0, 1), got {matrix[3].tolist()}")
        _check_rotation(matrix[:3, :3], 'extrinsic')
        object.__setattr__(self, 'matrix', _readonly(matrix))

    @classmethod
    def from_rotation_translation(cls, rotation, translation) -> 'Extrinsics':
        matrix = np.eye(4)
        matrix[:3, :3] = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        matrix[:3, 3] = np.asarray(translation, dtype=np.float64).reshape(3)
        return cls(matrix)

    @classmethod
    def identity(cls) -> 'Extrinsics':
        return cls(np.eye(4))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def compose(self, other: Union['Extrinsics', np.ndarray]) -> 'Extrinsics':
        """self @ other."""
        other_matrix = other.matrix if isinstance(other, Extrinsics) else np.asarray(other, dtype=np.float64)
        return Extrinsics(self.matrix @ other_matrix)

    def inverse(self) -> 'Extrinsics':
        rotation_t = self.rotation.T
        return Extrinsics.from_rotation_translation(rotation_t, -rotation_t @ self.translation)


@dataclass(frozen=True, eq=False)
class CameraSpec:
    intrinsics: CameraIntrinsics
    extrinsics: Extrinsics
    width: int
    height: int
    name: str = ''

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidInputError(f"image dimensions must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, 'width', int(self.width))
        object.__setattr__(self, 'height', int(self.height))

    def with_extrinsics(self, extrinsics: Extrinsics) -> 'CameraSpec':
        return CameraSpec(self.intrinsics, extrinsics, self.width, self.height, self.name)


@dataclass(frozen=True, eq=False)
class CalibrationRig:
    """Ordered cameras (M >= 1) sharing one LiDAR."""

    cameras: tuple

    def __post_init__(self):
        cameras = tuple(self.cameras)
        if not cameras:
            raise InvalidInputError("a calibration rig needs at least one camera")
        for camera in cameras:
            if not isinstance(camera, CameraSpec):
                raise InvalidInputError(f"rig entries must be CameraSpec, got {type(camera).__name__}")
        object.__setattr__(self, 'cameras', cameras)

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, index: int) -> CameraSpec:
        return self.cameras[index]

    @property
    def m(self) -> int:
        return len(self.cameras)

    def with_extrinsics(self, extrinsics: Sequence[Extrinsics]) -> 'CalibrationRig':
        if len(extrinsics) != self.m:
            raise ShapeError(f"{len(extrinsics)} extrinsics for {self.m} cameras")
        return CalibrationRig(tuple(cam.with_extrinsics(ext) for cam, ext in zip(self.cameras, extrinsics)))

    def perturbed(self, level, rng_seed: int, frame_id: int) -> 'CalibrationRig':
        """Apply an independently sampled disturbance to every camera; level 0 returns ``self``."""
        level = PerturbationLevel.coerce(level)
        if level.range == 0.0:
            return self
        extrinsics = [
            perturb_extrinsics(cam.extrinsics, sample_disturbance(level, rng_seed, frame_id, camera_id))
            for camera_id, cam in enumerate(self.cameras)
        ]
        return self.with_extrinsics(extrinsics)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Rotation angles (degrees) about the X, Y and Z axes."""

    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    def __post_init__(self):
        for axis in ('rx', 'ry', 'rz'):
            value = float(getattr(self, axis))
            if not math.isfinite(value):
                raise InvalidInputError(f"disturbance angle {axis} must be finite, got {value}")
            object.__setattr__(self, axis, value)

    def as_tuple(self):
        return (self.rx, self.ry, self.rz)

    def require_within(self, limit: float = MAX_DISTURBANCE_DEG) -> 'DisturbanceSpec':
        """Sanity bound for weak-calibration draws; any finite angle composes."""
        for axis, value in zip(('rx', 'ry', 'rz'), self.as_tuple()):
            if abs(value) > limit:
                raise InvalidInputError(f"disturbance angle {axis}={value} exceeds {limit} degrees")
        return self


@dataclass(frozen=True)
class PerturbationLevel:
    level: int

    def __post_init__(self):
        if isinstance(self.level, bool) or int(self.level) != self.level or int(self.level) not in LEVEL_RANGES:
            raise InvalidInputError(f"perturbation level must be one of {sorted(LEVEL_RANGES)}, got {self.level}")
        object.__setattr__(self, 'level', int(self.level))

    @property
    def range(self) -> float:
        return LEVEL_RANGES[self.level]

    @classmethod
    def coerce(cls, value) -> 'PerturbationLevel':
        return value if isinstance(value, PerturbationLevel) else cls(value)


class PixelProjection(NamedTuple):
    u: float
    v: float
    depth: float
    valid: bool


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    """Projections of N points, index-aligned with the input cloud."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return int(self.u.shape[0])

    def __getitem__(self, index: int) -> PixelProjection:
        return PixelProjection(float(self.u[index]), float(self.v[index]), float(self.depth[index]), bool(self.valid[index]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def to_list(self) -> List[PixelProjection]:
        return list(self)

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({
            'index': np.arange(len(self)),
            'u': self.u,
            'v': self.v,
            'depth': self.depth,
            'valid': self.valid,
        })


def _rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compose_disturbance(spec: DisturbanceSpec) -> np.ndarray:
    """E = Ex @ Ey @ Ez as a 4x4 homogeneous matrix with zero translation."""
    angles = [spec.rx, spec.ry, spec.rz]
    if not all(math.isfinite(a) for a in angles):
        raise InvalidInputError(f"disturbance angles must be finite, got {angles}")
    rx, ry, rz = (math.radians(a) for a in angles)
    disturbance = np.eye(4)
    disturbance[:3, :3] = _rot_x(rx) @ _rot_y(ry) @ _rot_z(rz)
    return disturbance


def perturb_extrinsics(t: Extrinsics, spec: DisturbanceSpec) -> Extrinsics:
    """T @ E; the translation column of T is left untouched."""
    return Extrinsics(t.matrix @ compose_disturbance(spec))


def sample_disturbance(level, rng_seed: int, frame_id: int, camera_id: int) -> DisturbanceSpec:
    """Draw rx, ry, rz uniformly from [-range, +range] for one (frame, camera).

    The draw is a pure function of (seed, frame_id, camera_id) through PCG64 seeded by a
    SeedSequence; the level only scales it, so the four levels are nested. Negative ids
    are folded into uint64 the same way the seed is.
    """
    level = PerturbationLevel.coerce(level)
    if level.range == 0.0:
        return DisturbanceSpec(0.0, 0.0, 0.0)
    entropy = [int(value) & UINT64_MASK for value in (rng_seed, frame_id, camera_id)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
    unit = rng.uniform(-1.0, 1.0, size=3)
    rx, ry, rz = (float(a) * level.range for a in unit)
    return DisturbanceSpec(rx, ry, rz).require_within()


def _as_xyz(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.require_nonempty().xyz
    xyz = np.asarray(points, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3 or xyz.shape[0] < 1:
        raise ShapeError(f"points must be a non-empty (N, 3) array, got {xyz.shape}")
    return xyz


def project_points(points, intr: CameraIntrinsics, extr: Extrinsics, width: int, height: int) -> ProjectionResult:
    """lambda [u v 1]^T = I T [x y z 1]^T for every point; invalid points are flagged, not dropped."""
    xyz = _as_xyz(points)
    projection = intr.matrix @ extr.matrix
    homogeneous = xyz @ projection[:, :3].T + projection[:, 3]
    depth = xyz @ extr.matrix[2, :3] + extr.matrix[2, 3]
    with np.errstate(divide='ignore', invalid='ignore'):
        u = homogeneous[:, 0] / homogeneous[:, 2]
        v = homogeneous[:, 1] / homogeneous[:, 2]
    valid = (depth > DEPTH_EPSILON) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    return ProjectionResult(u, v, depth, valid)


def project_camera(points, rig: CalibrationRig, camera_id: int) -> ProjectionResult:
    camera = rig[camera_id]
    return project_points(points, camera.intrinsics, camera.extrinsics, camera.width, camera.height)


def project_rig(points, rig: CalibrationRig) -> List[ProjectionResult]:
    return [project_camera(points, rig, camera_id) for camera_id in range(rig.m)]


def _floats(values: Iterable[float]) -> List[float]:
    return [float(v) for v in values]


def rig_to_dict(rig: CalibrationRig) -> dict:
    return {
        'cameras': [
            {
                'name': cam.name,
                'intrinsics': _floats(cam.intrinsics.matrix.reshape(-1)),
                'extrinsics': _floats(cam.extrinsics.matrix.reshape(-1)),
                'width': cam.width,
                'height': cam.height,
            }
            for cam in rig.cameras
        ]
    }


def rig_from_dict(document: dict, source: str = '<dict>') -> CalibrationRig:
    if not isinstance(document, dict) or not isinstance(document.get('cameras'), list):
        raise RigFormatError(f"{source}: expected a mapping with a 'cameras' list")
    cameras = []
    for index, block in enumerate(document['cameras']):
        try:
            intrinsics = np.array([float(x) for x in block['intrinsics']])
            extrinsics = np.array([float(x) for x in block['extrinsics']])
            if intrinsics.size != 12 or extrinsics.size != 16:
                raise RigFormatError(
                    f"{source}: camera {index} needs 12 intrinsics and 16 extrinsics values, "
                    f"got {intrinsics.size} and {extrinsics.size}"
                )
            cameras.append(CameraSpec(
                CameraIntrinsics(intrinsics.reshape(3, 4)),
                Extrinsics(extrinsics.reshape(4, 4)),
                int(block['width']),
                int(block['height']),
                str(block.get('name', f'camera_{index}')),
            ))
        except (KeyError, TypeError) as e:
            raise RigFormatError(f"{source}: camera {index} is missing or has a malformed field: {e}") from e
    return CalibrationRig(tuple(cameras))


def load_rig(path) -> CalibrationRig:
    """Read a YAML rig file (per-camera intrinsics, extrinsics, width, height)."""
    with open(path, 'r', encoding='utf-8') as handle:
        try:
            document = yaml.safe_load(handle)
        except yaml.YAMLError as e:
            raise RigFormatError(f"{path}: invalid YAML: {e}") from e
    rig = rig_from_dict(document, str(path))
    logger.debug(f"Loaded rig with {rig.m} cameras from {path}")
    return rig


def save_rig(rig: CalibrationRig, path, extra: Optional[dict] = None) -> Path:
    """Write the rig as YAML; floats use shortest round-trip repr so reloading is exact."""
    document = rig_to_dict(rig)
    if extra:
        document.update(extra)
    path = Path(path)
    with open(path, 'w', encoding='utf-8') as handle:
        yaml.safe_dump(document, handle, sort_keys=False, default_flow_style=None)
    return path
