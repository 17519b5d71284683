"""Projection overlays: class-colored dots over a checkerboard or a feature-map channel, written as binary PPM."""
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .calib import CalibrationRig, PerturbationLevel, project_camera
from .errors import InvalidInputError
from .fusion import FeatureMap
from .pointcloud import LabelArray, PointCloud

logger = logging.getLogger(__name__)

PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+255\s")
CHECKER_SIZE = 32
CHECKER_SHADES = (96, 160)
DEFAULT_DOT_RADIUS = 1
UNLABELED_COLOR = (255, 255, 255)
PALETTE = np.array([
    (0, 200, 0),
    (230, 30, 30),
    (40, 80, 240),
    (240, 200, 0),
    (200, 0, 200),
    (0, 200, 200),
    (255, 128, 0),
    (128, 128, 128),
], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class Overlay:
    pixels: np.ndarray  # H x W x 3 uint8
    dots: np.ndarray  # K x 2 integer (u, v) pixel per drawn point
    point_index: np.ndarray  # K indices into the cloud

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


def checkerboard(width: int, height: int, size: int = CHECKER_SIZE) -> np.ndarray:
    rows = (np.arange(height) // size)[:, None]
    cols = (np.arange(width) // size)[None, :]
    shade = np.where((rows + cols) % 2 == 0, CHECKER_SHADES[0], CHECKER_SHADES[1]).astype(np.uint8)
    return np.repeat(shade[:, :, None], 3, axis=2)


def feature_background(feature_map: FeatureMap, width: int, height: int) -> np.ndarray:
    """First channel upsampled by the map stride and stretched to 0..255 gray."""
    channel = np.asarray(feature_map.data[0])
    lo, hi = float(channel.min()), float(channel.max())
    scaled = np.zeros_like(channel) if hi <= lo else (channel - lo) / (hi - lo)
    image = np.kron(scaled, np.ones((feature_map.stride, feature_map.stride)))[:height, :width]
    gray = np.round(image * 255.0).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def render_overlay(cloud: PointCloud, rig: CalibrationRig, camera_id: int, labels: Optional[LabelArray] = None,
                   level=0, seed: int = 0, frame_id: int = 0, feature_map: Optional[FeatureMap] = None,
                   dot_radius: int = DEFAULT_DOT_RADIUS) -> Overlay:
    """Project through ``camera_id`` of the rig perturbed at ``level``; points outside the image are not drawn."""
    if not 0 <= camera_id < rig.m:
        raise InvalidInputError(f"camera {camera_id} not in a rig of {rig.m} cameras")
    if dot_radius < 0:
        raise InvalidInputError(f"dot radius must be >= 0, got {dot_radius}")
    level = PerturbationLevel.coerce(level)
    view_rig = rig.perturbed(level, seed, frame_id)
    camera = view_rig[camera_id]
    if feature_map is None:
        pixels = checkerboard(camera.width, camera.height)
    else:
        pixels = feature_background(feature_map, camera.width, camera.height)

    projection = project_camera(cloud, view_rig, camera_id)
    index = np.flatnonzero(projection.valid)
    # Far points first so nearer dots end up on top.
    index = index[np.argsort(-projection.depth[index], kind='stable')]
    u = np.floor(projection.u[index]).astype(np.int64)
    v = np.floor(projection.v[index]).astype(np.int64)
    if labels is None:
        colors = np.tile(np.array(UNLABELED_COLOR, dtype=np.uint8), (index.size, 1))
    else:
        colors = PALETTE[labels.labels[index] % len(PALETTE)]

    for du in range(-dot_radius, dot_radius + 1):
        for dv in range(-dot_radius, dot_radius + 1):
            uu = u + du
            vv = v + dv
            inside = (uu >= 0) & (uu < camera.width) & (vv >= 0) & (vv < camera.height)
            pixels[vv[inside], uu[inside]] = colors[inside]

    logger.info(f"Overlay camera {camera_id} at level {level.level}: {index.size} of {cloud.n} points drawn")
    return Overlay(pixels, np.column_stack([u, v]), index)


def write_ppm(pixels: np.ndarray, path) -> Path:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InvalidInputError(f"PPM pixels must be H x W x 3, got {pixels.shape}")
    path = Path(path)
    with open(path, 'wb') as handle:
        handle.write(f"P6\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode('ascii'))
        handle.write(pixels.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = PPM_HEADER.match(data)
    if header is None:
        raise InvalidInputError(f"{path}: not a binary 8-bit PPM file")
    width, height = int(header.group(1)), int(header.group(2))
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=header.end())
    return pixels.reshape(height, width, 3)
