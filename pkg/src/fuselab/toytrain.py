"""Desk-scale training surrogate.

Synthetic scenes place red and blue poles over a ground plane. The two pole
classes overlap in LiDAR geometry and intensity, so telling them apart needs
the camera feature maps, which carry a class-coded pattern rendered through
the true rig. A per-point affine softmax classifier over the fused features is
then trained under three regimes:

* ``baseline``: true extrinsics, segmentation loss only.
* ``da``: extrinsics perturbed at ``train_level`` with fresh noise every epoch.
* ``kd``: the shared weights first train on well-calibrated features for a
  warm-up share of the epochs, so the teacher is a model trained on good
  calibration. Every later step runs those weights twice, on clean features
  (teacher, a constant) and on perturbed features (student), and descends the
  combined loss of the student. ``kd_segmentation_pass='teacher'`` is the
  opt-in variant that takes the segmentation term on the clean pass instead.
"""
from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .calib import (
    UINT64_MASK,
    CalibrationRig,
    CameraIntrinsics,
    CameraSpec,
    Extrinsics,
    PerturbationLevel,
    project_rig,
)
from .config import get_thread_count
from .errors import (
    CountMismatchError,
    InvalidInputError,
    MalformedHeaderError,
    SceneGenerationError,
    ShapeError,
    TrainingDivergedError,
    TruncatedPayloadError,
)
from .evaluation import ConfusionMatrix, Frame, accumulate, miou
from .fusion import FeatureMap, image_augmented_features
from .losses import LossConfig, class_weights_from_labels, kd_loss, segmentation_loss, total_loss
from .pointcloud import LabelArray, PointCloud

logger = logging.getLogger(__name__)

CLASS_NAMES = ('ground', 'pole_red', 'pole_blue')
N_CLASSES = len(CLASS_NAMES)

# Scene geometry (meters / degrees).
GROUND_Z = -1.7
GROUND_RANGE = (3.0, 35.0)
GROUND_POINTS = (2000, 2600)
GROUND_IN_VIEW_FRACTION = 0.8
POLES_PER_CAMERA = (8, 12)
POLE_AZIMUTH_DEG = 30.0
POLE_RANGE = (10.0, 25.0)
POLE_RADIUS = (0.10, 0.15)
POLE_POINTS = (160, 260)
POLE_HEIGHT = {1: (2.2, 3.2), 2: (1.3, 2.5)}
INTENSITY_MEAN = (0.2, 0.6, 0.4)
INTENSITY_SIGMA = (0.08, 0.15, 0.15)

# Camera rig.
IMAGE_WIDTH = 640
IMAGE_HEIGHT = 320
FOCAL_PX = 400.0
HALF_FOV_DEG = 38.0
CAMERA_YAW_STEP_DEG = 90.0
CAMERA_FORWARD_OFFSET = 0.3
CAMERA_HEIGHT = 0.2
DEFAULT_CAMERAS = 2
SCENE_STRIDE = 2

# Feature maps: one-hot class channels plus a brightness channel.
CAMERA_CHANNELS = N_CLASSES + 1
PATTERN_BRIGHTNESS = (0.3, 0.6, 0.6)
FEATURE_NOISE_SIGMA = 0.05

# Point features: normalised height above ground, intensity, normalised planar range.
POINT_FEATURE_DIMS = 3
HEIGHT_SCALE = 3.0
RANGE_SCALE = 40.0

FUSED_MIOU_FLOOR = 0.9
LIDAR_MIOU_CEILING = 0.75
MAX_SCENE_ATTEMPTS = 20

STRATEGIES = ('baseline', 'da', 'kd')
SEGMENTATION_PASSES = ('student', 'teacher')
DEFAULT_SEGMENTATION_PASS = 'student'
DEFAULT_STRATEGY = 'baseline'
DEFAULT_TRAIN_LEVEL = 3
DEFAULT_EPOCHS = 200
DEFAULT_LEARNING_RATE = 0.5
# Share of kd epochs spent training the shared weights on well-calibrated features before distilling.
DEFAULT_KD_WARMUP_FRACTION = 0.25
TRAIN_NOISE_STREAM = 1
LOG_EVERY_EPOCHS = 50

# FLMD layout: magic, version u16, C1 u16, M u16, C2 u16, n_cls u16, rows u32, cols u32, f32 weights.
MODEL_MAGIC = b'FLMD'
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct('<4sHHHHHII')


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(e) & UINT64_MASK for e in entropy])))


def derive_scene_seeds(seed: int, count: int) -> List[int]:
    """``count`` independent 64-bit scene seeds derived from one run seed."""
    if count < 1:
        raise InvalidInputError(f"scene count must be >= 1, got {count}")
    state = np.random.SeedSequence(int(seed) & UINT64_MASK).generate_state(count, dtype=np.uint64)
    return [int(s) for s in state]


def toy_rig(n_cameras: int = DEFAULT_CAMERAS) -> CalibrationRig:
    """Forward-looking pinhole cameras, camera k yawed by k * 90 degrees."""
    if n_cameras not in (1, 2):
        raise InvalidInputError(f"toy scenes support 1 or 2 cameras, got {n_cameras}")
    intrinsics = CameraIntrinsics.from_pinhole(FOCAL_PX, FOCAL_PX, IMAGE_WIDTH / 2.0, IMAGE_HEIGHT / 2.0)
    cameras = []
    for k in range(n_cameras):
        yaw = math.radians(k * CAMERA_YAW_STEP_DEG)
        s, c = math.sin(yaw), math.cos(yaw)
        # Camera axes: x right, y down, z along the heading.
        rotation = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        centre = np.array([CAMERA_FORWARD_OFFSET * c, CAMERA_FORWARD_OFFSET * s, CAMERA_HEIGHT])
        extrinsics = Extrinsics.from_rotation_translation(rotation, -rotation @ centre)
        cameras.append(CameraSpec(intrinsics, extrinsics, IMAGE_WIDTH, IMAGE_HEIGHT, f'cam_{k}'))
    return CalibrationRig(tuple(cameras))


def class_patterns() -> np.ndarray:
    """N_cls x C2 camera feature pattern per class."""
    patterns = np.zeros((N_CLASSES, CAMERA_CHANNELS))
    patterns[np.arange(N_CLASSES), np.arange(N_CLASSES)] = 1.0
    patterns[:, -1] = PATTERN_BRIGHTNESS
    return patterns


def point_features(cloud: PointCloud) -> np.ndarray:
    xyz = cloud.xyz
    return np.column_stack([
        (xyz[:, 2] - GROUND_Z) / HEIGHT_SCALE,
        cloud.intensity,
        np.hypot(xyz[:, 0], xyz[:, 1]) / RANGE_SCALE,
    ])


def _intensity(rng: np.random.Generator, cls: int, n: int) -> np.ndarray:
    return np.clip(rng.normal(INTENSITY_MEAN[cls], INTENSITY_SIGMA[cls], n), 0.0, 1.0)


@dataclass(frozen=True)
class Pole:
    cls: int
    azimuth: float  # radians, seen from the sensor origin
    distance: float
    radius: float
    height: float

    @property
    def half_width(self) -> float:
        return math.asin(min(1.0, self.radius / self.distance))


def _sample_poles(rng: np.random.Generator, n_cameras: int) -> List[Pole]:
    poles = []
    for k in range(n_cameras):
        n_poles = int(rng.integers(POLES_PER_CAMERA[0], POLES_PER_CAMERA[1] + 1))
        edges = np.linspace(-POLE_AZIMUTH_DEG, POLE_AZIMUTH_DEG, n_poles + 1)
        first_class = int(rng.integers(1, N_CLASSES))
        for j in range(n_poles):
            cls = 1 + (first_class - 1 + j) % 2
            poles.append(Pole(
                cls=cls,
                azimuth=math.radians(k * CAMERA_YAW_STEP_DEG + rng.uniform(edges[j] + 0.5, edges[j + 1] - 0.5)),
                distance=float(rng.uniform(*POLE_RANGE)),
                radius=float(rng.uniform(*POLE_RADIUS)),
                height=float(rng.uniform(*POLE_HEIGHT[cls])),
            ))
    return poles


def shadowed_by_poles(azimuth: np.ndarray, distance: np.ndarray, poles: Sequence[Pole]) -> np.ndarray:
    """Mask of planar positions hidden from the sensor origin behind any pole."""
    azimuth = np.asarray(azimuth, dtype=np.float64)
    distance = np.asarray(distance, dtype=np.float64)
    hidden = np.zeros(azimuth.shape, dtype=bool)
    for pole in poles:
        offset = np.angle(np.exp(1j * (azimuth - pole.azimuth)))
        hidden |= (distance > pole.distance) & (np.abs(offset) < pole.half_width)
    return hidden


def _sample_geometry(rng: np.random.Generator, n_cameras: int) -> Tuple[PointCloud, LabelArray]:
    xyz_parts, intensity_parts, label_parts = [], [], []
    poles = _sample_poles(rng, n_cameras)

    n_ground = int(rng.integers(GROUND_POINTS[0], GROUND_POINTS[1] + 1))
    in_view = rng.random(n_ground) < GROUND_IN_VIEW_FRACTION
    heading = np.radians(rng.integers(0, n_cameras, n_ground) * CAMERA_YAW_STEP_DEG)
    azimuth = np.where(
        in_view,
        heading + np.radians(rng.uniform(-HALF_FOV_DEG, HALF_FOV_DEG, n_ground)),
        rng.uniform(-math.pi, math.pi, n_ground),
    )
    distance = rng.uniform(*GROUND_RANGE, n_ground)
    z = GROUND_Z + rng.normal(0.0, 0.02, n_ground)
    intensity = _intensity(rng, 0, n_ground)
    # The beam stops at the first surface: no ground returns behind a pole.
    seen = ~shadowed_by_poles(azimuth, distance, poles)
    xyz_parts.append(np.column_stack([distance * np.cos(azimuth), distance * np.sin(azimuth), z])[seen])
    intensity_parts.append(intensity[seen])
    label_parts.append(np.zeros(int(seen.sum()), dtype=np.int64))

    for pole in poles:
        n_points = int(rng.integers(POLE_POINTS[0], POLE_POINTS[1] + 1))
        # Only the half of the pole facing the sensor returns points.
        facing = pole.azimuth + math.pi + rng.uniform(-1.3, 1.3, n_points)
        xyz_parts.append(np.column_stack([
            pole.distance * math.cos(pole.azimuth) + pole.radius * np.cos(facing),
            pole.distance * math.sin(pole.azimuth) + pole.radius * np.sin(facing),
            GROUND_Z + rng.uniform(0.0, pole.height, n_points),
        ]))
        intensity_parts.append(_intensity(rng, pole.cls, n_points))
        label_parts.append(np.full(n_points, pole.cls, dtype=np.int64))

    cloud = PointCloud(np.vstack(xyz_parts), np.concatenate(intensity_parts))
    return cloud, LabelArray(np.concatenate(label_parts), N_CLASSES)


def render_feature_maps(cloud: PointCloud, labels: LabelArray, rig: CalibrationRig,
                        rng: np.random.Generator, stride: int = SCENE_STRIDE) -> Tuple[FeatureMap, ...]:
    """Splat each visible point's class pattern over a 2x2 cell patch, nearest point wins, then add noise.

    Cells no point reaches keep the ground pattern.
    """
    patterns = class_patterns()
    maps = []
    for camera_id, projection in enumerate(project_rig(cloud, rig)):
        camera = rig[camera_id]
        height, width = camera.height // stride, camera.width // stride
        grid = np.repeat(patterns[0][:, None], height * width, axis=1)
        valid = projection.valid
        cu = np.floor(projection.u[valid] / stride).astype(np.int64)
        cv = np.floor(projection.v[valid] / stride).astype(np.int64)
        depth = projection.depth[valid]
        classes = labels.labels[valid]

        cells, depths, owners = [], [], []
        for du in (0, 1):
            for dv in (0, 1):
                inside = (cu + du < width) & (cv + dv < height)
                cells.append(((cv + dv) * width + cu + du)[inside])
                depths.append(depth[inside])
                owners.append(classes[inside])
        cells = np.concatenate(cells)
        depths = np.concatenate(depths)
        owners = np.concatenate(owners)
        if cells.size:
            order = np.lexsort((depths, cells))
            _, first = np.unique(cells[order], return_index=True)
            winners = order[first]
            grid[:, cells[winners]] = patterns[owners[winners]].T

        grid = grid + rng.normal(0.0, FEATURE_NOISE_SIGMA, grid.shape)
        maps.append(FeatureMap(camera_id, grid.reshape(CAMERA_CHANNELS, height, width), stride))
    return tuple(maps)


def nearest_centroid_miou(features: np.ndarray, labels: LabelArray) -> float:
    """mIoU of a nearest-class-centroid classifier fitted and scored on the same points."""
    features = np.asarray(features, dtype=np.float64)
    y = labels.labels
    centroids = np.full((labels.n_cls, features.shape[1]), np.nan)
    for c in range(labels.n_cls):
        if np.any(y == c):
            centroids[c] = features[y == c].mean(axis=0)
    distances = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    distances = np.where(np.isnan(distances), np.inf, distances)
    prediction = np.argmin(distances, axis=1)
    return miou(accumulate(ConfusionMatrix(labels.n_cls), y, prediction)).miou


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    seed: int
    cloud: PointCloud
    labels: LabelArray
    rig: CalibrationRig
    feature_maps: Tuple[FeatureMap, ...]
    attempt: int = 0

    @property
    def n_cameras(self) -> int:
        return self.rig.m

    def features(self, rig: Optional[CalibrationRig] = None, lidar_only: bool = False) -> np.ndarray:
        """Point features, fused with camera features sampled through ``rig`` (default: the true rig)."""
        base = point_features(self.cloud)
        if lidar_only:
            return base
        return image_augmented_features(self.cloud, rig if rig is not None else self.rig, self.feature_maps, base).data

    def to_frame(self, frame_id: int) -> Frame:
        return Frame(frame_id, self.cloud, self.labels, self.rig, self.feature_maps)


def gen_scene(seed: int, n_cameras: int = DEFAULT_CAMERAS) -> SyntheticScene:
    """Deterministic scene for ``seed``; regenerated with the next sub-seed until the self-check passes."""
    rig = toy_rig(n_cameras)
    for attempt in range(MAX_SCENE_ATTEMPTS):
        rng = _rng(seed, attempt)
        cloud, labels = _sample_geometry(rng, n_cameras)
        maps = render_feature_maps(cloud, labels, rig, rng)
        scene = SyntheticScene(int(seed), cloud, labels, rig, maps, attempt)
        fused = nearest_centroid_miou(scene.features(), labels)
        lidar = nearest_centroid_miou(scene.features(lidar_only=True), labels)
        if fused >= FUSED_MIOU_FLOOR and lidar <= LIDAR_MIOU_CEILING:
            logger.debug(f"Scene {seed}: {cloud.n} points, fused NC mIoU {fused:.3f}, LiDAR NC mIoU {lidar:.3f}")
            return scene
        logger.warning(
            f"Scene {seed} attempt {attempt} failed its self-check "
            f"(fused {fused:.3f}, LiDAR-only {lidar:.3f}); regenerating"
        )
    raise SceneGenerationError(f"scene {seed}: no valid scene within {MAX_SCENE_ATTEMPTS} attempts")


def gen_scenes(seed: int, count: int, n_cameras: int = DEFAULT_CAMERAS,
               threads: Optional[int] = None) -> List[SyntheticScene]:
    seeds = derive_scene_seeds(seed, count)
    workers = max(1, min(get_thread_count(threads), count))
    if workers == 1:
        return [gen_scene(s, n_cameras) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda s: gen_scene(s, n_cameras), seeds))


@dataclass(frozen=True, eq=False)
class ToyModel:
    """Affine softmax classifier; ``weights`` is (D + 1) x N_cls with the bias in the last row."""

    weights: np.ndarray
    point_dims: int = POINT_FEATURE_DIMS
    cameras: int = DEFAULT_CAMERAS
    camera_channels: int = CAMERA_CHANNELS

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        rows = self.point_dims + self.cameras * self.camera_channels + 1
        if weights.ndim != 2 or weights.shape[0] != rows or weights.shape[1] < 1:
            raise ShapeError(f"weights must be {rows} x N_cls, got {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise InvalidInputError("model weights must be finite")
        weights.setflags(write=False)
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def zeros(cls, n_cls: int = N_CLASSES, point_dims: int = POINT_FEATURE_DIMS,
              cameras: int = DEFAULT_CAMERAS, camera_channels: int = CAMERA_CHANNELS) -> 'ToyModel':
        return cls(np.zeros((point_dims + cameras * camera_channels + 1, n_cls)), point_dims, cameras, camera_channels)

    @property
    def n_cls(self) -> int:
        return int(self.weights.shape[1])

    @property
    def feature_dims(self) -> int:
        return int(self.weights.shape[0]) - 1

    @property
    def lidar_only(self) -> bool:
        return self.cameras == 0

    def with_weights(self, weights: np.ndarray) -> 'ToyModel':
        return ToyModel(weights, self.point_dims, self.cameras, self.camera_channels)

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dims:
            raise ShapeError(f"expected N x {self.feature_dims} features, got {features.shape}")
        scores = features @ self.weights[:-1] + self.weights[-1]
        scores -= scores.max(axis=1, keepdims=True)
        exp = np.exp(scores)
        return exp / exp.sum(axis=1, keepdims=True)

    def features(self, cloud: PointCloud, rig: CalibrationRig, maps: Sequence[FeatureMap]) -> np.ndarray:
        base = point_features(cloud)
        if self.lidar_only:
            return base
        return image_augmented_features(cloud, rig, maps, base).data

    def predict(self, cloud: PointCloud, rig: CalibrationRig, maps: Sequence[FeatureMap]) -> LabelArray:
        """Benchmark predictor: argmax class per point."""
        probs = self.probabilities(self.features(cloud, rig, maps))
        return LabelArray(np.argmax(probs, axis=1), self.n_cls)


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = DEFAULT_STRATEGY
    train_level: int = DEFAULT_TRAIN_LEVEL
    epochs: int = DEFAULT_EPOCHS
    learning_rate: float = DEFAULT_LEARNING_RATE
    seed: int = 0
    loss: Optional[LossConfig] = None
    kd_segmentation_pass: str = DEFAULT_SEGMENTATION_PASS
    kd_warmup_fraction: float = DEFAULT_KD_WARMUP_FRACTION
    lidar_only: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidInputError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        PerturbationLevel.coerce(self.train_level)
        if int(self.epochs) < 1:
            raise InvalidInputError(f"epochs must be >= 1, got {self.epochs}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise InvalidInputError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.kd_segmentation_pass not in SEGMENTATION_PASSES:
            raise InvalidInputError(f"kd_segmentation_pass must be one of {SEGMENTATION_PASSES}")
        if not (0.0 <= self.kd_warmup_fraction < 1.0):
            raise InvalidInputError(f"kd_warmup_fraction must lie in [0, 1), got {self.kd_warmup_fraction}")
        if self.lidar_only and self.strategy != 'baseline':
            raise InvalidInputError("a LiDAR-only model has no camera input to perturb; use strategy 'baseline'")

    @property
    def perturbs(self) -> bool:
        return self.strategy != 'baseline'

    @property
    def warmup_epochs(self) -> int:
        """Leading epochs of a kd run trained like the baseline."""
        if self.strategy != 'kd':
            return 0
        return int(int(self.epochs) * self.kd_warmup_fraction)


def _score_gradient(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain rule through the row softmax."""
    return probs * (grad_probs - (grad_probs * probs).sum(axis=1, keepdims=True))


def _weight_gradient(features: np.ndarray, score_grad: np.ndarray) -> np.ndarray:
    return np.vstack([features.T @ score_grad, score_grad.sum(axis=0, keepdims=True)])


def step_gradient(model: ToyModel, clean: np.ndarray, perturbed: Optional[np.ndarray], labels: LabelArray,
                  loss_cfg: LossConfig, strategy: str,
                  segmentation_pass: str = DEFAULT_SEGMENTATION_PASS) -> Tuple[float, np.ndarray]:
    """Loss and weight gradient of one training step.

    In ``kd`` the teacher probabilities are constants and the loss is the combined
    loss of the student, so gradient flows through the perturbed features only.
    ``segmentation_pass='teacher'`` takes the segmentation term on the clean pass.
    """
    if strategy == 'baseline':
        features = clean
    elif strategy == 'da':
        if perturbed is None:
            raise InvalidInputError("strategy 'da' needs perturbed features")
        features = perturbed
    elif strategy == 'kd':
        features = None
    else:
        raise InvalidInputError(f"unknown strategy {strategy!r}")

    if features is not None:
        probs = model.probabilities(features)
        loss, grad = total_loss(probs, None, labels, loss_cfg.replace(lambda2=0.0))
        return loss, _weight_gradient(features, _score_gradient(probs, grad))

    teacher = model.probabilities(clean)
    student = model.probabilities(perturbed)
    if segmentation_pass == 'student':
        loss, grad = total_loss(student, teacher, labels, loss_cfg)
        return loss, _weight_gradient(perturbed, _score_gradient(student, grad))

    gradient = np.zeros_like(model.weights)
    loss = 0.0
    if loss_cfg.lambda1 > 0:
        seg, seg_grad = segmentation_loss(teacher, labels, loss_cfg)
        loss += loss_cfg.lambda1 * seg
        gradient += loss_cfg.lambda1 * _weight_gradient(clean, _score_gradient(teacher, seg_grad))
    if loss_cfg.lambda2 > 0:
        kd, kd_grad = kd_loss(teacher, student, labels, loss_cfg)
        loss += loss_cfg.lambda2 * kd
        gradient += loss_cfg.lambda2 * _weight_gradient(perturbed, _score_gradient(student, kd_grad))
    return loss, gradient


def default_loss_config(scenes: Sequence[SyntheticScene]) -> LossConfig:
    labels = np.concatenate([scene.labels.labels for scene in scenes])
    return LossConfig(class_weights_from_labels(labels, scenes[0].labels.n_cls))


def train(scenes: Sequence[SyntheticScene], cfg: TrainConfig) -> ToyModel:
    """Full-batch gradient descent, one step per scene per epoch, scenes in the given order."""
    scenes = list(scenes)
    if not scenes:
        raise InvalidInputError("training needs at least one scene")
    if len({scene.n_cameras for scene in scenes}) != 1:
        raise ShapeError("all training scenes must share the same camera count")
    n_cls = scenes[0].labels.n_cls
    loss_cfg = cfg.loss or default_loss_config(scenes)
    if cfg.strategy != 'kd':
        loss_cfg = loss_cfg.replace(lambda2=0.0)

    cameras = 0 if cfg.lidar_only else scenes[0].n_cameras
    model = ToyModel.zeros(n_cls, POINT_FEATURE_DIMS, cameras, scenes[0].feature_maps[0].channels)
    clean = [model.features(s.cloud, s.rig, s.feature_maps) for s in scenes]
    noise_seed = derive_scene_seeds(cfg.seed, TRAIN_NOISE_STREAM + 1)[TRAIN_NOISE_STREAM]
    label = 'lidar_only' if cfg.lidar_only else cfg.strategy

    warmup = cfg.warmup_epochs
    if warmup:
        logger.info(f"[{label}] teacher warm-up: {warmup} of {cfg.epochs} epochs on well-calibrated features")

    for epoch in range(int(cfg.epochs)):
        losses = []
        strategy = 'baseline' if epoch < warmup else cfg.strategy
        for index, scene in enumerate(scenes):
            perturbed = None
            if strategy != 'baseline':
                rig = scene.rig.perturbed(cfg.train_level, noise_seed, epoch * len(scenes) + index)
                perturbed = model.features(scene.cloud, rig, scene.feature_maps)
            loss, gradient = step_gradient(model, clean[index], perturbed, scene.labels, loss_cfg,
                                           strategy, cfg.kd_segmentation_pass)
            with np.errstate(over='ignore', invalid='ignore'):
                weights = model.weights - cfg.learning_rate * gradient
            if not math.isfinite(loss) or not np.all(np.isfinite(weights)):
                raise TrainingDivergedError(label, epoch, loss, float(np.linalg.norm(model.weights)))
            model = model.with_weights(weights)
            losses.append(loss)
        if (epoch + 1) % LOG_EVERY_EPOCHS == 0 or epoch + 1 == cfg.epochs:
            logger.info(f"[{label}] epoch {epoch + 1}/{cfg.epochs}: mean loss {math.fsum(losses) / len(losses):.4f}")
    return model


def save_model(model: ToyModel, path) -> Path:
    path = Path(path)
    rows, cols = model.weights.shape
    header = MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.point_dims, model.cameras,
                               model.camera_channels, model.n_cls, rows, cols)
    with open(path, 'wb') as handle:
        handle.write(header)
        handle.write(np.ascontiguousarray(model.weights, dtype='<f4').tobytes())
    return path


def load_model(path) -> ToyModel:
    data = Path(path).read_bytes()
    if len(data) < MODEL_HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {MODEL_HEADER.size}-byte header")
    magic, version, point_dims, cameras, channels, n_cls, rows, cols = MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    if cols != n_cls or rows != point_dims + cameras * channels + 1:
        raise MalformedHeaderError(f"{path}: header dims {rows}x{cols} disagree with the model layout")
    expected = rows * cols * 4
    payload = len(data) - MODEL_HEADER.size
    if payload < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} payload bytes, found {payload}")
    if payload > expected:
        raise CountMismatchError(f"{path}: {payload - expected} trailing bytes")
    weights = np.frombuffer(data, dtype='<f4', count=rows * cols, offset=MODEL_HEADER.size)
    return ToyModel(weights.reshape(rows, cols).astype(np.float64), point_dims, cameras, channels)
