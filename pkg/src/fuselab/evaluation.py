"""Confusion matrices, per-class IoU / mIoU and the weak-calibration benchmark harness."""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from .calib import CalibrationRig, PerturbationLevel, load_rig, save_rig, sample_disturbance
from .config import get_thread_count
from .errors import InvalidInputError, LabelRangeError, PredictionError, ShapeError
from .fusion import FeatureMap, check_maps_against_rig, load_feature_map, save_feature_map
from .pointcloud import LabelArray, PointCloud, as_label_array, load_cloud, save_cloud

logger = logging.getLogger(__name__)

DISTURBANCE_MODES = ('per-frame', 'global')
DEFAULT_DISTURBANCE_MODE = 'per-frame'
FRAME_DIR_PATTERN = re.compile(r'^frame_(\d+)$')

Predictor = Callable[[PointCloud, CalibrationRig, Sequence[FeatureMap]], LabelArray]


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """counts[g, p] = number of points with ground truth g predicted as p."""

    n_cls: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.n_cls < 1:
            raise InvalidInputError(f"n_cls must be >= 1, got {self.n_cls}")
        counts = np.zeros((self.n_cls, self.n_cls), dtype=np.int64) if self.counts is None \
            else np.array(self.counts, dtype=np.int64)
        if counts.shape != (self.n_cls, self.n_cls):
            raise ShapeError(f"counts must be {self.n_cls}x{self.n_cls}, got {counts.shape}")
        if np.any(counts < 0):
            raise InvalidInputError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, 'counts', counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        if other.n_cls != self.n_cls:
            raise ShapeError(f"cannot merge {self.n_cls}-class and {other.n_cls}-class matrices")
        return ConfusionMatrix(self.n_cls, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and other.n_cls == self.n_cls and np.array_equal(other.counts, self.counts)


def _label_values(labels, n_cls: int) -> np.ndarray:
    values = labels.labels if isinstance(labels, LabelArray) else np.asarray(labels, dtype=np.int64).reshape(-1)
    if values.size and (values.min() < 0 or values.max() >= n_cls):
        raise LabelRangeError(f"labels must lie in [0, {n_cls})")
    return values


def accumulate(cm: ConfusionMatrix, gt, pred) -> ConfusionMatrix:
    gt_values = _label_values(gt, cm.n_cls)
    pred_values = _label_values(pred, cm.n_cls)
    if gt_values.shape != pred_values.shape:
        raise ShapeError(f"{gt_values.shape[0]} ground-truth labels vs {pred_values.shape[0]} predictions")
    if gt_values.size == 0:
        return cm
    increments = np.bincount(gt_values * cm.n_cls + pred_values, minlength=cm.n_cls ** 2)
    return ConfusionMatrix(cm.n_cls, cm.counts + increments.reshape(cm.n_cls, cm.n_cls))


@dataclass(frozen=True, eq=False)
class IoUReport:
    """Per-class IoU (NaN marks a class with zero denominator) and their mean."""

    per_class_iou: np.ndarray
    miou: float
    class_names: Optional[Sequence[str]] = None

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.per_class_iou)

    @property
    def is_undefined(self) -> bool:
        return not self.defined.any()

    def to_dict(self) -> dict:
        names = self.class_names or [str(c) for c in range(len(self.per_class_iou))]
        return {
            'miou': None if self.is_undefined else float(self.miou),
            'per_class_iou': {
                name: (None if np.isnan(value) else float(value))
                for name, value in zip(names, self.per_class_iou)
            },
        }


def miou(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> IoUReport:
    """IoU_c = TP / (TP + FP + FN); classes with a zero denominator are left out of the mean."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denominator = tp + fp + fn
    iou = np.full(cm.n_cls, np.nan)
    defined = denominator > 0
    iou[defined] = tp[defined] / denominator[defined]
    mean = float(iou[defined].mean()) if defined.any() else float('nan')
    return IoUReport(iou, mean, class_names)


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: int
    cloud: PointCloud
    labels: LabelArray
    rig: CalibrationRig
    feature_maps: tuple

    def __post_init__(self):
        self.labels.check_matches(self.cloud)
        object.__setattr__(self, 'feature_maps', tuple(self.feature_maps))
        check_maps_against_rig(self.feature_maps, self.rig)


@dataclass
class BenchmarkRun:
    levels: List[int]
    seed: int
    frame_ids: List[int]
    mode: str
    reports: Dict[int, IoUReport] = field(default_factory=dict)
    matrices: Dict[int, ConfusionMatrix] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'seed': self.seed,
            'mode': self.mode,
            'frames': list(self.frame_ids),
            'levels': {
                str(level): dict(self.reports[level].to_dict(), points=self.matrices[level].total)
                for level in self.levels
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_dataframe(self) -> pd.DataFrame:
        records = []
        for level in self.levels:
            report = self.reports[level].to_dict()
            row = {'level': level, 'miou': report['miou']}
            row.update({f'iou_{name}': value for name, value in report['per_class_iou'].items()})
            records.append(row)
        return pd.DataFrame(records)

    def export_to_csv(self, filename: str) -> str:
        self.to_dataframe().to_csv(filename, index=False)
        return filename


def _frame_disturbance_id(frame: Frame, mode: str) -> int:
    return frame.frame_id if mode == 'per-frame' else 0


def _evaluate_frame(predict: Predictor, frame: Frame, level: PerturbationLevel, seed: int,
                    mode: str, n_cls: int) -> ConfusionMatrix:
    if level.range == 0.0:
        rig = frame.rig
    else:
        rig = frame.rig.perturbed(level, seed, _frame_disturbance_id(frame, mode))
    try:
        prediction = predict(frame.cloud, rig, frame.feature_maps)
    except Exception as e:
        raise PredictionError(frame.frame_id, level.level, e) from e
    prediction = as_label_array(prediction, n_cls)
    if len(prediction) != frame.cloud.n:
        raise PredictionError(frame.frame_id, level.level, f"{len(prediction)} labels for {frame.cloud.n} points")
    return accumulate(ConfusionMatrix(n_cls), frame.labels, prediction)


def weak_calib_benchmark(predict: Predictor, frames: Sequence[Frame], levels=(0, 1, 2, 3), seed: int = 0,
                         mode: str = DEFAULT_DISTURBANCE_MODE, class_names: Optional[Sequence[str]] = None,
                         threads: Optional[int] = None) -> BenchmarkRun:
    """Evaluate ``predict`` on every frame at every weak-calibration level.

    Each (frame, camera) gets its own disturbance from ``sample_disturbance`` ('per-frame'),
    or every frame shares the disturbance of frame 0 ('global'). Level 0 passes the
    frame's original rig object through untouched.
    """
    if mode not in DISTURBANCE_MODES:
        raise InvalidInputError(f"mode must be one of {DISTURBANCE_MODES}, got {mode!r}")
    if not frames:
        raise InvalidInputError("the benchmark needs at least one frame")
    levels = [PerturbationLevel.coerce(level) for level in levels]
    n_cls = frames[0].labels.n_cls
    if any(frame.labels.n_cls != n_cls for frame in frames):
        raise ShapeError("all frames must share the same class count")

    run = BenchmarkRun([lvl.level for lvl in levels], int(seed), [f.frame_id for f in frames], mode)
    workers = max(1, min(get_thread_count(threads), len(frames)))
    for level in levels:
        if level.level == 0:
            for frame in frames:
                for camera_id in range(frame.rig.m):
                    spec = sample_disturbance(level, seed, _frame_disturbance_id(frame, mode), camera_id)
                    if spec.as_tuple() != (0.0, 0.0, 0.0):
                        raise RuntimeError(f"level 0 produced a non-zero disturbance {spec.as_tuple()}")
        task = lambda frame: _evaluate_frame(predict, frame, level, seed, mode, n_cls)  # noqa: E731
        if workers == 1:
            matrices = [task(frame) for frame in frames]
        else:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                matrices = list(executor.map(task, frames))
        total = ConfusionMatrix(n_cls)
        for cm in matrices:
            total = total + cm
        run.matrices[level.level] = total
        run.reports[level.level] = miou(total, class_names)
        logger.info(f"Level {level.level}: mIoU {run.reports[level.level].miou:.4f} over {len(frames)} frames")
    return run


def ground_truth_predictor(frames: Sequence[Frame]) -> Predictor:
    """Predictor that returns each frame's ground truth (matched by cloud identity)."""
    by_cloud = {id(frame.cloud): frame.labels for frame in frames}

    def predict(cloud, rig, maps):
        return by_cloud[id(cloud)]

    return predict


def save_frame(frame: Frame, root) -> Path:
    """Write one frame as ``frame_<id>/`` holding cloud.flpc, rig.yaml and camera_<k>.flfm."""
    directory = Path(root) / f'frame_{frame.frame_id:06d}'
    directory.mkdir(parents=True, exist_ok=True)
    save_cloud(frame.cloud, frame.labels, directory / 'cloud.flpc')
    save_rig(frame.rig, directory / 'rig.yaml', extra={'n_cls': frame.labels.n_cls})
    for camera_id, feature_map in enumerate(frame.feature_maps):
        save_feature_map(feature_map, directory / f'camera_{camera_id}.flfm')
    return directory


def load_frames(root, rig: Optional[CalibrationRig] = None, n_cls: Optional[int] = None) -> List[Frame]:
    """Load every ``frame_<id>`` directory under ``root``; ``rig`` overrides per-frame rig files."""
    frames = []
    for directory in sorted(Path(root).iterdir()):
        match = FRAME_DIR_PATTERN.match(directory.name)
        if not directory.is_dir() or not match:
            continue
        frame_rig = rig if rig is not None else load_rig(directory / 'rig.yaml')
        frame_n_cls = n_cls
        if frame_n_cls is None and (directory / 'rig.yaml').exists():
            with open(directory / 'rig.yaml', 'r', encoding='utf-8') as handle:
                frame_n_cls = (yaml.safe_load(handle) or {}).get('n_cls')
        cloud, labels = load_cloud(directory / 'cloud.flpc', frame_n_cls)
        if labels is None:
            raise InvalidInputError(f"{directory}: benchmark frames need ground-truth labels")
        maps = [load_feature_map(directory / f'camera_{k}.flfm') for k in range(frame_rig.m)]
        frames.append(Frame(int(match.group(1)), cloud, labels, frame_rig, tuple(maps)))
    if not frames:
        raise InvalidInputError(f"no frame_<id> directories found under {root}")
    logger.info(f"Loaded {len(frames)} frames from {root}")
    return frames
