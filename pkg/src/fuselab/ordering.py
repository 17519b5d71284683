"""Weak-calibration ordering checks over the toy models, reported as a pass/fail check table."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .evaluation import BenchmarkRun, weak_calib_benchmark
from .toytrain import (
    CLASS_NAMES,
    DEFAULT_CAMERAS,
    SyntheticScene,
    ToyModel,
    TrainConfig,
    derive_scene_seeds,
    gen_scenes,
    train,
)

logger = logging.getLogger(__name__)

ORDERING_MODELS = ('baseline', 'da', 'kd', 'lidar_only')
BENCHMARK_LEVELS = (0, 1, 2, 3)
FUSION_GAIN_MARGIN = 0.05
ROBUSTNESS_MARGIN = 0.03
FLAT_TOLERANCE = 1e-12
DEFAULT_ORDERING_SCENES = 4


class OrderingCheckGenerator:
    def __init__(self):
        self.checks = []
        self.check_counter = 1

    def add_check(self, description: str, comparison: str, expected_result: str, actual_result: str, status: str):
        """Add a new check row to the collection"""
        self.checks.append({
            'CHK_ID': f'CHK_{self.check_counter:03d}',
            'Check Description': description,
            'Comparison': comparison,
            'Expected Result': expected_result,
            'Actual Result': actual_result,
            'Status': status
        })
        self.check_counter += 1

    def _compare(self, description: str, left: str, left_value: float, relation: str, right: str,
                 right_value: float, margin: float = 0.0):
        if relation == '>':
            passed = left_value > right_value + margin
        elif relation == '>=':
            passed = left_value >= right_value + margin
        else:
            passed = left_value < right_value - margin
        bound = f" {'+' if relation != '<' else '-'} {margin:.2f}" if margin else ''
        self.add_check(
            description=description,
            comparison=f"{left} {relation} {right}{bound}",
            expected_result=f"{left} {relation} {right}{bound}",
            actual_result=f"{left} = {left_value:.4f}, {right} = {right_value:.4f}",
            status="Pass" if passed else "Fail"
        )

    def generate_ordering_checks(self, table: pd.DataFrame):
        """Generate the fused / LiDAR-only / DA / KD ordering checks from a model x level mIoU table"""
        def at(model, level):
            return float(table.loc[model, level])

        lidar = table.loc['lidar_only'].to_numpy(dtype=np.float64)
        spread = float(lidar.max() - lidar.min())
        self.add_check(
            description="LiDAR-only model does not depend on calibration",
            comparison="max - min of lidar_only mIoU over levels",
            expected_result=f"spread <= {FLAT_TOLERANCE:g}",
            actual_result=f"spread = {spread:.3g}",
            status="Pass" if spread <= FLAT_TOLERANCE else "Fail"
        )
        self._compare("Fused baseline degrades under weak calibration",
                      "baseline@L0", at('baseline', 0), '>', "baseline@L3", at('baseline', 3))
        self._compare("Camera features help under good calibration",
                      "baseline@L0", at('baseline', 0), '>=', "lidar_only@L0", at('lidar_only', 0), FUSION_GAIN_MARGIN)
        self._compare("Fused baseline falls below LiDAR-only at level 3",
                      "baseline@L3", at('baseline', 3), '<', "lidar_only@L3", at('lidar_only', 3))
        self._compare("Weak calibration augmentation improves level 3",
                      "da@L3", at('da', 3), '>=', "baseline@L3", at('baseline', 3), ROBUSTNESS_MARGIN)
        self._compare("Weak calibration augmentation costs accuracy at level 0",
                      "da@L0", at('da', 0), '<', "baseline@L0", at('baseline', 0))
        self._compare("Distillation keeps level 0 accuracy",
                      "kd@L0", at('kd', 0), '>=', "da@L0", at('da', 0))
        self._compare("Distillation improves level 3",
                      "kd@L3", at('kd', 3), '>=', "baseline@L3", at('baseline', 3), ROBUSTNESS_MARGIN)

    def get_checks_df(self) -> pd.DataFrame:
        """Convert checks to a pandas DataFrame"""
        return pd.DataFrame(self.checks)

    def export_to_csv(self, filename: str):
        """Export checks to a CSV file"""
        df = self.get_checks_df()
        df.to_csv(filename, index=False)
        return filename


@dataclass
class OrderingReport:
    table: pd.DataFrame  # rows: models, columns: levels, values: mIoU
    checks: pd.DataFrame
    runs: Dict[str, BenchmarkRun] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool((self.checks['Status'] == 'Pass').all())

    @property
    def failures(self) -> List[str]:
        failed = self.checks[self.checks['Status'] != 'Pass']
        return [f"{row['CHK_ID']}: {row['Check Description']} ({row['Actual Result']})" for _, row in failed.iterrows()]


def _report_from_table(table: pd.DataFrame, runs: Optional[Dict[str, BenchmarkRun]] = None) -> OrderingReport:
    gen = OrderingCheckGenerator()
    gen.generate_ordering_checks(table)
    report = OrderingReport(table, gen.get_checks_df(), dict(runs or {}))
    logger.info(f"Ordering checks: {int((report.checks['Status'] == 'Pass').sum())}/{len(report.checks)} passed")
    return report


def ordering_scenes(seed: int, count: int = DEFAULT_ORDERING_SCENES, n_cameras: int = DEFAULT_CAMERAS,
                    threads: Optional[int] = None) -> Tuple[List[SyntheticScene], List[SyntheticScene]]:
    """Training scenes and held-out evaluation scenes, drawn from separate streams of ``seed``."""
    train_seed, heldout_seed = derive_scene_seeds(seed, 2)
    return (gen_scenes(train_seed, count, n_cameras, threads),
            gen_scenes(heldout_seed, count, n_cameras, threads))


def train_ordering_models(scenes: Sequence[SyntheticScene], seed: int, epochs: Optional[int] = None,
                          **overrides) -> Dict[str, ToyModel]:
    """Train baseline, da, kd and a LiDAR-only model on the same scenes."""
    extra = dict(overrides)
    if epochs is not None:
        extra['epochs'] = epochs
    models = {}
    for name in ORDERING_MODELS:
        if name == 'lidar_only':
            cfg = TrainConfig(strategy='baseline', seed=seed, lidar_only=True, **extra)
        else:
            cfg = TrainConfig(strategy=name, seed=seed, **extra)
        models[name] = train(scenes, cfg)
    return models


def evaluate_ordering(models: Mapping[str, ToyModel], scenes: Sequence[SyntheticScene], seed: int,
                      threads: Optional[int] = None) -> OrderingReport:
    """Benchmark every model at levels 0-3 on ``scenes`` and check the expected ordering."""
    missing = [name for name in ORDERING_MODELS if name not in models]
    if missing:
        raise ValueError(f"missing models for ordering: {missing}")
    frames = [scene.to_frame(index) for index, scene in enumerate(scenes)]
    runs = {}
    for name in ORDERING_MODELS:
        runs[name] = weak_calib_benchmark(models[name].predict, frames, BENCHMARK_LEVELS, seed,
                                          class_names=CLASS_NAMES, threads=threads)
    table = pd.DataFrame(
        [[runs[name].reports[level].miou for level in BENCHMARK_LEVELS] for name in ORDERING_MODELS],
        index=list(ORDERING_MODELS),
        columns=list(BENCHMARK_LEVELS),
    )
    return _report_from_table(table, runs)


def run_ordering(seed: int, count: int = DEFAULT_ORDERING_SCENES, n_cameras: int = DEFAULT_CAMERAS,
                 epochs: Optional[int] = None, threads: Optional[int] = None, **overrides) -> OrderingReport:
    """Train the ordering models for one seed and score them on held-out scenes."""
    training, heldout = ordering_scenes(seed, count, n_cameras, threads)
    models = train_ordering_models(training, seed, epochs, **overrides)
    return evaluate_ordering(models, heldout, seed, threads)


def combine_ordering(reports: Sequence[OrderingReport]) -> OrderingReport:
    """Average the mIoU tables of several seeds and re-run the checks on the mean."""
    if not reports:
        raise ValueError("no ordering reports to combine")
    table = sum(report.table for report in reports) / len(reports)
    return _report_from_table(table)
