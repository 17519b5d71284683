import json
import math
import unittest

import numpy as np
import pytest

from src.fuselab.calib import project_camera
from src.fuselab.errors import InvalidInputError, LabelRangeError, PredictionError, ShapeError
from src.fuselab.evaluation import (
    ConfusionMatrix,
    Frame,
    accumulate,
    ground_truth_predictor,
    load_frames,
    miou,
    save_frame,
    weak_calib_benchmark,
)
from src.fuselab.fusion import FeatureMap
from src.fuselab.pointcloud import LabelArray, PointCloud


def make_frames(rig, rng, count=4, n=60):
    frames = []
    for frame_id in range(count):
        xyz = np.column_stack([rng.uniform(0, 6, n), rng.uniform(0, 6, n), rng.uniform(1, 3, n)])
        labels = LabelArray((xyz[:, 0] > 3).astype(np.int64), 2)
        maps = (FeatureMap(0, rng.normal(size=(2, 5, 5)), stride=2),)
        frames.append(Frame(frame_id, PointCloud(xyz, rng.uniform(0, 1, n)), labels, rig, maps))
    return frames


def camera_predictor(cloud, rig, maps):
    """Labels points by which half of the image they land in; invisible points get class 0."""
    projection = project_camera(cloud, rig, 0)
    return LabelArray((projection.valid & (projection.u >= 5.0)).astype(np.int64), 2)


def lidar_predictor(cloud, rig, maps):
    return LabelArray((cloud.xyz[:, 0] > 2.5).astype(np.int64), 2)


class TestIoU(unittest.TestCase):
    def test_hand_counted_example(self):
        cm = accumulate(ConfusionMatrix(2), np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
        np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])
        report = miou(cm)
        np.testing.assert_allclose(report.per_class_iou, [0.5, 2.0 / 3.0])
        self.assertAlmostEqual(report.miou, 7.0 / 12.0)

    def test_perfect_prediction(self):
        labels = np.array([0, 1, 1, 0])
        report = miou(accumulate(ConfusionMatrix(2), labels, labels))
        np.testing.assert_array_equal(report.per_class_iou, [1.0, 1.0])
        self.assertEqual(report.miou, 1.0)

    def test_absent_class_is_excluded(self):
        report = miou(accumulate(ConfusionMatrix(3), np.array([0, 1]), np.array([0, 1])))
        self.assertTrue(math.isnan(report.per_class_iou[2]))
        self.assertEqual(report.miou, 1.0)
        self.assertEqual(report.to_dict()['per_class_iou']['2'], None)

    def test_empty_matrix_is_undefined(self):
        report = miou(ConfusionMatrix(2))
        self.assertTrue(report.is_undefined)
        self.assertIsNone(report.to_dict()['miou'])

    def test_empty_batch_leaves_matrix_unchanged(self):
        cm = accumulate(ConfusionMatrix(2), np.array([0]), np.array([1]))
        self.assertEqual(accumulate(cm, np.array([], dtype=np.int64), np.array([], dtype=np.int64)), cm)

    def test_label_checks(self):
        with self.assertRaises(LabelRangeError):
            accumulate(ConfusionMatrix(2), np.array([2]), np.array([0]))
        with self.assertRaises(ShapeError):
            accumulate(ConfusionMatrix(2), np.array([0, 1]), np.array([0]))
        with self.assertRaises(ShapeError):
            ConfusionMatrix(2) + ConfusionMatrix(3)


def test_accumulation_is_associative(rng):
    gt = rng.integers(0, 5, 1000)
    pred = rng.integers(0, 5, 1000)
    whole = accumulate(ConfusionMatrix(5), gt, pred)
    halves = accumulate(accumulate(ConfusionMatrix(5), gt[:400], pred[:400]), gt[400:], pred[400:])
    merged = accumulate(ConfusionMatrix(5), gt[:400], pred[:400]) + accumulate(ConfusionMatrix(5), gt[400:], pred[400:])
    assert whole == halves == merged
    assert whole.total == 1000


def test_miou_is_permutation_invariant(rng):
    gt = rng.integers(0, 4, 500)
    pred = np.where(rng.random(500) < 0.7, gt, rng.integers(0, 4, 500))
    permutation = np.array([2, 0, 3, 1])
    original = miou(accumulate(ConfusionMatrix(4), gt, pred))
    relabeled = miou(accumulate(ConfusionMatrix(4), permutation[gt], permutation[pred]))
    assert relabeled.miou == pytest.approx(original.miou, abs=1e-15)
    np.testing.assert_allclose(relabeled.per_class_iou[permutation], original.per_class_iou)


def test_confusion_counts_are_read_only():
    cm = ConfusionMatrix(2)
    with pytest.raises(ValueError):
        cm.counts[0, 0] = 1


def test_oracle_scores_one_at_every_level(unit_rig, rng):
    frames = make_frames(unit_rig, rng)
    run = weak_calib_benchmark(ground_truth_predictor(frames), frames, seed=7)
    assert run.levels == [0, 1, 2, 3]
    assert all(run.reports[level].miou == 1.0 for level in run.levels)


def test_camera_independent_predictor_is_flat(unit_rig, rng):
    frames = make_frames(unit_rig, rng)
    run = weak_calib_benchmark(lidar_predictor, frames, seed=3)
    scores = {run.reports[level].miou for level in run.levels}
    assert len(scores) == 1


def test_benchmark_is_deterministic(unit_rig, rng):
    frames = make_frames(unit_rig, rng)
    first = weak_calib_benchmark(camera_predictor, frames, seed=11)
    second = weak_calib_benchmark(camera_predictor, frames, seed=11, threads=4)
    for level in first.levels:
        assert first.matrices[level] == second.matrices[level]
    assert first.to_json() == second.to_json()


def test_level_zero_equals_plain_evaluation(unit_rig, rng):
    frames = make_frames(unit_rig, rng)
    run = weak_calib_benchmark(camera_predictor, frames, levels=[0], seed=99)
    expected = ConfusionMatrix(2)
    for frame in frames:
        expected = accumulate(expected, frame.labels, camera_predictor(frame.cloud, frame.rig, frame.feature_maps))
    assert run.matrices[0] == expected


def test_level_zero_passes_original_rig(unit_rig, rng):
    frames = make_frames(unit_rig, rng, count=2)
    seen = []

    def predict(cloud, rig, maps):
        seen.append(rig)
        return lidar_predictor(cloud, rig, maps)

    weak_calib_benchmark(predict, frames, levels=[0, 3], seed=1, threads=1)
    assert seen[0] is unit_rig and seen[1] is unit_rig
    assert seen[2] is not unit_rig


def test_global_mode_shares_one_disturbance(unit_rig, rng):
    frames = make_frames(unit_rig, rng, count=3)
    seen = {}

    def predict(cloud, rig, maps):
        seen[id(cloud)] = rig[0].extrinsics.matrix.copy()
        return lidar_predictor(cloud, rig, maps)

    weak_calib_benchmark(predict, frames, levels=[2], seed=5, mode='global', threads=1)
    matrices = [seen[id(frame.cloud)] for frame in frames]
    assert all(np.array_equal(matrices[0], m) for m in matrices[1:])

    seen.clear()
    weak_calib_benchmark(predict, frames, levels=[2], seed=5, mode='per-frame', threads=1)
    per_frame = [seen[id(frame.cloud)] for frame in frames]
    assert not np.array_equal(per_frame[1], per_frame[2])


def test_prediction_failure_names_the_frame(unit_rig, rng):
    frames = make_frames(unit_rig, rng, count=3)

    def predict(cloud, rig, maps):
        if cloud is frames[2].cloud:
            raise KeyError('boom')
        return lidar_predictor(cloud, rig, maps)

    with pytest.raises(PredictionError) as excinfo:
        weak_calib_benchmark(predict, frames, seed=0, threads=1)
    assert excinfo.value.frame_id == 2


def test_short_prediction_is_rejected(unit_rig, rng):
    frames = make_frames(unit_rig, rng, count=1)
    with pytest.raises(PredictionError):
        weak_calib_benchmark(lambda cloud, rig, maps: LabelArray(np.zeros(3, dtype=np.int64), 2), frames, seed=0)


def test_benchmark_argument_checks(unit_rig, rng):
    frames = make_frames(unit_rig, rng, count=1)
    with pytest.raises(InvalidInputError):
        weak_calib_benchmark(lidar_predictor, frames, seed=0, mode='sometimes')
    with pytest.raises(InvalidInputError):
        weak_calib_benchmark(lidar_predictor, [], seed=0)
    with pytest.raises(InvalidInputError):
        weak_calib_benchmark(lidar_predictor, frames, levels=[5], seed=0)


def test_run_serialisation(unit_rig, rng, tmp_path):
    frames = make_frames(unit_rig, rng, count=2)
    run = weak_calib_benchmark(ground_truth_predictor(frames), frames, seed=4, class_names=['near', 'far'])
    document = json.loads(run.to_json())
    assert document['seed'] == 4
    assert document['frames'] == [0, 1]
    assert document['levels']['3']['miou'] == 1.0
    assert document['levels']['0']['per_class_iou'] == {'near': 1.0, 'far': 1.0}
    table = run.to_dataframe()
    assert list(table.columns) == ['level', 'miou', 'iou_near', 'iou_far']
    path = run.export_to_csv(str(tmp_path / 'bench.csv'))
    assert (tmp_path / 'bench.csv').read_text().startswith('level,miou')
    assert path.endswith('bench.csv')


def test_frames_round_trip_through_disk(unit_rig, rng, tmp_path):
    frames = make_frames(unit_rig, rng, count=2)
    for frame in frames:
        save_frame(frame, tmp_path)
    (tmp_path / 'notes.txt').write_text('ignored', encoding='utf-8')
    loaded = load_frames(tmp_path)
    assert [f.frame_id for f in loaded] == [0, 1]
    assert loaded[0].labels.n_cls == 2
    np.testing.assert_array_equal(loaded[1].labels.labels, frames[1].labels.labels)
    np.testing.assert_array_equal(loaded[0].rig[0].extrinsics.matrix, unit_rig[0].extrinsics.matrix)
    run = weak_calib_benchmark(ground_truth_predictor(loaded), loaded, seed=1)
    assert run.reports[3].miou == 1.0


def test_load_frames_needs_frame_directories(tmp_path):
    with pytest.raises(InvalidInputError):
        load_frames(tmp_path)
