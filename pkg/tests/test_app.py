import json

import numpy as np
import pytest

from src.app import main as app_main
from src.fuselab.calib import load_rig, save_rig
from src.fuselab.cli import main, run
from src.fuselab.fusion import FeatureMap, save_feature_map
from src.fuselab.overlay import read_ppm
from src.fuselab.pointcloud import LabelArray, PointCloud, load_cloud, save_cloud


@pytest.fixture
def rig_file(unit_rig, tmp_path):
    return str(save_rig(unit_rig, tmp_path / 'rig.yaml'))


@pytest.fixture
def points_file(sample_cloud, sample_labels, tmp_path):
    return str(save_cloud(sample_cloud, sample_labels, tmp_path / 'points.flpc'))


def test_project_prints_one_line_per_point(runner, rig_file, points_file):
    result = runner.invoke(main, ['project', '--rig', rig_file, '--points', points_file])
    assert result.exit_code == 0, result.output
    lines = result.output.strip().splitlines()
    assert len(lines) == 3
    assert lines[0] == '0 0 1.000000 2.000000 2.000000 1'
    behind = lines[1].split()
    assert behind[4] == '-1.000000' and behind[5] == '0'
    assert lines[2] == '0 2 1.000000 1.000000 1.000000 1'


def test_project_single_camera_drops_camera_column(runner, rig_file, points_file, tmp_path):
    out = tmp_path / 'projection.csv'
    result = runner.invoke(main, ['project', '--rig', rig_file, '--points', points_file,
                                  '--camera', '0', '--out', str(out)])
    assert result.exit_code == 0, result.output
    lines = result.output.strip().splitlines()
    assert lines[0] == '0 1.000000 2.000000 2.000000 1'
    assert lines[2] == '2 1.000000 1.000000 1.000000 1'
    assert all(len(line.split()) == 5 for line in lines)
    assert out.read_text().splitlines()[0] == 'index,u,v,depth,valid'


def test_project_needs_seed_above_level_zero(runner, rig_file, points_file):
    result = runner.invoke(main, ['project', '--rig', rig_file, '--points', points_file, '--level', '2'])
    assert result.exit_code == 1
    assert 'Usage:' in result.output
    assert 'error: --seed is required' in result.output


def test_missing_input_file_is_an_io_error(runner, rig_file, tmp_path):
    result = runner.invoke(main, ['project', '--rig', rig_file, '--points', str(tmp_path / 'missing.flpc')])
    assert result.exit_code == 2
    assert 'error:' in result.output


def test_perturb_writes_rotated_rig(runner, rig_file, tmp_path):
    out = tmp_path / 'weak.yaml'
    result = runner.invoke(main, ['perturb', '--rig', rig_file, '--level', '2', '--seed', '5', '--out', str(out)])
    assert result.exit_code == 0, result.output
    angles = [float(value) for value in result.output.split()[1:4]]
    assert all(abs(angle) <= 2.0 for angle in angles)
    weak = load_rig(out)
    original = load_rig(rig_file)
    assert not np.array_equal(weak[0].extrinsics.matrix, original[0].extrinsics.matrix)
    np.testing.assert_array_equal(weak[0].extrinsics.translation, original[0].extrinsics.translation)


def test_sample_writes_fused_features(runner, rig_file, points_file, tmp_path):
    feature_map = save_feature_map(FeatureMap(0, np.ones((2, 5, 5)), stride=2), tmp_path / 'cam0.flfm')
    out = tmp_path / 'fused.csv'
    result = runner.invoke(main, ['sample', '--rig', rig_file, '--points', points_file,
                                  '--map', str(feature_map), '--out', str(out)])
    assert result.exit_code == 0, result.output
    header, *rows = out.read_text().strip().splitlines()
    assert header == 'x,y,z,intensity,cam0_c0,cam0_c1'
    assert len(rows) == 3
    # the point behind the camera samples nothing
    assert rows[1].endswith(',0.0,0.0')


def test_eval_reports_hand_counted_miou(runner, tmp_path):
    cloud = np.zeros((4, 3))
    gt = save_cloud(PointCloud(cloud), LabelArray(np.array([0, 0, 1, 1]), 2), tmp_path / 'gt.flpc')
    pred = save_cloud(PointCloud(cloud), LabelArray(np.array([0, 1, 1, 1]), 2), tmp_path / 'pred.flpc')
    out = tmp_path / 'report.json'
    result = runner.invoke(main, ['eval', '--gt', str(gt), '--pred', str(pred), '--n-cls', '2', '--out', str(out)])
    assert result.exit_code == 0, result.output
    report = json.loads(out.read_text())
    assert report['miou'] == pytest.approx(7.0 / 12.0)
    assert report['per_class_iou'] == {'0': 0.5, '1': pytest.approx(2.0 / 3.0)}


def test_synth_then_oracle_bench(runner, tmp_path):
    frames = tmp_path / 'frames'
    result = runner.invoke(main, ['synth', '--seed', '3', '--scenes', '2', '--cameras', '1', '--out-dir', str(frames)])
    assert result.exit_code == 0, result.output
    assert sorted(p.name for p in frames.iterdir()) == ['frame_000000', 'frame_000001']

    out = tmp_path / 'bench.json'
    result = runner.invoke(main, ['bench', '--frames', str(frames), '--seed', '1', '--oracle', '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert 'level 3: mIoU 1.000000' in result.output
    document = json.loads(out.read_text())
    assert [document['levels'][level]['miou'] for level in ('0', '1', '2', '3')] == [1.0] * 4


def test_bench_needs_seed(runner, tmp_path):
    result = runner.invoke(main, ['bench', '--frames', str(tmp_path), '--oracle'])
    assert result.exit_code == 1
    assert 'Usage:' in result.output


def test_bench_needs_one_predictor(runner, tmp_path):
    result = runner.invoke(main, ['bench', '--frames', str(tmp_path), '--seed', '0'])
    assert result.exit_code == 1
    assert 'exactly one of --model or --oracle' in result.output


def test_train_toy_then_bench_model(runner, tmp_path):
    model = tmp_path / 'toy.flmd'
    result = runner.invoke(main, ['train-toy', '--strategy', 'da', '--scenes', '1', '--cameras', '1',
                                  '--seed', '0', '--epochs', '3', '--out', str(model)])
    assert result.exit_code == 0, result.output
    assert 'training mIoU' in result.output
    assert model.exists()

    frames = tmp_path / 'frames'
    runner.invoke(main, ['synth', '--seed', '9', '--cameras', '1', '--out-dir', str(frames)])
    result = runner.invoke(main, ['bench', '--frames', str(frames), '--seed', '2', '--levels', '0,3',
                                  '--model', str(model), '--out', str(tmp_path / 'bench.json')])
    assert result.exit_code == 0, result.output
    assert result.output.count('mIoU') == 2


def test_bench_rejects_bad_levels(runner, tmp_path):
    result = runner.invoke(main, ['bench', '--frames', str(tmp_path), '--seed', '0', '--oracle', '--levels', '0,7'])
    assert result.exit_code == 1


def test_overlay_writes_ppm(runner, rig_file, points_file, tmp_path):
    out = tmp_path / 'overlay.ppm'
    result = runner.invoke(main, ['overlay', '--rig', rig_file, '--points', points_file, '--level', '1',
                                  '--seed', '4', '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert read_ppm(out).shape == (10, 10, 3)


def test_convert_with_remap(runner, tmp_path):
    scan = tmp_path / 'scan.bin'
    labels = tmp_path / 'scan.label'
    remap = tmp_path / 'remap.yaml'
    np.array([[1.0, 2.0, 3.0, 0.5], [4.0, 5.0, 6.0, 0.5]], dtype='<f4').tofile(scan)
    np.array([40, 48], dtype='<u4').tofile(labels)
    remap.write_text('40: 0\n48: 1\n', encoding='utf-8')
    out = tmp_path / 'scan.flpc'
    result = runner.invoke(main, ['convert', '--scan', str(scan), '--labels', str(labels), '--remap', str(remap),
                                  '--n-cls', '2', '--out', str(out)])
    assert result.exit_code == 0, result.output
    _, loaded = load_cloud(out)
    assert loaded.labels.tolist() == [0, 1]

    remap.write_text('- 40\n', encoding='utf-8')
    result = runner.invoke(main, ['convert', '--scan', str(scan), '--remap', str(remap), '--out', str(out)])
    assert result.exit_code == 1


@pytest.mark.parametrize('name', sorted(main.commands))
def test_help_lists_every_option(runner, name):
    result = runner.invoke(main, [name, '--help'])
    assert result.exit_code == 0
    for param in main.commands[name].params:
        for opt in param.opts:
            assert opt in result.output


def test_run_returns_exit_codes(rig_file, points_file, tmp_path):
    assert run(['project', '--rig', rig_file, '--points', points_file]) == 0
    assert run(['project', '--rig', rig_file, '--points', points_file, '--level', '3']) == 1
    assert run(['project', '--rig', str(tmp_path / 'nope.yaml'), '--points', points_file]) == 2
    assert run(['no-such-command']) == 1


def test_app_entry_point_delegates_to_cli(tmp_path):
    missing = str(tmp_path / 'missing.flpc')
    assert app_main(['eval', '--gt', missing, '--pred', missing, '--n-cls', '2']) == 2
