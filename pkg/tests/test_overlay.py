import numpy as np
import pytest

from src.fuselab.calib import CalibrationRig, CameraIntrinsics, CameraSpec, Extrinsics, project_camera
from src.fuselab.errors import InvalidInputError
from src.fuselab.fusion import FeatureMap
from src.fuselab.overlay import CHECKER_SHADES, PALETTE, UNLABELED_COLOR, checkerboard, read_ppm, render_overlay, write_ppm
from src.fuselab.pointcloud import LabelArray, PointCloud


@pytest.fixture
def wide_rig():
    intrinsics = CameraIntrinsics.from_pinhole(40.0, 40.0, 32.0, 24.0)
    return CalibrationRig((CameraSpec(intrinsics, Extrinsics.identity(), 64, 48, 'front'),))


@pytest.fixture
def scene_cloud(rng):
    xyz = np.column_stack([rng.uniform(-3, 3, 50), rng.uniform(-2, 2, 50), rng.uniform(5, 10, 50)])
    return PointCloud(xyz)


def test_level_zero_dots_follow_projection(wide_rig, scene_cloud):
    image = render_overlay(scene_cloud, wide_rig, 0)
    projection = project_camera(scene_cloud, wide_rig, 0)
    assert set(image.point_index.tolist()) == set(np.flatnonzero(projection.valid).tolist())
    np.testing.assert_array_equal(image.dots[:, 0], np.floor(projection.u[image.point_index]))
    np.testing.assert_array_equal(image.dots[:, 1], np.floor(projection.v[image.point_index]))
    assert (image.height, image.width) == (48, 64)


def test_weak_calibration_moves_dots(wide_rig, scene_cloud):
    well = render_overlay(scene_cloud, wide_rig, 0, level=0)
    weak = render_overlay(scene_cloud, wide_rig, 0, level=3, seed=21)
    same_points = np.array_equal(well.point_index, weak.point_index)
    assert not (same_points and np.array_equal(well.dots, weak.dots))


def test_points_outside_the_image_are_not_drawn(wide_rig):
    cloud = PointCloud(np.array([[0.0, 0.0, 5.0], [100.0, 0.0, 5.0], [0.0, 0.0, -5.0]]))
    image = render_overlay(cloud, wide_rig, 0, dot_radius=0)
    assert image.point_index.tolist() == [0]
    assert image.dots.tolist() == [[32, 24]]


def test_dot_colors_and_occlusion(wide_rig):
    cloud = PointCloud(np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 10.0]]))
    labels = LabelArray(np.array([0, 1]), 2)
    image = render_overlay(cloud, wide_rig, 0, labels, dot_radius=0)
    np.testing.assert_array_equal(image.pixels[24, 32], PALETTE[0])
    # 24 // 32 + 33 // 32 is odd
    np.testing.assert_array_equal(image.pixels[24, 33], [CHECKER_SHADES[1]] * 3)

    unlabeled = render_overlay(cloud, wide_rig, 0, dot_radius=1)
    np.testing.assert_array_equal(unlabeled.pixels[23:26, 31:34].reshape(-1, 3), [UNLABELED_COLOR] * 9)


def test_feature_map_background(wide_rig):
    feature_map = FeatureMap(0, np.arange(48, dtype=float).reshape(1, 6, 8), stride=8)
    cloud = PointCloud(np.array([[0.0, 0.0, -1.0]]))
    image = render_overlay(cloud, wide_rig, 0, feature_map=feature_map)
    assert image.point_index.size == 0
    assert image.pixels[0, 0, 0] == 0
    assert image.pixels[47, 63, 0] == 255
    assert image.pixels[8, 0, 0] == round(8 / 47 * 255)
    assert image.pixels[8, 7, 0] == image.pixels[15, 0, 0]


def test_render_argument_checks(wide_rig, scene_cloud):
    with pytest.raises(InvalidInputError):
        render_overlay(scene_cloud, wide_rig, 1)
    with pytest.raises(InvalidInputError):
        render_overlay(scene_cloud, wide_rig, 0, dot_radius=-1)
    with pytest.raises(InvalidInputError):
        render_overlay(scene_cloud, wide_rig, 0, level=4)


def test_ppm_file(tmp_path):
    pixels = checkerboard(40, 20, size=8)
    path = write_ppm(pixels, tmp_path / 'board.ppm')
    assert path.read_bytes().startswith(b'P6\n40 20\n255\n')
    np.testing.assert_array_equal(read_ppm(path), pixels)


def test_ppm_rejects_bad_input(tmp_path):
    with pytest.raises(InvalidInputError):
        write_ppm(np.zeros((4, 4), dtype=np.uint8), tmp_path / 'gray.ppm')
    (tmp_path / 'ascii.ppm').write_bytes(b'P3\n1 1\n255\n0 0 0\n')
    with pytest.raises(InvalidInputError):
        read_ppm(tmp_path / 'ascii.ppm')
