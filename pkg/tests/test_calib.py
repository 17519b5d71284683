import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src.fuselab.calib import (
    LEVEL_RANGES,
    CalibrationRig,
    CameraIntrinsics,
    CameraSpec,
    DisturbanceSpec,
    Extrinsics,
    PerturbationLevel,
    compose_disturbance,
    load_rig,
    perturb_extrinsics,
    project_points,
    project_rig,
    rig_from_dict,
    sample_disturbance,
    save_rig,
)
from src.fuselab.errors import InvalidInputError, RigFormatError
from src.fuselab.pointcloud import PointCloud


def random_extrinsics(rng):
    rotation = Rotation.from_quat(rng.normal(size=4)).as_matrix()
    return Extrinsics.from_rotation_translation(rotation, rng.uniform(-5, 5, 3))


def scalar_project(point, intrinsics, extrinsics):
    x, y, z = point
    cam = [sum(extrinsics[r][c] * v for c, v in enumerate((x, y, z, 1.0))) for r in range(4)]
    hom = [sum(intrinsics[r][c] * cam[c] for c in range(4)) for r in range(3)]
    return hom[0] / hom[2], hom[1] / hom[2], cam[2]


def test_zero_disturbance_is_identity():
    assert np.array_equal(compose_disturbance(DisturbanceSpec(0.0, 0.0, 0.0)), np.eye(4))


def test_x_rotation_maps_y_to_z():
    e = compose_disturbance(DisturbanceSpec(90.0, 0.0, 0.0))
    np.testing.assert_allclose(e[:3, :3] @ [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], atol=1e-12)


def test_disturbance_matches_independent_rotation_oracle():
    e = compose_disturbance(DisturbanceSpec(1.0, 2.0, 3.0))
    oracle = Rotation.from_euler('XYZ', [1.0, 2.0, 3.0], degrees=True).as_matrix()
    np.testing.assert_allclose(e[:3, :3], oracle, atol=1e-12)
    assert np.array_equal(e[:3, 3], np.zeros(3))


def test_disturbance_rotation_invariants(rng):
    for _ in range(1000):
        spec = DisturbanceSpec(*rng.uniform(-45.0, 45.0, 3))
        r = compose_disturbance(spec)[:3, :3]
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9
        assert abs(np.linalg.det(r) - 1.0) < 1e-9


@pytest.mark.parametrize('angles', [(math.nan, 0, 0), (0, math.inf, 0), (0, 0, -math.inf)])
def test_disturbance_spec_rejects_non_finite_angles(angles):
    with pytest.raises(InvalidInputError):
        DisturbanceSpec(*angles)


def test_large_finite_angles_compose():
    for angles in [(180.0, 0.0, 0.0), (0.0, -270.0, 0.0), (30.0, 60.0, 720.0)]:
        r = compose_disturbance(DisturbanceSpec(*angles))[:3, :3]
        oracle = Rotation.from_euler('XYZ', angles, degrees=True).as_matrix()
        np.testing.assert_allclose(r, oracle, atol=1e-12)


def test_sanity_bound_is_opt_in():
    spec = DisturbanceSpec(0.0, 0.0, 46.0)
    with pytest.raises(InvalidInputError):
        spec.require_within()
    assert DisturbanceSpec(1.0, -4.0, 2.0).require_within() == DisturbanceSpec(1.0, -4.0, 2.0)


def test_perturb_with_zero_angles_is_identity(rng):
    t = random_extrinsics(rng)
    perturbed = perturb_extrinsics(t, DisturbanceSpec())
    assert np.max(np.abs(perturbed.matrix - t.matrix)) < 1e-12


def test_perturb_identity_absorbs():
    spec = DisturbanceSpec(1.0, -2.0, 0.5)
    np.testing.assert_array_equal(perturb_extrinsics(Extrinsics.identity(), spec).matrix, compose_disturbance(spec))


def test_perturb_keeps_translation():
    t = Extrinsics.from_rotation_translation(np.eye(3), [1.0, 2.0, 3.0])
    perturbed = perturb_extrinsics(t, DisturbanceSpec(1.0, 1.0, 1.0))
    np.testing.assert_allclose(perturbed.translation, [1.0, 2.0, 3.0], atol=1e-15)


def test_perturbed_projection_equals_prerotated_points(rng):
    intr = CameraIntrinsics.from_pinhole(500.0, 480.0, 320.0, 240.0)
    t = random_extrinsics(rng)
    spec = DisturbanceSpec(3.0, -1.5, 2.0)
    points = rng.uniform(-20, 20, (50, 3))
    rotated = points @ compose_disturbance(spec)[:3, :3].T
    a = project_points(points, intr, perturb_extrinsics(t, spec), 640, 480)
    b = project_points(rotated, intr, t, 640, 480)
    front = a.depth > 1.0
    np.testing.assert_allclose(a.u[front], b.u[front], atol=1e-9)
    np.testing.assert_allclose(a.v[front], b.v[front], atol=1e-9)


def test_level_table():
    assert LEVEL_RANGES == {0: 0.0, 1: 1.0, 2: 2.0, 3: 4.0}
    assert [PerturbationLevel(k).range for k in range(4)] == [0.0, 1.0, 2.0, 4.0]
    with pytest.raises(InvalidInputError):
        PerturbationLevel(4)
    with pytest.raises(InvalidInputError):
        PerturbationLevel(True)


def test_level_zero_never_disturbs():
    for seed in range(50):
        spec = sample_disturbance(0, seed, seed * 7, 3)
        assert spec.as_tuple() == (0.0, 0.0, 0.0)
        assert np.array_equal(compose_disturbance(spec), np.eye(4))


@pytest.mark.parametrize('level', [1, 2, 3])
def test_sampled_angles_respect_level_bounds(level):
    bound = LEVEL_RANGES[level]
    angles = np.array([sample_disturbance(level, 99, frame, 0).as_tuple() for frame in range(10000)])
    assert np.all(np.abs(angles) <= bound)
    # Uniform draws should get close to both ends of the range.
    assert angles.max() > 0.99 * bound and angles.min() < -0.99 * bound


def test_levels_are_nested():
    for frame in range(20):
        specs = [np.array(sample_disturbance(level, 5, frame, 1).as_tuple()) for level in (1, 2, 3)]
        np.testing.assert_allclose(specs[1], 2.0 * specs[0], rtol=1e-12)
        np.testing.assert_allclose(specs[2], 4.0 * specs[0], rtol=1e-12)


def test_sample_disturbance_is_deterministic():
    a = sample_disturbance(1, 2024, 3, 0)
    assert a == sample_disturbance(1, 2024, 3, 0)
    assert a != sample_disturbance(1, 2024, 3, 1)
    assert a != sample_disturbance(1, 2025, 3, 0)


def test_sample_disturbance_folds_negative_ids():
    spec = sample_disturbance(2, 0, -1, -3)
    assert all(abs(angle) <= 2.0 for angle in spec.as_tuple())
    assert spec == sample_disturbance(2, 0, -1, -3)
    assert spec == sample_disturbance(2, 0, 2**64 - 1, 2**64 - 3)
    assert spec != sample_disturbance(2, 0, 1, 3)


def test_unit_focal_projection(unit_rig, sample_cloud):
    camera = unit_rig[0]
    result = project_points(sample_cloud, camera.intrinsics, camera.extrinsics, 10, 10)
    assert result[0] == (1.0, 2.0, 2.0, True)
    assert result[1].valid is False
    assert result[2] == (1.0, 1.0, 1.0, True)
    assert len(result.to_list()) == 3
    table = result.to_dataframe()
    assert list(table.columns) == ['index', 'u', 'v', 'depth', 'valid']


def test_projection_flags_out_of_image_points():
    intr = CameraIntrinsics.from_pinhole(1.0, 1.0, 0.0, 0.0)
    result = project_points(np.array([[20.0, 1.0, 1.0], [-1.0, 1.0, 1.0], [0.5, 0.5, 1e-7]]),
                            intr, Extrinsics.identity(), 10, 10)
    assert not result.valid.any()


def test_projection_matches_scalar_oracle(rng):
    for _ in range(1000):
        intr = CameraIntrinsics.from_pinhole(*rng.uniform(100, 1000, 2), *rng.uniform(0, 800, 2))
        extr = random_extrinsics(rng)
        point = rng.uniform(-30, 30, 3)
        result = project_points(point[None, :], intr, extr, 1600, 1200)
        u, v, depth = scalar_project(point, intr.matrix.tolist(), extr.matrix.tolist())
        assert abs(result.depth[0] - depth) < 1e-9
        if abs(depth) > 1e-3:
            assert abs(result.u[0] - u) < 1e-9 * max(1.0, abs(u))
            assert abs(result.v[0] - v) < 1e-9 * max(1.0, abs(v))


def test_intrinsics_validation():
    with pytest.raises(InvalidInputError):
        CameraIntrinsics.from_pinhole(-1.0, 1.0, 0.0, 0.0)
    bad = CameraIntrinsics.from_pinhole(1.0, 1.0, 0.0, 0.0).matrix.copy()
    bad[2, 3] = 1.0
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(bad)


def test_extrinsics_validation():
    skewed = np.eye(4)
    skewed[0, 1] = 0.1
    with pytest.raises(InvalidInputError):
        Extrinsics(skewed)
    mirrored = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(InvalidInputError):
        Extrinsics(mirrored)


def test_extrinsics_inverse_round_trip(rng):
    t = random_extrinsics(rng)
    np.testing.assert_allclose(t.compose(t.inverse()).matrix, np.eye(4), atol=1e-12)


def test_rig_perturbed_level_zero_returns_same_rig(unit_rig):
    assert unit_rig.perturbed(0, 1, 2) is unit_rig
    moved = unit_rig.perturbed(3, 1, 2)
    assert moved is not unit_rig
    assert not np.array_equal(moved[0].extrinsics.matrix, unit_rig[0].extrinsics.matrix)


def test_project_rig_returns_one_result_per_camera(unit_rig, sample_cloud):
    two = CalibrationRig(unit_rig.cameras * 2)
    results = project_rig(sample_cloud, two)
    assert len(results) == 2
    np.testing.assert_array_equal(results[0].u, results[1].u)


def test_rig_yaml_round_trip_is_exact(tmp_path, rng):
    intr = CameraIntrinsics.from_pinhole(1266.417203046554, 1266.417203046554, 816.2670197447984, 491.50706579294757)
    cameras = tuple(
        CameraSpec(intr, random_extrinsics(rng), 1600, 900, f'cam_{k}') for k in range(3)
    )
    rig = CalibrationRig(cameras)
    path = save_rig(rig, tmp_path / 'rig.yaml')
    loaded = load_rig(path)
    assert loaded.m == 3
    for a, b in zip(rig.cameras, loaded.cameras):
        assert np.array_equal(a.intrinsics.matrix, b.intrinsics.matrix)
        assert np.array_equal(a.extrinsics.matrix, b.extrinsics.matrix)
        assert (a.width, a.height, a.name) == (b.width, b.height, b.name)


def test_rig_format_errors(tmp_path):
    with pytest.raises(RigFormatError):
        rig_from_dict({'cameras': [{'intrinsics': [1, 2, 3], 'extrinsics': list(range(16)), 'width': 1, 'height': 1}]})
    with pytest.raises(RigFormatError):
        rig_from_dict({'cams': []})
    broken = tmp_path / 'broken.yaml'
    broken.write_text('cameras: [unclosed', encoding='utf-8')
    with pytest.raises(RigFormatError):
        load_rig(broken)


def test_projection_accepts_point_cloud(sample_cloud):
    assert isinstance(sample_cloud, PointCloud)
    intr = CameraIntrinsics.from_pinhole(1.0, 1.0, 0.0, 0.0)
    assert len(project_points(sample_cloud, intr, Extrinsics.identity(), 10, 10)) == 3
