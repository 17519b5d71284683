import numpy as np
import pytest
from click.testing import CliRunner

from src.fuselab.calib import CalibrationRig, CameraIntrinsics, CameraSpec, Extrinsics
from src.fuselab.pointcloud import LabelArray, PointCloud

SAMPLE_POINTS = [(2.0, 4.0, 2.0), (0.0, 0.0, -1.0), (1.0, 1.0, 1.0)]


@pytest.fixture
def unit_rig():
    # Unit-focal pinhole at the LiDAR origin, 10 x 10 image.
    intrinsics = CameraIntrinsics.from_pinhole(1.0, 1.0, 0.0, 0.0)
    return CalibrationRig((CameraSpec(intrinsics, Extrinsics.identity(), 10, 10, 'unit'),))


@pytest.fixture
def sample_cloud():
    return PointCloud(np.array(SAMPLE_POINTS), np.array([0.1, 0.2, 0.3]))


@pytest.fixture
def sample_labels():
    return LabelArray(np.array([0, 1, 1]), 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def runner():
    return CliRunner()
