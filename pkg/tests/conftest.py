import numpy as np
import pytest

from mapvins.geometry import Pose, quat_normalize, rot_to_quat
from mapvins.vision import CameraCalibration


def random_quat(rng):
    return quat_normalize(rng.normal(size=4))


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)):
    """Pose {G}->{B} whose +z body axis points from position to target."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=float), z)
    n = np.linalg.norm(x)
    if n < 1e-9:
        x = np.cross([0.0, 1.0, 0.0], z)
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(z, x)
    R_GtoB = np.vstack([x, y, z])  # rows are body axes in {G}
    return Pose(rot_to_quat(R_GtoB), position)


@pytest.fixture
def default_calib():
    return CameraCalibration()


@pytest.fixture
def offset_calib():
    rng = np.random.default_rng(99)
    return CameraCalibration(
        q_CfromI=random_quat(rng),
        p_IinC=np.array([0.02, -0.03, 0.01]),
        fx=458.0, fy=460.0, cx=210.0, cy=118.0,
        width=424, height=240, sigma_px=1.0,
    )
