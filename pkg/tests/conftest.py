import numpy as np
import pytest

from implicit_depth.geometry import CameraIntrinsics, Pose


@pytest.fixture
def K():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=47.5, cy=31.5, width=96, height=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def translated(x=0.0, y=0.0, z=0.0) -> Pose:
    return Pose(np.eye(3), np.array([x, y, z], dtype=float))
