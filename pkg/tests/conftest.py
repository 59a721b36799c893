import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.spatial.transform import Rotation

from epimvs.geometry import CameraModel

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_K(f=400.0, cx=159.5, cy=127.5, fy=None):
    return np.array([[f, 0.0, cx], [0.0, f if fy is None else fy, cy], [0.0, 0.0, 1.0]])


def random_camera(rng, width=320, height=256, max_angle=0.3, max_shift=100.0):
    """Camera with a small random rotation and translation around identity."""
    rot = Rotation.from_rotvec(rng.uniform(-max_angle, max_angle, 3)).as_matrix()
    t = rng.uniform(-max_shift, max_shift, 3)
    f = rng.uniform(300.0, 600.0)
    K = make_K(f, rng.uniform(0.4, 0.6) * width, rng.uniform(0.4, 0.6) * height, f * rng.uniform(0.95, 1.05))
    return CameraModel(K, rot, t, width, height)


def identity_camera(width=320, height=256, f=400.0):
    return CameraModel(make_K(f, (width - 1) / 2, (height - 1) / 2), np.eye(3), np.zeros(3), width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
