import numpy as np
import pytest

from flowins.geometry import CameraModel, quat_from_matrix
from flowins.simulator import NoiseSpec, TrajectorySpec, simulate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_dataset():
    """30 s noisy circle, shared by the slower tests."""
    return simulate_dataset(TrajectorySpec(duration=30.0), NoiseSpec(seed=3))


@pytest.fixture(scope="session")
def clean_dataset():
    return simulate_dataset(TrajectorySpec(duration=10.0), NoiseSpec.noiseless(seed=5))


def look_at(center, target, roll=0.0):
    """Camera-to-world rotation (columns are camera axes) looking at ``target``."""
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c, s = np.cos(roll), np.sin(roll)
    x, y = c * x + s * y, -s * x + c * y
    return np.column_stack([x, y, z])


def pinhole(K, R_wc, c):
    """``K [R^T | -R^T c]`` for a camera with axes ``R_wc`` centred at ``c``."""
    return K @ np.hstack([R_wc.T, (-R_wc.T @ c)[:, None]])


def random_two_view(rng, K=None):
    """Two projection matrices with a lateral baseline and a point seen by both."""
    if K is None:
        K = np.array([[500.0, 0, 255.5], [0, 500.0, 341.0], [0, 0, 1]])
    c1 = rng.uniform(-5, 5, 3)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    X = c1 + d * rng.uniform(4.0, 20.0)
    side = np.cross(d, rng.normal(size=3))
    side /= np.linalg.norm(side)
    c2 = c1 + side * rng.uniform(0.5, 2.0) + d * rng.uniform(-0.3, 0.3)
    jitter = rng.normal(size=3) * 0.5
    R1 = look_at(c1, X + jitter, rng.uniform(-np.pi, np.pi))
    R2 = look_at(c2, X - jitter, rng.uniform(-np.pi, np.pi))
    return pinhole(K, R1, c1), pinhole(K, R2, c2), X


def imu_pose_for_camera(R_wc, c, cam):
    """IMU pose (p, q) that puts ``cam`` at rotation ``R_wc`` and centre ``c``."""
    R_wb = R_wc @ cam.R_imu_cam.T
    return c - R_wb @ cam.t_imu_cam, quat_from_matrix(R_wb)


@pytest.fixture
def lever_camera():
    R = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return CameraModel(480.0, 470.0, 250.0, 330.0, 512, 683, R, [0.1, -0.05, 0.2])
