import numpy as np
import pytest

from posedesc import geometry


def random_rotation(rng, max_deg=30.0):
    axis = rng.normal(size=3)
    return geometry.rotation_about(axis, rng.uniform(-max_deg, max_deg))


def synthetic_two_view(rng, n=50, max_deg=30.0):
    """Random pose, intrinsics and noiseless projections of points in front of both cameras."""
    K1 = geometry.CameraIntrinsics(rng.uniform(100, 200), rng.uniform(100, 200), rng.uniform(50, 70), rng.uniform(50, 70))
    K2 = geometry.CameraIntrinsics(rng.uniform(100, 200), rng.uniform(100, 200), rng.uniform(50, 70), rng.uniform(50, 70))
    R = random_rotation(rng, max_deg)
    t = rng.normal(size=3)
    t = 0.5 * t / np.linalg.norm(t)
    pose = geometry.RelativePose(R, t)
    X = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(4, 8, n)])
    X2 = X @ R.T + t
    keep = X2[:, 2] > 0.5
    X, X2 = X[keep], X2[keep]
    x1 = (X @ K1.K.T)[:, :2] / X[:, 2:3]
    x2 = (X2 @ K2.K.T)[:, :2] / X2[:, 2:3]
    return K1, K2, pose, x1, x2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
