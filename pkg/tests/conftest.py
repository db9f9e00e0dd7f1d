import numpy as np
import pytest

from visilift.scene_io import Camera, GaussianScene

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def origin_camera():
    """Factory for a camera at the origin looking down +z"""

    def make(width=64, height=64, fx=64.0, fy=None):
        return Camera.look_at((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), fx=fx, fy=fx if fy is None else fy,
                              width=width, height=height)

    return make


@pytest.fixture
def make_scene():
    """Factory for a scene of isotropic, unrotated Gaussians"""

    def make(means, sigmas, opacities):
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64).reshape(-1, 1), (n, 3))
        rotations = np.tile(IDENTITY_QUAT, (n, 1))
        opacities = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        return GaussianScene.from_arrays(means, sigmas, rotations, opacities)

    return make


@pytest.fixture
def random_scene(rng):
    """Factory for a random scene in front of an origin camera"""

    def make(n=40, depth=(2.0, 6.0), spread=1.0):
        means = np.column_stack([
            rng.uniform(-spread, spread, n),
            rng.uniform(-spread, spread, n),
            rng.uniform(depth[0], depth[1], n),
        ])
        scales = rng.uniform(0.03, 0.2, (n, 3))
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        opacities = rng.uniform(0.2, 1.0, n)
        return GaussianScene.from_arrays(means, scales, quats, opacities)

    return make
