import numpy as np
import pytest

from oitsplat.camera import Camera
from oitsplat.io import FixtureSpec, generate_fixture, random_cloud
from oitsplat.scene import GaussianCloud, inverse_sigmoid


def make_scene(seed=0, n=30, size=24, dtype=np.float64):
    """Random Gaussians in front of an axis-aligned camera at the origin."""
    rng = np.random.default_rng(seed)
    c = GaussianCloud.zeros(n, dtype=np.float64, sigma=8.0)
    z = rng.uniform(2.0, 5.0, n)
    c.mu[:, 0] = rng.uniform(-0.5, 0.5, n) * z
    c.mu[:, 1] = rng.uniform(-0.5, 0.5, n) * z
    c.mu[:, 2] = z
    c.log_scale[:] = np.log(0.25) + 0.4 * rng.standard_normal((n, 3))
    c.quat[:] = rng.standard_normal((n, 4))
    c.normalize_quats()
    c.opacity_logit[:] = inverse_sigmoid(rng.uniform(0.2, 0.95, n))
    c.sh_color[:] = 0.3 * rng.standard_normal((n, 16, 3))
    c.weight_sh[:] += 0.5 * rng.standard_normal((n, 16))
    f = 1.1 * size
    cam = Camera(size, size, f, f, size / 2.0, size / 2.0, np.eye(4))
    return c.astype(dtype), cam


@pytest.fixture
def scene64():
    return make_scene(0, dtype=np.float64)


@pytest.fixture
def scene32():
    return make_scene(0, dtype=np.float32)


@pytest.fixture(scope="session")
def small_fixture():
    """100 Gaussians, 10 views at 32x32."""
    return generate_fixture(FixtureSpec(n_gaussians=100, n_views=10, resolution=32, seed=3))


@pytest.fixture(scope="session")
def default_fixture():
    return generate_fixture(FixtureSpec())
