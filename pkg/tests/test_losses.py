import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from oitsplat.errors import ContractViolation
from oitsplat.losses import loss, psnr, ssim, ssim_with_grad


def ssim_oracle(x, y):
    """Gaussian-window SSIM (sigma 1.5, 11 taps, zero padding), per channel."""
    f = lambda a: gaussian_filter(a, sigma=(1.5, 1.5, 0), truncate=5.0 / 1.5, mode="constant")
    c1, c2 = 0.01**2, 0.03**2
    mx, my = f(x), f(y)
    vx, vy, cxy = f(x * x) - mx**2, f(y * y) - my**2, f(x * y) - mx * my
    return np.mean((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))


def test_ssim_matches_oracle():
    rng = np.random.default_rng(0)
    x, y = rng.random((20, 17, 3)), rng.random((20, 17, 3))
    assert ssim(x, y) == pytest.approx(ssim_oracle(x, y), rel=1e-12)


def test_identical_images_give_zero_loss_and_gradient():
    x = np.random.default_rng(1).random((16, 16, 3))
    value, g = loss(x, x)
    assert value == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(g)) < 1e-12
    assert ssim(x, x) == pytest.approx(1.0)


def test_constant_images_closed_form():
    # the L1 part is exact; zero padding makes the SSIM part border-dependent
    x = np.full((12, 12, 3), 0.3)
    y = np.full((12, 12, 3), 0.5)
    value, _ = loss(x, y, lambda_ssim=0.0)
    assert value == pytest.approx(0.2)
    value, _ = loss(x, y)
    assert value == pytest.approx(0.8 * 0.2 + 0.2 * (1 - ssim_oracle(x, y)))


@pytest.mark.parametrize("lam", [0.0, 0.2, 1.0])
def test_loss_gradient_matches_finite_differences(lam):
    rng = np.random.default_rng(2)
    x, y = rng.random((9, 10, 3)), rng.random((9, 10, 3))
    _, g = loss(x, y, lam)
    h = 1e-6
    for idx in [(0, 0, 0), (4, 5, 1), (8, 9, 2), (3, 0, 2)]:
        e = np.zeros_like(x)
        e[idx] = h
        fd = (loss(x + e, y, lam)[0] - loss(x - e, y, lam)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_ssim_gradient_full_field():
    rng = np.random.default_rng(3)
    x, y = rng.random((6, 7, 3)), rng.random((6, 7, 3))
    _, g = ssim_with_grad(x, y)
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        fd[idx] = (ssim(x + e, y) - ssim(x - e, y)) / (2 * h)
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_psnr_values():
    x = np.zeros((4, 4, 3))
    assert psnr(x, x) == float("inf")
    assert psnr(x, x + 0.1) == pytest.approx(20.0)
    assert psnr(x - 5.0, x) == float("inf")  # clamped to [0, 1] first


def test_shape_mismatch_raises():
    with pytest.raises(ContractViolation):
        loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
