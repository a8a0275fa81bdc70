"""Photometric loss (L1 + D-SSIM) with analytic image gradient, and metrics."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _blur(x):
    # zero padding; the operator is self-adjoint because the kernel is symmetric
    y = correlate1d(x, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _KERNEL, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx = exx - mx * mx
    vy = eyy - my * my
    cxy = exy - mx * my
    A1 = 2.0 * mx * my + C1
    A2 = 2.0 * cxy + C2
    B1 = mx * mx + my * my + C1
    B2 = vx + vy + C2
    return mx, my, A1, A2, B1, B2


def ssim(image: np.ndarray, target: np.ndarray) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    _, _, A1, A2, B1, B2 = _ssim_terms(x, y)
    return float(np.mean(A1 * A2 / (B1 * B2)))


def ssim_with_grad(image: np.ndarray, target: np.ndarray):
    """``(ssim, d ssim / d image)``."""
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    mx, my, A1, A2, B1, B2 = _ssim_terms(x, y)
    s = A1 * A2 / (B1 * B2)
    n = s.size
    inv = 1.0 / (B1 * B2)
    d_mx = 2.0 * my * (A2 - A1) * inv - 2.0 * mx * s * (1.0 / B1 - 1.0 / B2)
    d_exx = -s / B2
    d_exy = 2.0 * A1 * inv
    grad = (_blur(d_mx) + 2.0 * x * _blur(d_exx) + y * _blur(d_exy)) / n
    return float(np.mean(s)), grad


def loss(image: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2):
    """``(1 - l) * L1 + l * (1 - SSIM)`` and its gradient w.r.t. ``image``."""
    if image.shape != target.shape:
        raise ContractViolation(f"image shape {image.shape} != target shape {target.shape}")
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    g = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    value = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, gs = ssim_with_grad(x, y)
        value += lambda_ssim * (1.0 - s)
        g -= lambda_ssim * gs
    return value, g


def mse(image, target) -> float:
    return float(np.mean((np.asarray(image, np.float64) - np.asarray(target, np.float64)) ** 2))


def psnr(image, target) -> float:
    """PSNR in dB on images clamped to [0, 1]."""
    err = mse(np.clip(image, 0.0, 1.0), np.clip(target, 0.0, 1.0))
    if err == 0:
        return float("inf")
    return float(-10.0 * np.log10(err))
