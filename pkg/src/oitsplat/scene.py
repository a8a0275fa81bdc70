"""Gaussian scene representation, SH appearance and the OIT weight."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import InvalidParameterError

SH_DEGREE = 3
SH_COEFFS = (SH_DEGREE + 1) ** 2

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

# softplus(SH_C0 * WEIGHT_DC_INIT) == 1.0
WEIGHT_DC_INIT = float(np.log(np.e - 1.0) / SH_C0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softplus(x):
    x = np.asarray(x)
    return np.logaddexp(0.0, x)


def inverse_sigmoid(y):
    y = np.asarray(y)
    return np.log(y / (1.0 - y))


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis up to degree 3 for directions ``(..., 3)``.

    Returns an array of shape ``(..., 16)`` in the usual 3DGS ordering
    (index ``l*l + l + m``).
    """
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty(dirs.shape[:-1] + (SH_COEFFS,), dtype=np.result_type(dirs, np.float32))
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * xy
    out[..., 5] = SH_C2[1] * yz
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * xz
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = SH_C3[1] * xy * z
    out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_jacobian(dirs: np.ndarray) -> np.ndarray:
    """Partial derivatives of :func:`sh_basis` w.r.t. the raw (x, y, z).

    Shape ``(..., 16, 3)``. The basis is treated as a polynomial in the
    direction components; chaining through normalization is the caller's job.
    """
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    zero = np.zeros_like(x)
    c2, c3 = SH_C2, SH_C3
    rows = [
        (zero, zero, zero),
        (zero, zero - SH_C1, zero),
        (zero, zero, zero + SH_C1),
        (zero - SH_C1, zero, zero),
        (c2[0] * y, c2[0] * x, zero),
        (zero, c2[1] * z, c2[1] * y),
        (-2.0 * c2[2] * x, -2.0 * c2[2] * y, 4.0 * c2[2] * z),
        (c2[3] * z, zero, c2[3] * x),
        (2.0 * c2[4] * x, -2.0 * c2[4] * y, zero),
        (6.0 * c3[0] * xy, c3[0] * (3.0 * xx - 3.0 * yy), zero),
        (c3[1] * yz, c3[1] * xz, c3[1] * xy),
        (-2.0 * c3[2] * xy, c3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * c3[2] * yz),
        (-6.0 * c3[3] * xz, -6.0 * c3[3] * yz, c3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)),
        (c3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * c3[4] * xy, 8.0 * c3[4] * xz),
        (2.0 * c3[5] * xz, -2.0 * c3[5] * yz, c3[5] * (xx - yy)),
        (c3[6] * (3.0 * xx - 3.0 * yy), -6.0 * c3[6] * xy, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh(coeffs: np.ndarray, direction: np.ndarray, color: bool = False) -> np.ndarray:
    """Evaluate ``sum_j coeffs[j] * Y_j(direction)``.

    ``coeffs`` is ``(16, k)`` (or batched ``(N, 16, k)`` with ``(N, 3)``
    directions). With ``color=True`` the 3DGS convention applies: the result
    is offset by 0.5 and clamped below at zero.
    """
    coeffs = np.asarray(coeffs)
    direction = np.asarray(direction)
    _check_finite("coeffs", coeffs)
    _check_finite("direction", direction)
    norms = np.linalg.norm(direction, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise InvalidParameterError("direction must be unit length")
    basis = sh_basis(direction)
    out = np.einsum("...j,...jk->...k", basis, coeffs)
    if color:
        out = np.maximum(out + 0.5, 0.0)
    return out


# ---------------------------------------------------------------------------
# Rotations / covariance
# ---------------------------------------------------------------------------


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from ``(..., 4)`` quaternions stored as (w, x, y, z).

    Quaternions are normalized first, so the map is defined for any nonzero q.
    """
    q = np.asarray(q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def rotmat_vjp(q: np.ndarray, dL_dR: np.ndarray) -> np.ndarray:
    """Pull ``dL/dR`` back to the raw (unnormalized) quaternion."""
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = dL_dR
    gw = 2.0 * (
        -z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
        - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1]
    )
    gx = 2.0 * (
        y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2.0 * x * G[..., 1, 1]
        - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2.0 * x * G[..., 2, 2]
    )
    gy = 2.0 * (
        -2.0 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
        + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2.0 * y * G[..., 2, 2]
    )
    gz = 2.0 * (
        -2.0 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
        - 2.0 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1]
    )
    g = np.stack([gw, gx, gy, gz], axis=-1)
    return (g - qn * np.sum(qn * g, axis=-1, keepdims=True)) / norm


def covariance3d(quat: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """``R S S^T R^T`` for unit quaternion(s) and positive scale(s).

    Accepts a single Gaussian (``(4,)``, ``(3,)``) or batches.
    """
    quat = np.asarray(quat)
    scale = np.asarray(scale)
    _check_finite("quat", quat)
    _check_finite("scale", scale)
    if np.any(np.abs(np.linalg.norm(quat, axis=-1) - 1.0) > 1e-5):
        raise InvalidParameterError("quaternion must be unit length")
    if np.any(scale <= 0):
        raise InvalidParameterError("scale must be positive")
    R = quat_to_rotmat(quat)
    M = R * scale[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def oit_weight(depth, direction, sigma: float, weight_sh) -> float:
    """Per-splat blending weight ``max(0, 1 - d/sigma) * softplus(v(dir))``.

    Exactly zero once ``depth >= sigma``.
    """
    if sigma <= 0:
        raise InvalidParameterError("sigma must be positive")
    ramp = np.maximum(0.0, 1.0 - np.asarray(depth) / sigma)
    v = eval_sh(np.asarray(weight_sh)[..., None], direction)[..., 0]
    return ramp * softplus(v)


# ---------------------------------------------------------------------------
# Scene container
# ---------------------------------------------------------------------------


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian scene.

    ``log_scale`` and ``opacity_logit`` hold unconstrained parameters; the
    shared ``sigma`` is stored directly and optimized through ``log(sigma)``.
    """

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh_color: np.ndarray
    weight_sh: np.ndarray
    sigma: float = 1.0

    PER_GAUSSIAN = ("mu", "quat", "log_scale", "opacity_logit", "sh_color", "weight_sh")

    def __post_init__(self):
        n = self.mu.shape[0]
        expected = {
            "mu": (n, 3),
            "quat": (n, 4),
            "log_scale": (n, 3),
            "opacity_logit": (n,),
            "sh_color": (n, SH_COEFFS, 3),
            "weight_sh": (n, SH_COEFFS),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, expected {shape}")
        if not self.sigma > 0:
            raise InvalidParameterError("sigma must be positive")
        self.sigma = float(self.sigma)

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def __len__(self) -> int:
        return self.count

    @property
    def dtype(self):
        return self.mu.dtype

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @classmethod
    def empty(cls, dtype=np.float32, sigma: float = 1.0) -> "GaussianCloud":
        return cls.zeros(0, dtype=dtype, sigma=sigma)

    @classmethod
    def zeros(cls, n: int, dtype=np.float32, sigma: float = 1.0) -> "GaussianCloud":
        quat = np.zeros((n, 4), dtype=dtype)
        quat[:, 0] = 1.0
        weight_sh = np.zeros((n, SH_COEFFS), dtype=dtype)
        weight_sh[:, 0] = WEIGHT_DC_INIT
        return cls(
            mu=np.zeros((n, 3), dtype=dtype),
            quat=quat,
            log_scale=np.zeros((n, 3), dtype=dtype),
            opacity_logit=np.zeros(n, dtype=dtype),
            sh_color=np.zeros((n, SH_COEFFS, 3), dtype=dtype),
            weight_sh=weight_sh,
            sigma=sigma,
        )

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in self.PER_GAUSSIAN}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.arrays().items()}, sigma=self.sigma)

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            **{k: v.astype(dtype, copy=True) for k, v in self.arrays().items()}, sigma=self.sigma
        )

    def select(self, index) -> "GaussianCloud":
        """Subset by boolean mask or integer index array (copies)."""
        return GaussianCloud(
            **{k: np.ascontiguousarray(v[index]) for k, v in self.arrays().items()},
            sigma=self.sigma,
        )

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            **{
                k: np.concatenate([v, getattr(other, k).astype(v.dtype)])
                for k, v in self.arrays().items()
            },
            sigma=self.sigma,
        )

    def normalize_quats(self, index=None) -> None:
        if index is None:
            self.quat /= np.linalg.norm(self.quat, axis=1, keepdims=True)
        else:
            q = self.quat[index]
            self.quat[index] = q / np.linalg.norm(q, axis=1, keepdims=True)

    def check_finite(self) -> None:
        for name, arr in self.arrays().items():
            _check_finite(name, arr)
        _check_finite("sigma", np.asarray(self.sigma))

    def fingerprint(self, index=None) -> str:
        """SHA-256 over the raw bytes of every per-Gaussian field."""
        import hashlib

        h = hashlib.sha256()
        for name in self.PER_GAUSSIAN:
            arr = getattr(self, name)
            if index is not None:
                arr = arr[index]
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def allclose(self, other: "GaussianCloud", rtol=0.0, atol=0.0) -> bool:
        if self.count != other.count or self.sigma != other.sigma:
            return False
        return all(
            np.allclose(getattr(self, k), getattr(other, k), rtol=rtol, atol=atol)
            for k in self.PER_GAUSSIAN
        )
