"""Analytic OIT gradients and a finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from . import kernels
from .camera import Camera
from .errors import ContractViolation
from .rasterizer import Q_EPS, ROUTE_IMAGE, RenderOutput, SplatData
from .scene import GaussianCloud, quat_to_rotmat, rotmat_vjp, sh_basis_jacobian, sigmoid

# Attributes that decide a Gaussian's activeness; "weight" is the weight SH.
ACTIVITY_ATTRIBUTES = ("mu", "quat", "log_scale", "opacity_logit", "sh_color", "weight_sh")


@dataclass
class GradientBuffer:
    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh_color: np.ndarray
    weight_sh: np.ndarray
    log_sigma: float = 0.0
    mu2d: Optional[np.ndarray] = None
    splat_pixel_pairs: int = 0

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(
            mu=np.zeros((n, 3)),
            quat=np.zeros((n, 4)),
            log_scale=np.zeros((n, 3)),
            opacity_logit=np.zeros(n),
            sh_color=np.zeros((n, 16, 3)),
            weight_sh=np.zeros((n, 16)),
            mu2d=np.zeros((n, 2)),
        )

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def per_gaussian(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ACTIVITY_ATTRIBUTES}

    def zero_(self) -> None:
        for arr in self.per_gaussian().values():
            arr[...] = 0.0
        self.mu2d[...] = 0.0
        self.log_sigma = 0.0
        self.splat_pixel_pairs = 0

    def attribute_norms(self) -> Dict[str, np.ndarray]:
        """Per-Gaussian L2 norm of each attribute's gradient."""
        return {
            name: np.sqrt(np.sum(arr.reshape(arr.shape[0], -1) ** 2, axis=1))
            for name, arr in self.per_gaussian().items()
        }

    def check_finite(self) -> None:
        for name, arr in self.per_gaussian().items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        if not np.isfinite(self.log_sigma):
            raise FloatingPointError("non-finite gradient in log_sigma")


def backward_oit(
    cloud: GaussianCloud,
    cam: Camera,
    render: RenderOutput,
    dL_dC: np.ndarray,
    active_mask: Optional[np.ndarray] = None,
    grads: Optional[GradientBuffer] = None,
    backend: Optional[str] = None,
) -> GradientBuffer:
    """Gradients of ``sum(dL_dC * C)`` w.r.t. every parameter of the active splats.

    ``render`` must be the output of the forward pass for the same cloud and
    camera (it carries the retained per-pixel accumulators). Only splats that
    were routed to the image and are in ``active_mask`` receive gradients.
    Results are accumulated into ``grads`` when given.
    """
    acc = render.per_pixel_acc
    splats = render.splats
    if acc is None or splats is None:
        raise ContractViolation("backward needs the retained accumulators of the forward pass")
    if dL_dC.shape != acc.P.shape:
        raise ContractViolation(f"dL_dC shape {dL_dC.shape} does not match image {acc.P.shape}")
    if grads is None:
        grads = GradientBuffer.zeros(cloud.count)

    local = splats.route == ROUTE_IMAGE
    local &= splats.proj.visible
    if active_mask is not None:
        local &= np.asarray(active_mask, dtype=bool)[splats.index]
    local_ids = np.flatnonzero(local)
    if local_ids.size == 0:
        return grads

    covered = acc.Q > 0
    F = acc.P / np.where(covered, np.maximum(acc.Q, Q_EPS), 1.0)[..., None]
    screen = kernels.backward_splats(
        local_ids, splats.proj, splats.opacity, splats.color, splats.weight,
        acc.T, acc.Q, F, np.ascontiguousarray(dL_dC), render.background, backend=backend,
    )
    grads.splat_pixel_pairs += int(screen["pairs"].sum())
    if kernels._resolve(backend) == "numba":
        _chain_to_parameters_nb(cloud, cam, splats, local_ids, screen, grads)
    else:
        _chain_to_parameters(cloud, cam, splats, local_ids, screen, grads)
    return grads


def _chain_to_parameters_nb(cloud, cam, splats: SplatData, ids, screen, grads: GradientBuffer):
    proj = splats.proj
    mu2d = grads.mu2d if grads.mu2d is not None else np.zeros((cloud.count, 2))
    grads.log_sigma += kernels._chain_nb(
        ids.astype(np.int64), splats.index,
        screen["color"], screen["weight"], screen["opacity"], screen["mu2d"], screen["conic"],
        splats.dirs, splats.dist, splats.basis, splats.color_raw, splats.ramp, splats.weight_raw,
        splats.opacity, proj.depth, proj.conic, proj.jacobian, proj.cov_cam, proj.mu_cam,
        cloud.sh_color, cloud.weight_sh, cloud.quat, cloud.log_scale,
        float(cam.fx), float(cam.fy), np.ascontiguousarray(cam.rotation, dtype=np.float64), float(cloud.sigma),
        grads.mu, grads.quat, grads.log_scale, grads.opacity_logit, grads.sh_color, grads.weight_sh, mu2d,
    )


def _chain_to_parameters(cloud, cam, splats: SplatData, ids, screen, grads: GradientBuffer):
    """Pull screen-space gradients back to the 3D parameters (vectorized)."""
    f64 = np.float64
    gidx = splats.index[ids]
    proj = splats.proj
    sigma = cloud.sigma

    d_color = screen["color"][ids]
    d_weight = screen["weight"][ids]
    d_opac = screen["opacity"][ids]
    d_mu2d = screen["mu2d"][ids]
    d_conic = screen["conic"][ids]

    basis = splats.basis[ids].astype(f64)
    dirs = splats.dirs[ids].astype(f64)
    dist = splats.dist[ids].astype(f64)
    basis_jac = sh_basis_jacobian(dirs)  # (m, 16, 3)
    h = cloud.sh_color[gidx].astype(f64)
    v = cloud.weight_sh[gidx].astype(f64)

    # color = max(SH(h, dir) + 0.5, 0)
    g_craw = d_color * (splats.color_raw[ids] > 0)
    grads.sh_color[gidx] += basis[:, :, None] * g_craw[:, None, :]
    g_dir = np.einsum("mjc,mc,mjk->mk", h, g_craw, basis_jac)

    # weight = ramp(depth) * softplus(SH(v, dir))
    ramp = splats.ramp[ids].astype(f64)
    vr = splats.weight_raw[ids].astype(f64)
    sp = np.logaddexp(0.0, vr)
    on_ramp = ramp > 0
    g_vr = d_weight * ramp * sigmoid(vr)
    grads.weight_sh[gidx] += basis * g_vr[:, None]
    g_dir += g_vr[:, None] * np.einsum("mj,mjk->mk", v, basis_jac)
    depth = proj.depth[ids].astype(f64)
    g_depth = np.where(on_ramp, -d_weight * sp / sigma, 0.0)
    grads.log_sigma += float(np.sum(np.where(on_ramp, d_weight * sp * depth / sigma, 0.0)))

    # opacity = sigmoid(logit)
    o = splats.opacity[ids].astype(f64)
    grads.opacity_logit[gidx] += d_opac * o * (1.0 - o)

    # direction = (mu - f) / |mu - f|
    g_mu = (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / dist[:, None]

    # conic = inverse(cov2d)
    a, b, c = (proj.conic[ids, k].astype(f64) for k in range(3))
    Mc = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    Gc = np.stack(
        [np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1), np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)],
        -2,
    )
    G_cov2d = -Mc @ Gc @ Mc

    # cov2d = J cov_cam J^T + lowpass
    J = proj.jacobian[ids].astype(f64)
    cov_cam = proj.cov_cam[ids].astype(f64)
    G_J = 2.0 * G_cov2d @ J @ cov_cam
    G_cov_cam = np.swapaxes(J, 1, 2) @ G_cov2d @ J

    # J and mu2d as functions of the camera-frame mean
    t = proj.mu_cam[ids].astype(f64)
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    iz = 1.0 / tz
    iz2 = iz * iz
    g_t = np.zeros_like(t)
    g_t[:, 0] = d_mu2d[:, 0] * fx * iz - G_J[:, 0, 2] * fx * iz2
    g_t[:, 1] = d_mu2d[:, 1] * fy * iz - G_J[:, 1, 2] * fy * iz2
    g_t[:, 2] = (
        -(d_mu2d[:, 0] * fx * tx + d_mu2d[:, 1] * fy * ty) * iz2
        - G_J[:, 0, 0] * fx * iz2
        - G_J[:, 1, 1] * fy * iz2
        + 2.0 * G_J[:, 0, 2] * fx * tx * iz2 * iz
        + 2.0 * G_J[:, 1, 2] * fy * ty * iz2 * iz
        + g_depth
    )
    Rw = cam.rotation
    g_mu += g_t @ Rw
    grads.mu[gidx] += g_mu

    # cov_world = M M^T, M = R(q) diag(s)
    G_cov = Rw.T @ G_cov_cam @ Rw
    q = cloud.quat[gidx].astype(f64)
    s = np.exp(cloud.log_scale[gidx].astype(f64))
    Rq = quat_to_rotmat(q)
    M = Rq * s[:, None, :]
    G_M = (G_cov + np.swapaxes(G_cov, 1, 2)) @ M
    grads.log_scale[gidx] += np.sum(G_M * Rq, axis=1) * s
    grads.quat[gidx] += rotmat_vjp(q, G_M * s[:, None, :])

    if grads.mu2d is not None:
        grads.mu2d[gidx] += d_mu2d


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

PARAMETERS = ("mu", "quat", "log_scale", "opacity_logit", "sh_color", "weight_sh", "log_sigma")


def get_param(cloud: GaussianCloud, name: str, flat_index: int) -> float:
    if name == "log_sigma":
        return float(np.log(cloud.sigma))
    return float(getattr(cloud, name).reshape(-1)[flat_index])


def set_param(cloud: GaussianCloud, name: str, flat_index: int, value: float) -> None:
    if name == "log_sigma":
        cloud.sigma = float(np.exp(value))
    else:
        getattr(cloud, name).reshape(-1)[flat_index] = value


def finite_diff_oracle(
    cloud: GaussianCloud,
    loss_fn: Callable[[GaussianCloud], float],
    param_selector: Iterable,
    step: float = 1e-5,
    state_fn: Optional[Callable[[GaussianCloud], object]] = None,
) -> Dict[tuple, float]:
    """Central differences ``(L(x+e) - L(x-e)) / 2e`` per selected scalar.

    ``param_selector`` yields ``(name, flat_index)``. When ``state_fn`` is
    given it returns a hashable description of every discrete branch taken
    by the forward pass (culling, alpha clamps, ...); if one side of the
    stencil lands on a different branch, a one-sided difference on the
    consistent side is used instead, and if both differ the entry is NaN.
    """
    if cloud.dtype != np.float64:
        raise ContractViolation("finite differences require a float64 cloud")
    work = cloud.copy()
    out = {}
    base_state = state_fn(work) if state_fn is not None else None
    base_loss = None
    for name, idx in param_selector:
        x0 = get_param(work, name, idx)
        set_param(work, name, idx, x0 + step)
        lp = loss_fn(work)
        sp = state_fn(work) if state_fn is not None else None
        set_param(work, name, idx, x0 - step)
        lm = loss_fn(work)
        sm = state_fn(work) if state_fn is not None else None
        set_param(work, name, idx, x0)
        if state_fn is None or (sp == base_state and sm == base_state):
            out[(name, idx)] = (lp - lm) / (2.0 * step)
            continue
        if base_loss is None:
            base_loss = loss_fn(work)
        if sp == base_state:
            out[(name, idx)] = (lp - base_loss) / step
        elif sm == base_state:
            out[(name, idx)] = (base_loss - lm) / step
        else:
            out[(name, idx)] = float("nan")
    return out


def analytic_as_dict(grads: GradientBuffer) -> Dict[tuple, float]:
    out = {}
    for name in PARAMETERS:
        if name == "log_sigma":
            out[(name, 0)] = grads.log_sigma
            continue
        flat = getattr(grads, name).reshape(-1)
        for i, val in enumerate(flat):
            out[(name, i)] = float(val)
    return out


def branch_state(cloud: GaussianCloud, cam: Camera) -> tuple:
    """Hashable summary of every discrete decision the OIT forward makes.

    Covers visibility, pixel boxes, per-pair alpha skip/clamp, color clamps
    and the weight ramp cutoff; finite differences straddling a change here
    are not valid derivative estimates.
    """
    from .rasterizer import prepare_splats

    s = prepare_splats(cloud, cam)
    p = s.proj
    ids = np.flatnonzero(p.visible)
    gid, px, py = kernels._box_pairs(ids, p.xmin, p.xmax, p.ymin, p.ymax)
    _, _, _, raw = kernels._pair_alpha(gid, px, py, p.mu2d, p.conic, s.opacity)
    pair_state = (raw >= kernels.ALPHA_MIN).astype(np.int8) + (raw > kernels.ALPHA_MAX).astype(np.int8)
    return (
        p.visible.tobytes(),
        np.stack([p.xmin, p.xmax, p.ymin, p.ymax]).tobytes(),
        pair_state.tobytes(),
        (s.color_raw > 0).tobytes(),
        (s.ramp > 0).tobytes(),
    )
