"""Pinhole cameras, EWA projection of Gaussians, and tile binning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .scene import GaussianCloud, quat_to_rotmat

# Screen-space dilation added to both diagonal entries of the 2D covariance.
LOWPASS = 0.3
TILE_SIZE = 16


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray
    near: float = 0.01
    far: float = 100.0
    image_name: Optional[str] = None

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        if not self.near < self.far:
            raise ContractViolation("near must be smaller than far")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise ContractViolation("world_to_cam rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def focal_point(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def shape(self):
        return (self.height, self.width)

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_x_deg=50.0, **kw) -> "Camera":
        """Camera at ``eye`` looking at ``target``; camera frame is x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ eye
        fx = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
        return cls(width, height, fx, fx, width / 2.0, height / 2.0, W, **kw)

    def to_dict(self) -> dict:
        d = {
            "image_name": self.image_name,
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "world_to_cam": [float(v) for v in self.world_to_cam.reshape(-1)],
        }
        if self.near != 0.01 or self.far != 100.0:
            d["near"], d["far"] = self.near, self.far
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        w2c = d["world_to_cam"]
        if len(w2c) != 16:
            raise ContractViolation("world_to_cam must hold 16 row-major floats")
        return cls(
            width=d["width"],
            height=d["height"],
            fx=d["fx"],
            fy=d["fy"],
            cx=d["cx"],
            cy=d["cy"],
            world_to_cam=np.asarray(w2c, dtype=np.float64).reshape(4, 4),
            near=d.get("near", 0.01),
            far=d.get("far", 100.0),
            image_name=d.get("image_name"),
        )


@dataclass
class ProjectedGaussian:
    mu2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float
    visible: bool


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for one camera (structure of arrays).

    The integer pixel box ``[xmin, xmax] x [ymin, ymax]`` is the set of pixel
    indices whose centers ``(j + 0.5, i + 0.5)`` fall inside the 3-sigma
    square around ``mu2d``, clipped to the image. Forward and backward both
    iterate exactly this box.
    """

    mu_cam: np.ndarray  # (N, 3)
    mu2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2) including the low-pass term
    conic: np.ndarray  # (N, 3) inverse of cov2d as (a, b, c)
    depth: np.ndarray  # (N,)
    radius: np.ndarray  # (N,)
    visible: np.ndarray  # (N,) bool
    xmin: np.ndarray
    xmax: np.ndarray
    ymin: np.ndarray
    ymax: np.ndarray
    jacobian: np.ndarray  # (N, 2, 3)
    cov_cam: np.ndarray  # (N, 3, 3)

    def __len__(self):
        return self.mu2d.shape[0]

    def __getitem__(self, i) -> ProjectedGaussian:
        return ProjectedGaussian(
            self.mu2d[i], self.cov2d[i], float(self.depth[i]), float(self.radius[i]), bool(self.visible[i])
        )

    def box_pixel_counts(self) -> np.ndarray:
        nx = np.where(self.visible, self.xmax - self.xmin + 1, 0)
        ny = np.where(self.visible, self.ymax - self.ymin + 1, 0)
        return nx * ny


def project(cloud: GaussianCloud, cam: Camera) -> Projection:
    """Project every Gaussian of ``cloud`` into ``cam`` (EWA splatting)."""
    dtype = cloud.dtype
    R = cam.rotation.astype(dtype)
    t = cam.translation.astype(dtype)
    n = cloud.count

    mu_cam = cloud.mu @ R.T + t
    tz = mu_cam[:, 2]
    in_front = tz > cam.near
    tz_safe = np.where(in_front, tz, 1.0).astype(dtype)
    inv_z = 1.0 / tz_safe
    tx, ty = mu_cam[:, 0], mu_cam[:, 1]

    mu2d = np.empty((n, 2), dtype=dtype)
    mu2d[:, 0] = cam.fx * tx * inv_z + cam.cx
    mu2d[:, 1] = cam.fy * ty * inv_z + cam.cy

    J = np.zeros((n, 2, 3), dtype=dtype)
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * tx * inv_z * inv_z
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * ty * inv_z * inv_z

    Rg = quat_to_rotmat(cloud.quat)
    M = Rg * np.exp(cloud.log_scale)[:, None, :]
    cov_world = M @ np.swapaxes(M, 1, 2)
    cov_cam = R @ cov_world @ R.T
    JW = J @ cov_cam
    cov2d = JW @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    a, b, c = cov2d[:, 0, 0], 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]), cov2d[:, 1, 1]
    cov2d[:, 0, 1] = b
    cov2d[:, 1, 0] = b
    det = a * c - b * b
    det_ok = det > 0
    det_safe = np.where(det_ok, det, 1.0)
    conic = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1).astype(dtype)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))

    with np.errstate(invalid="ignore"):
        xmin = np.ceil(mu2d[:, 0] - radius - 0.5)
        xmax = np.floor(mu2d[:, 0] + radius - 0.5)
        ymin = np.ceil(mu2d[:, 1] - radius - 0.5)
        ymax = np.floor(mu2d[:, 1] + radius - 0.5)
    finite = np.isfinite(xmin) & np.isfinite(xmax) & np.isfinite(ymin) & np.isfinite(ymax)
    big = float(max(cam.width, cam.height) + 1)
    xmin = np.clip(np.where(finite, xmin, big), -1, big).astype(np.int64)
    xmax = np.clip(np.where(finite, xmax, -1), -1, big).astype(np.int64)
    ymin = np.clip(np.where(finite, ymin, big), -1, big).astype(np.int64)
    ymax = np.clip(np.where(finite, ymax, -1), -1, big).astype(np.int64)
    xmin = np.maximum(xmin, 0)
    ymin = np.maximum(ymin, 0)
    xmax = np.minimum(xmax, cam.width - 1)
    ymax = np.minimum(ymax, cam.height - 1)

    visible = in_front & det_ok & finite & (xmin <= xmax) & (ymin <= ymax)
    return Projection(
        mu_cam=mu_cam,
        mu2d=mu2d,
        cov2d=cov2d,
        conic=conic,
        depth=tz,
        radius=radius.astype(dtype),
        visible=visible,
        xmin=xmin,
        xmax=xmax,
        ymin=ymin,
        ymax=ymax,
        jacobian=J,
        cov_cam=cov_cam,
    )


@dataclass(frozen=True)
class TileGrid:
    width: int
    height: int
    tile_size: int = TILE_SIZE

    @property
    def tiles_x(self) -> int:
        return (self.width + self.tile_size - 1) // self.tile_size

    @property
    def tiles_y(self) -> int:
        return (self.height + self.tile_size - 1) // self.tile_size

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    @classmethod
    def for_camera(cls, cam: Camera, tile_size: int = TILE_SIZE) -> "TileGrid":
        return cls(cam.width, cam.height, tile_size)


@dataclass
class TileBins:
    """CSR layout: splats of tile ``t`` are ``splats[offsets[t]:offsets[t+1]]``."""

    grid: TileGrid
    offsets: np.ndarray
    splats: np.ndarray

    def tile_list(self, t: int) -> np.ndarray:
        return self.splats[self.offsets[t] : self.offsets[t + 1]]

    def as_lists(self) -> list:
        return [self.tile_list(t) for t in range(self.grid.n_tiles)]


def cull(proj: Projection, grid: TileGrid, order: Optional[np.ndarray] = None) -> TileBins:
    """Bin visible splats into every tile their pixel box overlaps.

    ``order`` fixes the processing order of splats inside each tile (the
    binning sort is by tile id only and is stable). It may also be a subset
    of indices, in which case only those splats are binned.
    """
    if order is None:
        order = np.arange(len(proj), dtype=np.int64)
    order = np.asarray(order, dtype=np.int64)
    ids = order[proj.visible[order]]
    ts = grid.tile_size
    tx0 = proj.xmin[ids] // ts
    tx1 = proj.xmax[ids] // ts
    ty0 = proj.ymin[ids] // ts
    ty1 = proj.ymax[ids] // ts
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    gid = np.repeat(ids, counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total, dtype=np.int64) - starts
    nx_rep = np.repeat(nx, counts)
    tile_x = np.repeat(tx0, counts) + local % nx_rep
    tile_y = np.repeat(ty0, counts) + local // nx_rep
    tile_id = tile_y * grid.tiles_x + tile_x
    perm = np.argsort(tile_id, kind="stable")
    splats = gid[perm]
    offsets = np.zeros(grid.n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=grid.n_tiles), out=offsets[1:])
    return TileBins(grid, offsets, np.ascontiguousarray(splats))
