"""Sorted versus order-independent compositing: per-view agreement and popping."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .camera import Camera
from .losses import psnr
from .rasterizer import render_oit, render_sorted
from .scene import SH_C0, GaussianCloud, inverse_sigmoid


def interpolate_cameras(cameras: Sequence[Camera], steps: int) -> List[Camera]:
    """``steps`` frames between each consecutive pair (rotation slerp, linear center)."""
    out = []
    for a, b in zip(cameras[:-1], cameras[1:]):
        rots = Rotation.from_matrix(np.stack([a.rotation, b.rotation]))
        slerp = Slerp([0.0, 1.0], rots)
        for t in np.linspace(0.0, 1.0, steps, endpoint=False):
            R = slerp([t]).as_matrix()[0]
            center = (1.0 - t) * a.focal_point + t * b.focal_point
            W = np.eye(4)
            W[:3, :3] = R
            W[:3, 3] = -R @ center
            out.append(Camera(a.width, a.height, a.fx, a.fy, a.cx, a.cy, W, a.near, a.far))
    if cameras:
        out.append(cameras[-1])
    return out


def frame_deltas(frames: Sequence[np.ndarray]) -> np.ndarray:
    """Max absolute per-pixel change between consecutive frames (length ``len - 1``)."""
    return np.array([float(np.max(np.abs(b - a))) for a, b in zip(frames[:-1], frames[1:])])


def compare_views(cloud: GaussianCloud, cameras: Sequence[Camera], background=(0.0, 0.0, 0.0), backend=None):
    """Render every view both ways; returns ``(rows, sorted_images, oit_images)``."""
    rows, s_imgs, o_imgs = [], [], []
    for i, cam in enumerate(cameras):
        s = np.clip(render_sorted(cloud, cam, background, backend=backend).image, 0.0, 1.0)
        o = np.clip(render_oit(cloud, cam, background, backend=backend).image, 0.0, 1.0)
        rows.append({"view": i, "image_name": cam.image_name, "psnr_sorted_vs_oit": psnr(s, o)})
        s_imgs.append(s)
        o_imgs.append(o)
    return rows, s_imgs, o_imgs


def path_deltas(cloud, cameras: Sequence[Camera], background=(0.0, 0.0, 0.0), backend=None):
    """Per-frame deltas along ``cameras`` under both regimes."""
    s = [render_sorted(cloud, c, background, backend=backend).image for c in cameras]
    o = [render_oit(cloud, c, background, backend=backend).image for c in cameras]
    return frame_deltas(s), frame_deltas(o)


def swap_scene(frames: int = 40, half_angle_deg: float = 10.0, size: int = 32, dtype=np.float64):
    """Two overlapping splats whose depth order flips halfway along a camera arc.

    The splats sit side by side on the x axis; the camera orbits the origin
    in the x-z plane, so their camera-space depths cross when it looks
    straight down -z. Returns ``(cloud, cameras, swap_frame)`` where
    ``swap_frame`` indexes the delta between frames ``swap_frame`` and
    ``swap_frame + 1``.
    """
    if frames % 2 or frames < 2:
        raise ValueError("use an even frame count so the swap falls between two frames")
    cloud = GaussianCloud.zeros(2, dtype=np.float64, sigma=10.0)
    cloud.mu[:] = [[-0.05, 0.0, 0.0], [0.05, 0.0, 0.0]]
    cloud.log_scale[:] = np.log(0.35)
    cloud.opacity_logit[:] = inverse_sigmoid(0.97)
    cloud.sh_color[0, 0] = (np.array([0.95, 0.1, 0.1]) - 0.5) / SH_C0
    cloud.sh_color[1, 0] = (np.array([0.1, 0.1, 0.95]) - 0.5) / SH_C0
    # symmetric even sampling: no frame sits exactly on the depth tie
    angles = np.deg2rad(np.linspace(-half_angle_deg, half_angle_deg, frames))
    cams = []
    for th in angles:
        eye = [3.0 * np.sin(th), 0.0, 3.0 * np.cos(th)]
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], size, size, 40.0))
    return cloud.astype(dtype), cams, frames // 2 - 1


def side_by_side(a: np.ndarray, b: np.ndarray, gap: int = 2) -> np.ndarray:
    h = a.shape[0]
    sep = np.ones((h, gap, 3), dtype=a.dtype)
    return np.concatenate([a, sep, b], axis=1)
