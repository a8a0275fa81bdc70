"""Tile-based forward rendering: weighted OIT, sorted volumetric, OIT over a pre-render."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .camera import Camera, Projection, TileBins, TileGrid, cull, project
from .errors import ContractViolation
from .scene import GaussianCloud, sh_basis, sigmoid, softplus

Q_EPS = 1e-10

ROUTE_IMAGE = 1
ROUTE_BAKE = 2


@dataclass
class PixelAccumulator:
    """Per-pixel OIT running sums: ``P = sum c a w``, ``Q = sum a w``, ``T = prod(1 - a)``."""

    P: np.ndarray
    Q: np.ndarray
    T: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int, dtype=np.float32) -> "PixelAccumulator":
        return cls(
            np.zeros((height, width, 3), dtype=dtype),
            np.zeros((height, width), dtype=dtype),
            np.ones((height, width), dtype=dtype),
        )

    @property
    def shape(self):
        return self.Q.shape

    @property
    def nbytes(self) -> int:
        return self.P.nbytes + self.Q.nbytes + self.T.nbytes

    def copy(self) -> "PixelAccumulator":
        return PixelAccumulator(self.P.copy(), self.Q.copy(), self.T.copy())

    def compose(self, other: "PixelAccumulator") -> "PixelAccumulator":
        """Merge two disjoint splat sets' accumulators."""
        return PixelAccumulator(self.P + other.P, self.Q + other.Q, self.T * other.T)

    def resolve(self, background) -> np.ndarray:
        """Final color ``T c0 + (1 - T) P / Q``; pure background where ``Q == 0``."""
        bg = np.asarray(background, dtype=self.P.dtype)
        covered = self.Q > 0
        F = self.P / np.where(covered, np.maximum(self.Q, Q_EPS), 1.0)[..., None]
        img = self.T[..., None] * bg + (1.0 - self.T)[..., None] * F
        return np.where(covered[..., None], img, bg).astype(self.P.dtype)

    def mean_color(self) -> np.ndarray:
        covered = self.Q > 0
        return self.P / np.where(covered, np.maximum(self.Q, Q_EPS), 1.0)[..., None] * covered[..., None]


@dataclass
class SplatData:
    """View-dependent per-splat quantities for a subset ``index`` of the cloud."""

    index: np.ndarray
    proj: Projection
    dirs: np.ndarray
    dist: np.ndarray
    basis: np.ndarray
    color_raw: np.ndarray
    color: np.ndarray
    weight_raw: np.ndarray
    ramp: np.ndarray
    weight: np.ndarray
    opacity: np.ndarray
    route: np.ndarray

    def __len__(self):
        return self.index.shape[0]


@dataclass
class RenderOutput:
    image: np.ndarray
    per_pixel_acc: Optional[PixelAccumulator]
    splat_pixel_pairs: int
    splats: Optional[SplatData] = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))


def prepare_splats(cloud: GaussianCloud, cam: Camera, index=None, route=None) -> SplatData:
    """Project a subset of ``cloud`` and evaluate its colors and OIT weights."""
    if index is None:
        index = np.arange(cloud.count, dtype=np.int64)
    index = np.asarray(index, dtype=np.int64)
    sub = cloud.select(index) if index.shape[0] != cloud.count or not _is_identity(index) else cloud
    dtype = cloud.dtype
    proj = project(sub, cam)
    f = cam.focal_point.astype(dtype)
    offset = sub.mu - f
    dist = np.linalg.norm(offset, axis=1)
    dirs = offset / np.where(dist > 0, dist, 1.0)[:, None]
    basis = sh_basis(dirs)
    color_raw = np.einsum("nj,njc->nc", basis, sub.sh_color) + 0.5
    color = np.maximum(color_raw, 0.0)
    weight_raw = np.einsum("nj,nj->n", basis, sub.weight_sh)
    ramp = np.maximum(0.0, 1.0 - proj.depth / cloud.sigma)
    weight = (ramp * softplus(weight_raw)).astype(dtype)
    if route is None:
        route = np.full(index.shape[0], ROUTE_IMAGE, dtype=np.int8)
    return SplatData(
        index=index,
        proj=proj,
        dirs=dirs,
        dist=dist,
        basis=basis,
        color_raw=color_raw,
        color=np.ascontiguousarray(color.astype(dtype)),
        weight_raw=weight_raw,
        ramp=ramp,
        weight=weight,
        opacity=sigmoid(sub.opacity_logit).astype(dtype),
        route=np.asarray(route, dtype=np.int8),
    )


def _is_identity(index):
    return index.shape[0] == 0 or (index[0] == 0 and np.all(np.diff(index) == 1))


def _check_base(base, cam):
    if base is not None and base.shape != (cam.height, cam.width):
        raise ContractViolation(
            f"base accumulator shape {base.shape} does not match camera {(cam.height, cam.width)}"
        )


def _rasterize(splats: SplatData, cam: Camera, order=None, backend=None):
    grid = TileGrid.for_camera(cam)
    bins = cull(splats.proj, grid, order)
    return kernels.forward_tiles(
        bins, splats.proj, splats.opacity, splats.color, splats.weight, splats.route,
        splats.color.dtype, backend=backend,
    )


def render_oit(
    cloud: GaussianCloud,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    base: Optional[PixelAccumulator] = None,
    order: Optional[np.ndarray] = None,
    index: Optional[np.ndarray] = None,
    backend: Optional[str] = None,
) -> RenderOutput:
    """Weighted order-independent rendering of ``cloud`` (or ``cloud[index]``).

    ``order`` permutes splat processing order inside tiles; the result is
    independent of it up to float summation reordering.
    """
    _check_base(base, cam)
    splats = prepare_splats(cloud, cam, index)
    if order is not None and index is not None:
        raise ContractViolation("order and index are mutually exclusive")
    P, Q, T, _, _, _, pairs = _rasterize(splats, cam, order, backend)
    acc = PixelAccumulator(P, Q, T)
    if base is not None:
        acc = base.compose(acc)
    bg = np.asarray(background, dtype=np.float64)
    return RenderOutput(acc.resolve(bg), acc, pairs, splats, bg)


def render_with_prerender(
    cloud: GaussianCloud,
    active_mask: np.ndarray,
    cam: Camera,
    prerender: PixelAccumulator,
    background=(0.0, 0.0, 0.0),
    bake_mask: Optional[np.ndarray] = None,
    backend: Optional[str] = None,
):
    """Composite the active splats over a frozen-set pre-render.

    Splats in ``bake_mask`` are frozen but not yet in ``prerender``; they are
    rasterized in the same pass, routed into the cache accumulators (BAU), and
    the image is produced from the updated cache plus the active splats (BAN).
    Returns ``(RenderOutput, updated_prerender)``.
    """
    _check_base(prerender, cam)
    active_mask = np.asarray(active_mask, dtype=bool)
    route = np.zeros(cloud.count, dtype=np.int8)
    route[active_mask] = ROUTE_IMAGE
    if bake_mask is not None:
        bake_mask = np.asarray(bake_mask, dtype=bool)
        if np.any(bake_mask & active_mask):
            raise ContractViolation("a splat cannot be both active and pending bake-in")
        route[bake_mask] = ROUTE_BAKE
    index = np.flatnonzero(route)
    splats = prepare_splats(cloud, cam, index, route[index])
    P, Q, T, bP, bQ, bT, pairs = _rasterize(splats, cam, None, backend)
    cache = prerender
    if bake_mask is not None and np.any(bake_mask):
        cache = prerender.compose(PixelAccumulator(bP, bQ, bT))
    acc = cache.compose(PixelAccumulator(P, Q, T))
    bg = np.asarray(background, dtype=np.float64)
    return RenderOutput(acc.resolve(bg), acc, pairs, splats, bg), cache


def render_sorted(
    cloud: GaussianCloud,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    backend: Optional[str] = None,
) -> RenderOutput:
    """Front-to-back volumetric compositing by camera-frame depth."""
    splats = prepare_splats(cloud, cam)
    grid = TileGrid.for_camera(cam)
    bins = cull(splats.proj, grid)
    bg = np.asarray(background, dtype=np.float64)
    image, _, pairs = kernels.sorted_tiles(
        bins, splats.proj, splats.opacity, splats.color, bg, splats.color.dtype, backend=backend
    )
    return RenderOutput(image, None, pairs, None, bg)


# ---------------------------------------------------------------------------
# Image output
# ---------------------------------------------------------------------------

F32_MAGIC = b"SOIT"


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path)


def write_f32(path, image: np.ndarray) -> None:
    """Planar float32 image: ``SOIT`` magic, u32 W, u32 H, u32 C, then C planes."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(F32_MAGIC + struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(np.moveaxis(image, -1, 0)).tobytes())


def read_f32(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != F32_MAGIC:
            raise ContractViolation(f"{path}: not a SOIT raw float image")
        w, h, c = struct.unpack("<III", header[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * c:
        raise ContractViolation(f"{path}: truncated payload")
    return np.moveaxis(data.reshape(c, h, w), 0, -1).astype(np.float32)
