"""Active-set sparse training: activeness, view subsampling, pre-render caches.

Gaussians are frozen monotonically. Each freeze is tagged with the stage at
which it happened; a view's cache records the stage it was last reconciled
at, so bringing a cache up to date only needs the Gaussians frozen in
between.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .backward import ACTIVITY_ATTRIBUTES, GradientBuffer, backward_oit
from .camera import Camera
from .errors import ContractViolation
from .losses import loss as photometric_loss
from .rasterizer import PixelAccumulator, render_with_prerender
from .scene import GaussianCloud

NEVER_FROZEN = np.iinfo(np.int64).max


@dataclass
class ActiveSetState:
    active: np.ndarray
    frozen_stage: np.ndarray
    stage: int = 0
    thresholds: Optional[Dict[str, float]] = None
    activation_iteration: int = 15000
    update_interval: int = 500
    subsample_count: int = 30
    threshold_fraction: float = 1e-2

    @classmethod
    def full(cls, n: int, **kw) -> "ActiveSetState":
        return cls(
            active=np.ones(n, dtype=bool),
            frozen_stage=np.full(n, NEVER_FROZEN, dtype=np.int64),
            **kw,
        )

    @property
    def count(self) -> int:
        return int(self.active.sum())

    @property
    def fraction(self) -> float:
        return self.count / max(self.active.shape[0], 1)

    def pending_since(self, stamp: int) -> np.ndarray:
        """Gaussians frozen after ``stamp`` and up to the current stage."""
        return (self.frozen_stage > stamp) & (self.frozen_stage <= self.stage)

    def freeze(self, newly_frozen: np.ndarray) -> None:
        """Advance the stage and freeze ``newly_frozen`` (must be active)."""
        if np.any(newly_frozen & ~self.active):
            raise ContractViolation("cannot re-freeze an already frozen Gaussian")
        self.stage += 1
        self.active &= ~newly_frozen
        self.frozen_stage[newly_frozen] = self.stage

    def reopen(self) -> None:
        self.active[:] = True
        self.frozen_stage[:] = NEVER_FROZEN
        self.stage += 1


@dataclass
class CacheEntry:
    acc: PixelAccumulator
    stamp: int = 0
    bake_pairs: int = 0  # splat-pixel pairs spent on reconciliation so far


@dataclass
class PreRenderCache:
    """Per-training-view accumulators of the frozen set."""

    entries: List[CacheEntry]

    @classmethod
    def empty(cls, cameras: Sequence[Camera], dtype=np.float32, stamp: int = 0) -> "PreRenderCache":
        return cls([CacheEntry(PixelAccumulator.empty(c.height, c.width, dtype), stamp) for c in cameras])

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, view: int) -> CacheEntry:
        return self.entries[view]

    @property
    def nbytes(self) -> int:
        return sum(e.acc.nbytes for e in self.entries)

    def reset(self, stamp: int) -> None:
        for e in self.entries:
            h, w = e.acc.shape
            e.acc = PixelAccumulator.empty(h, w, e.acc.P.dtype)
            e.stamp = stamp


# ---------------------------------------------------------------------------
# Activeness
# ---------------------------------------------------------------------------


def classify_active(
    norms: Mapping[str, np.ndarray],
    thresholds: Mapping[str, float],
    previous: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Active iff some attribute's gradient norm exceeds its threshold.

    The result is intersected with ``previous`` so freezing is monotone.
    """
    names = [n for n in ACTIVITY_ATTRIBUTES if n in norms]
    n = next(iter(norms.values())).shape[0]
    active = np.zeros(n, dtype=bool)
    for name in names:
        active |= norms[name] > thresholds[name]
    if previous is not None:
        active &= previous
    return active


def data_relative_thresholds(norms: Mapping[str, np.ndarray], fraction: float, among=None) -> Dict[str, float]:
    """``fraction`` times the median per-Gaussian norm of each attribute."""
    out = {}
    for name, vals in norms.items():
        sel = vals if among is None else vals[among]
        out[name] = float(fraction * np.median(sel)) if sel.size else 0.0
    return out


def subsample_views(cameras_or_centers, count: int, seed=None) -> np.ndarray:
    """Farthest point sampling over camera centers with a random first pick.

    Ties in the max-min distance go to the lowest view index. ``seed`` may be
    an int, a ``np.random.Generator``, or ``("first", i)`` to force the first
    pick (used for testing).
    """
    centers = np.asarray(
        [c.focal_point for c in cameras_or_centers]
        if len(cameras_or_centers) and isinstance(cameras_or_centers[0], Camera)
        else cameras_or_centers,
        dtype=np.float64,
    )
    n = centers.shape[0]
    if count > n:
        raise ContractViolation(f"cannot subsample {count} views out of {n}")
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    if isinstance(seed, tuple) and seed[0] == "first":
        first = int(seed[1])
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        first = int(rng.integers(n))
    chosen = [first]
    mind = np.linalg.norm(centers - centers[first], axis=1)
    mind[first] = -np.inf
    for _ in range(count - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(centers - centers[nxt], axis=1))
        mind[chosen] = -np.inf
    return np.asarray(chosen, dtype=np.int64)


# ---------------------------------------------------------------------------
# Cache maintenance
# ---------------------------------------------------------------------------


def reconcile_cache(
    view: int,
    cam: Camera,
    cloud: GaussianCloud,
    cache: PreRenderCache,
    state: ActiveSetState,
    backend=None,
) -> CacheEntry:
    """Bake Gaussians frozen since the entry's stamp into it; advance the stamp."""
    entry = cache[view]
    pending = state.pending_since(entry.stamp)
    if np.any(pending):
        nothing_active = np.zeros(cloud.count, dtype=bool)
        out, entry.acc = render_with_prerender(
            cloud, nothing_active, cam, entry.acc, bake_mask=pending, backend=backend
        )
        entry.bake_pairs += out.splat_pixel_pairs
    entry.stamp = state.stage
    return entry


def render_view(
    cloud: GaussianCloud,
    view: int,
    cam: Camera,
    cache: PreRenderCache,
    state: ActiveSetState,
    background=(0.0, 0.0, 0.0),
    backend=None,
):
    """Training-time render: reconcile lazily and composite in one pass."""
    entry = cache[view]
    pending = state.pending_since(entry.stamp)
    out, entry.acc = render_with_prerender(
        cloud, state.active, cam, entry.acc, background,
        bake_mask=pending if np.any(pending) else None, backend=backend,
    )
    entry.stamp = state.stage
    return out


@dataclass
class UpdateReport:
    iteration: int
    stage: int
    active_count: int
    frozen_this_stage: int
    view_ids: List[int]
    thresholds: Dict[str, float]
    mean_loss: float
    splat_pixel_pairs: int = 0


def accumulate_subsample_norms(
    cloud: GaussianCloud,
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray],
    view_ids: Sequence[int],
    cache: PreRenderCache,
    state: ActiveSetState,
    background=(0.0, 0.0, 0.0),
    lambda_ssim: float = 0.2,
    backend=None,
):
    """Mean over the given views of per-view attribute gradient norms."""
    norms = {name: np.zeros(cloud.count) for name in ACTIVITY_ATTRIBUTES}
    losses = []
    pairs = 0
    for j in view_ids:
        out = render_view(cloud, j, cameras[j], cache, state, background, backend)
        L, dL = photometric_loss(out.image, images[j], lambda_ssim)
        g = backward_oit(cloud, cameras[j], out, dL, state.active, backend=backend)
        for name, vals in g.attribute_norms().items():
            norms[name] += vals
        losses.append(L)
        pairs += out.splat_pixel_pairs + g.splat_pixel_pairs
    k = max(len(view_ids), 1)
    return {n: v / k for n, v in norms.items()}, float(np.mean(losses)) if losses else 0.0, pairs


def update_active_set(
    cloud: GaussianCloud,
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray],
    cache: PreRenderCache,
    state: ActiveSetState,
    iteration: int = 0,
    rng: Union[None, int, np.random.Generator] = None,
    background=(0.0, 0.0, 0.0),
    lambda_ssim: float = 0.2,
    view_ids: Optional[Sequence[int]] = None,
    backend=None,
) -> UpdateReport:
    """Subsample views, measure gradients of the active set, freeze the idle ones."""
    if view_ids is None:
        view_ids = subsample_views(cameras, min(state.subsample_count, len(cameras)), rng)
    norms, mean_loss, pairs = accumulate_subsample_norms(
        cloud, cameras, images, view_ids, cache, state, background, lambda_ssim, backend
    )
    if state.thresholds is None:
        state.thresholds = data_relative_thresholds(norms, state.threshold_fraction, among=state.active)
    keep = classify_active(norms, state.thresholds, state.active)
    newly = state.active & ~keep
    state.freeze(newly)
    return UpdateReport(
        iteration=iteration,
        stage=state.stage,
        active_count=state.count,
        frozen_this_stage=int(newly.sum()),
        view_ids=[int(v) for v in view_ids],
        thresholds=dict(state.thresholds),
        mean_loss=mean_loss,
        splat_pixel_pairs=pairs,
    )
