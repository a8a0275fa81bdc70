"""Outer training loop: full-cloud warm-up with densification, then active-set training."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence

import numpy as np

from .activeset import (
    ActiveSetState,
    PreRenderCache,
    UpdateReport,
    render_view,
    update_active_set,
)
from .backward import ACTIVITY_ATTRIBUTES, GradientBuffer, backward_oit
from .camera import Camera
from .errors import InvalidParameterError
from .io import Dataset, cloud_from_points
from .losses import loss as photometric_loss
from .losses import psnr, ssim
from .optim import (
    AdamState,
    DensifyConfig,
    LearningRates,
    PositionalGradStats,
    adam_step,
    densify_and_prune,
)
from .rasterizer import render_oit
from .scene import GaussianCloud

log = logging.getLogger(__name__)


def default_update_interval(n_train_views: int) -> int:
    # some scenes need the interval to exceed twice the number of training views
    return 600 if 2 * n_train_views >= 500 else 500


@dataclass
class TrainConfig:
    iterations: int = 30000
    activation_iteration: int = 15000
    lambda_ssim: float = 0.2
    lrs: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    densification: bool = True
    active_set: bool = True
    update_interval: Optional[int] = None  # None: chosen from the view count
    subsample_count: int = 30
    threshold_fraction: float = 1e-2
    fixed_threshold: Optional[float] = None  # same epsilon for every attribute
    refresh_every: int = 0  # re-open the active set every n updates; 0 = never
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    eval_every: int = 0
    deterministic: bool = False
    backend: Optional[str] = None
    check_cache: bool = False  # slow: compare every composed render with a full one
    mu_lr_steps: Optional[int] = None  # None: decay over the whole run

    def validate(self, n_train_views: Optional[int] = None) -> None:
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be >= 0")
        if not 0 <= self.activation_iteration:
            raise InvalidParameterError("activation_iteration must be >= 0")
        if self.activation_iteration > self.iterations and self.iterations > 0 and self.active_set:
            log.info("activation iteration beyond the run; the active set never engages")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise InvalidParameterError("lambda_ssim must lie in [0, 1]")
        if not 0.0 <= self.densify.sample_prob <= 1.0:
            raise InvalidParameterError("densify sample probability must lie in [0, 1]")
        if self.update_interval is not None and self.update_interval <= 0:
            raise InvalidParameterError("update_interval must be positive")
        if self.subsample_count <= 0:
            raise InvalidParameterError("subsample_count must be positive")
        if n_train_views is not None and self.active_set and self.subsample_count > n_train_views:
            raise InvalidParameterError(
                f"subsample_count {self.subsample_count} exceeds the {n_train_views} training views"
            )
        if self.threshold_fraction < 0:
            raise InvalidParameterError("threshold_fraction must be >= 0")
        try:
            self.lrs.validate()
        except ValueError as exc:
            raise InvalidParameterError(str(exc)) from None

    def resolved_interval(self, n_train_views: int) -> int:
        return self.update_interval or default_update_interval(n_train_views)

    def as_flat_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("lrs", "densify"):
                for k, v in asdict(val).items():
                    out[f"{f.name}.{k}"] = v
            else:
                out[f.name] = val
        return out


@dataclass
class TrainResult:
    cloud: GaussianCloud
    adam: AdamState
    active: Optional[ActiveSetState]
    metrics: List[dict]
    active_log: List[dict]
    eval_log: List[dict]
    iterations_run: int
    wall_seconds: float
    halted_early: bool = False


def scene_extent(cameras: Sequence[Camera]) -> float:
    """Radius of the camera centers around their mean, padded by 10%."""
    centers = np.array([c.focal_point for c in cameras])
    if centers.shape[0] < 2:
        return 1.0
    r = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return 1.1 * r if r > 0 else 1.0


def evaluate(cloud: GaussianCloud, cameras, images, background=(0.0, 0.0, 0.0), backend=None) -> dict:
    """Mean PSNR and SSIM over views, on images clamped to [0, 1]."""
    ps, ss = [], []
    for cam, img in zip(cameras, images):
        out = np.clip(render_oit(cloud, cam, background, backend=backend).image, 0.0, 1.0)
        ps.append(psnr(out, img))
        ss.append(ssim(out, img))
    return {"psnr": float(np.mean(ps)) if ps else float("nan"), "ssim": float(np.mean(ss)) if ss else float("nan")}


class _ViewSampler:
    """Shuffled pass over the training views per epoch, keyed by iteration.

    The permutation for epoch ``e`` depends only on ``(seed, e)``, so a run
    resumed at any iteration sees the same view sequence as an
    uninterrupted one.
    """

    def __init__(self, n: int, seed: int):
        self.n = n
        self.seed = seed
        self._epoch = -1
        self._perm = None

    def __call__(self, iteration: int) -> int:
        epoch, pos = divmod(iteration, self.n)
        if epoch != self._epoch:
            self._perm = np.random.default_rng([self.seed, 0, epoch]).permutation(self.n)
            self._epoch = epoch
        return int(self._perm[pos])


def train(
    dataset: Dataset,
    config: TrainConfig,
    init: Optional[GaussianCloud] = None,
    adam: Optional[AdamState] = None,
    start_iteration: int = 0,
    callback: Optional[Callable[[int, GaussianCloud], None]] = None,
) -> TrainResult:
    """Fit a Gaussian cloud to the training views of ``dataset``.

    Iterations below ``activation_iteration`` train every Gaussian and
    densify inside the densification window. From then on, with the active
    set enabled, only active Gaussians are rendered over per-view caches of
    the frozen ones and receive updates; the active set is re-evaluated
    every ``update_interval`` iterations and training stops once it is empty.

    ``adam`` and ``start_iteration`` resume an interrupted run. Views and
    learning rates follow the same schedule as an uninterrupted run; resuming
    at ``activation_iteration`` reproduces it exactly, since neither the
    densification nor the subsampling stream is shared across the boundary.
    """
    cams, images = dataset.split("train")
    if len(cams) < 1:
        raise InvalidParameterError("dataset has no training views")
    test_cams, test_images = dataset.split("test")
    config.validate(len(cams))
    # independent streams, so engaging the active set does not reshuffle views
    densify_rng, update_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    bg = np.asarray(config.background, dtype=np.float64)

    if init is not None:
        cloud = init.copy()
    elif dataset.init_points is not None:
        cloud = cloud_from_points(dataset.init_points, dataset.init_colors, cams)
    else:
        raise InvalidParameterError("dataset has no initial points and no initial cloud was given")

    extent = scene_extent(cams)
    lrs = LearningRates(**asdict(config.lrs))
    lrs.mu_max_steps = config.mu_lr_steps or max(config.iterations, 1)
    if adam is None:
        adam = AdamState.for_cloud(cloud)
    elif adam.count != cloud.count:
        raise InvalidParameterError("optimizer state does not match the initial cloud")
    stats = PositionalGradStats.zeros(cloud.count)
    dcfg = config.densify
    densify_stop = min(dcfg.stop, config.activation_iteration)
    interval = config.resolved_interval(len(cams))
    K = config.activation_iteration

    sample_view = _ViewSampler(len(cams), config.seed)
    state: Optional[ActiveSetState] = None
    cache: Optional[PreRenderCache] = None
    updates = 0
    metrics, active_log, eval_log = [], [], []
    halted = False
    t_start = time.perf_counter()
    it = 0

    for it in range(start_iteration, config.iterations):
        t0 = time.perf_counter()
        engaged = config.active_set and it >= K

        if engaged and state is None:
            state = ActiveSetState.full(
                cloud.count,
                activation_iteration=K,
                update_interval=interval,
                subsample_count=config.subsample_count,
                threshold_fraction=config.threshold_fraction,
            )
            if config.fixed_threshold is not None:
                state.thresholds = {n: float(config.fixed_threshold) for n in ACTIVITY_ATTRIBUTES}
            cache = PreRenderCache.empty(cams, cloud.dtype, stamp=state.stage)

        if engaged and (it - K) % interval == 0:
            if config.refresh_every and updates and updates % config.refresh_every == 0:
                state.reopen()
                cache.reset(state.stage)
            report = update_active_set(
                cloud, cams, images, cache, state, it, update_rng, bg, config.lambda_ssim, backend=config.backend
            )
            updates += 1
            active_log.append(_report_row(report))
            log.info("iteration %d: %d active after stage %d", it, report.active_count, report.stage)
            if state.count == 0:
                halted = True
                break

        view = sample_view(it)
        cam, target = cams[view], images[view]
        if engaged:
            out = render_view(cloud, view, cam, cache, state, bg, backend=config.backend)
            if config.check_cache:
                _check_cache(cloud, cam, out, bg, config.backend)
            mask = state.active
        else:
            out = render_oit(cloud, cam, bg, backend=config.backend)
            mask = None
        L, dL = photometric_loss(out.image, target, config.lambda_ssim)
        grads = backward_oit(cloud, cam, out, dL, mask, backend=config.backend)
        # the shared sigma would invalidate baked caches, so it stops moving
        # once anything is frozen
        sigma_free = state is None or not np.any(~state.active)
        adam_step(cloud, grads, adam, mask, lrs, it, extent, update_sigma=sigma_free, backend=config.backend)

        if config.densification and not engaged and it < densify_stop:
            visible = out.splats.index[out.splats.proj.visible]
            stats.add(grads, visible, cam.width, cam.height)
            if it >= dcfg.start and (it + 1) % dcfg.interval == 0:
                cloud, adam, info = densify_and_prune(cloud, stats, dcfg, extent, densify_rng, adam)
                stats = PositionalGradStats.zeros(cloud.count)
                log.debug("iteration %d densify %s -> %d", it, info, cloud.count)

        wall_ms = 0.0 if config.deterministic else (time.perf_counter() - t0) * 1e3
        metrics.append(
            {
                "iteration": it,
                "loss": float(L),
                "active_count": state.count if state is not None else cloud.count,
                "splat_pixel_pairs": int(out.splat_pixel_pairs + grads.splat_pixel_pairs),
                "wall_ms": wall_ms,
            }
        )
        if config.eval_every and (it + 1) % config.eval_every == 0 and test_cams:
            row = {"iteration": it + 1, **evaluate(cloud, test_cams, test_images, bg, config.backend)}
            eval_log.append(row)
            log.info("iteration %d: test PSNR %.2f", it + 1, row["psnr"])
        if callback is not None:
            callback(it, cloud)

    wall = time.perf_counter() - t_start
    return TrainResult(
        cloud=cloud,
        adam=adam,
        active=state,
        metrics=metrics,
        active_log=active_log,
        eval_log=eval_log,
        iterations_run=len(metrics),
        wall_seconds=0.0 if config.deterministic else wall,
        halted_early=halted,
    )


def _check_cache(cloud, cam, out, bg, backend):
    full = render_oit(cloud, cam, bg, backend=backend).image
    err = float(np.max(np.abs(full - out.image))) if full.size else 0.0
    if err > 1e-5:
        raise AssertionError(f"cached render deviates from full render by {err:.3g}")


def _report_row(r: UpdateReport) -> dict:
    row = {
        "iteration": r.iteration,
        "stage": r.stage,
        "active_count": r.active_count,
        "frozen_this_stage": r.frozen_this_stage,
        "subsampled_view_ids": " ".join(str(v) for v in r.view_ids),
    }
    for name in ACTIVITY_ATTRIBUTES:
        row[f"threshold_{name}"] = r.thresholds.get(name, float("nan"))
    row["mean_loss"] = r.mean_loss
    return row


def write_csv(path, rows: List[dict]) -> None:
    if not rows:
        with open(path, "w", newline="") as fh:
            fh.write("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
