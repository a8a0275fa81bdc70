"""Adam with per-attribute learning rates, frozen-row masking, densification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import kernels
from .backward import GradientBuffer
from .scene import GaussianCloud, quat_to_rotmat

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class LearningRates:
    mu_init: float = 1.6e-4
    mu_final: float = 1.6e-6
    mu_max_steps: int = 30000
    sh_dc: float = 2.5e-3
    sh_rest: float = 2.5e-3 / 20.0
    log_scale: float = 5e-3
    quat: float = 1e-3
    opacity: float = 0.01
    weight_sh: float = 0.005
    log_sigma: float = 0.1

    def mu_at(self, iteration: int, spatial_scale: float = 1.0) -> float:
        """Log-linear decay of the position rate, scaled by the scene extent."""
        t = np.clip(iteration / max(self.mu_max_steps, 1), 0.0, 1.0)
        lr = np.exp(np.log(self.mu_init) * (1 - t) + np.log(self.mu_final) * t)
        return float(lr * spatial_scale)

    def validate(self):
        for name, val in vars(self).items():
            if name != "mu_max_steps" and not val > 0:
                raise ValueError(f"learning rate {name} must be positive")


@dataclass
class AdamState:
    """First/second moments per cloud field plus per-Gaussian step counts."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    steps: np.ndarray
    sigma_m: float = 0.0
    sigma_v: float = 0.0
    sigma_steps: int = 0

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud) -> "AdamState":
        arrays = cloud.arrays()
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
            steps=np.zeros(cloud.count, dtype=np.int64),
        )

    @property
    def count(self) -> int:
        return self.steps.shape[0]

    def select(self, index) -> "AdamState":
        return AdamState(
            m={k: a[index].copy() for k, a in self.m.items()},
            v={k: a[index].copy() for k, a in self.v.items()},
            steps=self.steps[index].copy(),
            sigma_m=self.sigma_m,
            sigma_v=self.sigma_v,
            sigma_steps=self.sigma_steps,
        )

    def grow(self, n_new: int) -> "AdamState":
        """Append zero moments for ``n_new`` fresh Gaussians."""

        def pad(a):
            return np.concatenate([a, np.zeros((n_new,) + a.shape[1:], dtype=a.dtype)])

        return AdamState(
            m={k: pad(a) for k, a in self.m.items()},
            v={k: pad(a) for k, a in self.v.items()},
            steps=pad(self.steps),
            sigma_m=self.sigma_m,
            sigma_v=self.sigma_v,
            sigma_steps=self.sigma_steps,
        )


def _column_rates(name: str, width: int, lrs: LearningRates, mu_lr: float) -> np.ndarray:
    if name == "mu":
        return np.full(width, mu_lr)
    if name == "sh_color":
        cols = np.full(width, lrs.sh_rest)
        cols[:3] = lrs.sh_dc
        return cols
    rate = {
        "quat": lrs.quat,
        "log_scale": lrs.log_scale,
        "opacity_logit": lrs.opacity,
        "weight_sh": lrs.weight_sh,
    }[name]
    return np.full(width, rate)


def adam_step(
    cloud: GaussianCloud,
    grads: GradientBuffer,
    state: AdamState,
    active_mask: Optional[np.ndarray],
    lrs: LearningRates,
    iteration: int,
    spatial_scale: float = 1.0,
    update_sigma: bool = True,
    backend: Optional[str] = None,
) -> GaussianCloud:
    """One Adam update of the active rows (and the shared sigma), in place.

    Rows outside ``active_mask`` keep their parameters, moments and step
    counts bit-for-bit.
    """
    if active_mask is None:
        rows = np.arange(cloud.count, dtype=np.int64)
    else:
        rows = np.flatnonzero(active_mask).astype(np.int64)
    if rows.size:
        state.steps[rows] += 1
        mu_lr = lrs.mu_at(iteration, spatial_scale)
        n = cloud.count
        for name in GaussianCloud.PER_GAUSSIAN:
            param = getattr(cloud, name).reshape(n, -1)
            grad = getattr(grads, name).reshape(n, -1)
            m = state.m[name].reshape(n, -1)
            v = state.v[name].reshape(n, -1)
            kernels.adam_rows(
                param, grad, m, v, state.steps, rows,
                _column_rates(name, param.shape[1], lrs, mu_lr),
                BETA1, BETA2, ADAM_EPS, backend=backend,
            )
        cloud.normalize_quats(rows)

    if update_sigma:
        g = grads.log_sigma
        state.sigma_steps += 1
        state.sigma_m = BETA1 * state.sigma_m + (1 - BETA1) * g
        state.sigma_v = BETA2 * state.sigma_v + (1 - BETA2) * g * g
        mhat = state.sigma_m / (1 - BETA1**state.sigma_steps)
        vhat = state.sigma_v / (1 - BETA2**state.sigma_steps)
        log_sigma = np.log(cloud.sigma) - lrs.log_sigma * mhat / (np.sqrt(vhat) + ADAM_EPS)
        cloud.sigma = float(np.exp(log_sigma))
    return cloud


# ---------------------------------------------------------------------------
# Densification
# ---------------------------------------------------------------------------


@dataclass
class DensifyConfig:
    start: int = 500
    stop: int = 15000
    interval: int = 100
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    sample_prob: float = 0.5


@dataclass
class PositionalGradStats:
    """Running sum of screen-space mean-gradient norms (NDC units) per Gaussian."""

    accum: np.ndarray
    counts: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "PositionalGradStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def add(self, grads: GradientBuffer, visible_index: np.ndarray, width: int, height: int) -> None:
        g = grads.mu2d[visible_index]
        ndc = np.stack([g[:, 0] * 0.5 * width, g[:, 1] * 0.5 * height], axis=1)
        self.accum[visible_index] += np.linalg.norm(ndc, axis=1)
        self.counts[visible_index] += 1

    def mean(self) -> np.ndarray:
        return self.accum / np.maximum(self.counts, 1)


def densify_and_prune(
    cloud: GaussianCloud,
    stats: PositionalGradStats,
    config: DensifyConfig,
    scene_extent: float,
    rng: np.random.Generator,
    adam: Optional[AdamState] = None,
):
    """Clone small / split large high-gradient Gaussians, then prune faint ones.

    Candidates pass a Bernoulli(``sample_prob``) gate. Returns
    ``(cloud, adam, info)`` with all per-Gaussian buffers resized.
    """
    grads = stats.mean()
    candidates = grads >= config.grad_threshold
    if config.sample_prob < 1.0:
        candidates &= rng.random(cloud.count) < config.sample_prob
    scale = cloud.scale
    small = scale.max(axis=1) <= config.percent_dense * scene_extent
    clone_idx = np.flatnonzero(candidates & small)
    split_idx = np.flatnonzero(candidates & ~small)

    clones = cloud.select(clone_idx)

    splits = cloud.select(np.repeat(split_idx, 2))
    if split_idx.size:
        s = np.exp(splits.log_scale.astype(np.float64))
        R = quat_to_rotmat(splits.quat.astype(np.float64))
        offsets = np.einsum("nij,nj->ni", R, rng.normal(size=s.shape) * s)
        splits.mu += offsets.astype(splits.dtype)
        splits.log_scale -= np.log(1.6).astype(splits.dtype)

    keep = np.ones(cloud.count, dtype=bool)
    keep[split_idx] = False
    grown = cloud.select(keep).concat(clones).concat(splits)
    adam_grown = None
    if adam is not None:
        adam_grown = adam.select(keep).grow(clones.count + splits.count)

    alive = grown.opacity >= config.prune_opacity
    pruned = int((~alive).sum())
    if pruned:
        grown = grown.select(alive)
        if adam_grown is not None:
            adam_grown = adam_grown.select(alive)
    info = {"cloned": int(clone_idx.size), "split": int(split_idx.size), "pruned": pruned}
    return grown, adam_grown, info
