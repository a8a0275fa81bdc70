"""Per-iteration cost of active-set training at forced active fractions."""

from __future__ import annotations

import time
from typing import List, Optional, Sequence

import numpy as np

from .activeset import ActiveSetState, PreRenderCache, reconcile_cache, render_view
from .backward import backward_oit
from .losses import loss as photometric_loss
from .optim import AdamState, LearningRates, adam_step
from .scene import GaussianCloud

DEFAULT_FRACTIONS = (1.0, 0.5, 0.25, 0.1)


def forced_mask(n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random active mask with ``round(rho * n)`` entries set."""
    k = int(round(rho * n))
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=k, replace=False)] = True
    return mask


def bench_fractions(
    cloud: GaussianCloud,
    cameras: Sequence,
    images: Sequence[np.ndarray],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    iters: int = 20,
    seed: int = 0,
    background=(0.0, 0.0, 0.0),
    lambda_ssim: float = 0.2,
    warmup: int = 2,
    repeats: int = 1,
    backend: Optional[str] = None,
    deterministic: bool = False,
) -> List[dict]:
    """Time full training iterations with a forced active set.

    For each fraction the complement is frozen and baked into every view's
    cache up front (reported as ``reconcile_pairs``); then ``iters`` training
    iterations (render over the cache, loss, backward, Adam) run over the
    views in order. ``wall_ms`` is the best of ``repeats`` means.
    """
    rows = []
    for rho in fractions:
        rng = np.random.default_rng(seed)
        work = cloud.copy()
        adam = AdamState.for_cloud(work)
        lrs = LearningRates()
        state = ActiveSetState.full(work.count)
        mask = forced_mask(work.count, rho, rng)
        state.freeze(~mask)
        cache = PreRenderCache.empty(cameras, work.dtype)
        for v, cam in enumerate(cameras):
            reconcile_cache(v, cam, work, cache, state, backend=backend)
        recon_pairs = sum(e.bake_pairs for e in cache.entries)

        def one(i):
            v = i % len(cameras)
            out = render_view(work, v, cameras[v], cache, state, background, backend)
            _, dL = photometric_loss(out.image, images[v], lambda_ssim)
            g = backward_oit(work, cameras[v], out, dL, state.active, backend=backend)
            adam_step(work, g, adam, state.active, lrs, i, update_sigma=False, backend=backend)
            return out.splat_pixel_pairs + g.splat_pixel_pairs

        for i in range(warmup):
            one(i)
        best = np.inf
        pairs = []
        for _ in range(repeats):
            pairs = []
            t0 = time.perf_counter()
            for i in range(iters):
                pairs.append(one(i))
            best = min(best, (time.perf_counter() - t0) / max(iters, 1) * 1e3)
        rows.append(
            {
                "rho": float(rho),
                "active_count": int(mask.sum()),
                "splat_pixel_pairs": float(np.mean(pairs)) if pairs else 0.0,
                "reconcile_pairs": int(recon_pairs),
                "wall_ms": 0.0 if deterministic else float(best),
            }
        )
    full = rows[0] if rows and rows[0]["rho"] == 1.0 else None
    for r in rows:
        if full is not None:
            r["pairs_ratio"] = r["splat_pixel_pairs"] / max(full["splat_pixel_pairs"], 1.0)
            r["speedup"] = full["wall_ms"] / r["wall_ms"] if r["wall_ms"] > 0 else float("nan")
    return rows
