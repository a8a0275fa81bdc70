"""Numba vs pure-numpy kernels: forward, backward and one Adam step.

Usage:
    python benchmarks/bench_backends.py [--gaussians 2000] [--resolution 64] [--repeats 5]

Both backends run the same cloud and camera; the script also reports the
largest per-pixel difference between the two forward renders and the
largest relative gradient difference so the speed numbers are comparing
equivalent work.
"""

import argparse
import time

import numpy as np

from oitsplat.backward import backward_oit
from oitsplat.io import random_cloud, ring_cameras
from oitsplat.losses import loss
from oitsplat.optim import AdamState, LearningRates, adam_step
from oitsplat.rasterizer import render_oit


def best_of(fn, repeats):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, default=2000)
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    cloud = random_cloud(args.gaussians, rng)
    cam = ring_cameras(1, args.resolution)[0]
    target = rng.random((args.resolution, args.resolution, 3)).astype(np.float32)

    results = {}
    for backend in ("numba", "numpy"):
        out = render_oit(cloud, cam, backend=backend)
        _, dL = loss(out.image, target)
        grads = backward_oit(cloud, cam, out, dL, backend=backend)
        work = cloud.copy()
        adam = AdamState.for_cloud(work)
        results[backend] = {
            "image": out.image,
            "grads": grads,
            "pairs": out.splat_pixel_pairs,
            "forward": best_of(lambda: render_oit(cloud, cam, backend=backend), args.repeats),
            "backward": best_of(lambda: backward_oit(cloud, cam, out, dL, backend=backend), args.repeats),
            "adam": best_of(
                lambda: adam_step(work, grads, adam, None, LearningRates(), 0, backend=backend), args.repeats
            ),
        }

    nb, np_ = results["numba"], results["numpy"]
    img_diff = float(np.max(np.abs(nb["image"] - np_["image"])))
    g_diff = max(
        float(np.max(np.abs(a - getattr(np_["grads"], k))) / (np.max(np.abs(a)) + 1e-30))
        for k, a in nb["grads"].per_gaussian().items()
    )
    print(f"{args.gaussians} Gaussians, {args.resolution}x{args.resolution}, {nb['pairs']} splat-pixel pairs")
    print(f"{'stage':<10}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for stage in ("forward", "backward", "adam"):
        a, b = nb[stage], np_[stage]
        print(f"{stage:<10}{a:>12.2f}{b:>12.2f}{b / a:>9.1f}x")
    print(f"max |image diff| {img_diff:.2e}, max relative gradient diff {g_diff:.2e}")


if __name__ == "__main__":
    main()
