"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line with the measured
numbers (shown even under output capture). Criterion 5 dominates the
runtime (about 8 minutes on one core, phase 1 shared with 4 and 6).
"""

import time

import numpy as np
import pytest

from oitsplat.activeset import (
    ActiveSetState,
    PreRenderCache,
    accumulate_subsample_norms,
    classify_active,
    data_relative_thresholds,
    render_view,
    subsample_views,
)
from oitsplat.bench import bench_fractions
from oitsplat.cli import main as cli_main
from oitsplat.compare import path_deltas, swap_scene
from oitsplat.gradcheck import random_scene, run_gradcheck
from oitsplat.rasterizer import render_oit, render_sorted, render_with_prerender
from oitsplat.training import TrainConfig, evaluate, train

# desk-scale schedule: 5k iterations, K = 2500, I = 250, S = 10
SCHEDULE = dict(
    iterations=5000,
    activation_iteration=2500,
    update_interval=250,
    subsample_count=10,
    threshold_fraction=0.7,
    seed=0,
)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

    return emit


@pytest.fixture(scope="module")
def phase1(default_fixture):
    """The default fixture trained to the activation iteration K (shared by 4, 5, 6)."""
    ds, gt = default_fixture
    t0 = time.perf_counter()
    head = train(ds, TrainConfig(**{**SCHEDULE, "iterations": 2500, "mu_lr_steps": 5000}))
    return ds, gt, head, time.perf_counter() - t0


def test_criterion_1_order_independence(default_fixture, report):
    ds, gt = default_fixture
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for dtype in (np.float32, np.float64):
        cloud = gt.astype(dtype)
        errs = []
        for cam in (ds.cameras[0], ds.cameras[7]):
            ref = render_oit(cloud, cam).image
            for _ in range(20):
                img = render_oit(cloud, cam, order=rng.permutation(cloud.count)).image
                errs.append(float(np.max(np.abs(img - ref))))
        worst[np.dtype(dtype).name] = max(errs)
    dt = time.perf_counter() - t0
    ok = worst["float32"] <= 1e-5 and worst["float64"] <= 1e-12 and dt < 10
    report(1, ok, f"max diff f32 {worst['float32']:.2e} (<=1e-5), f64 {worst['float64']:.2e} (<=1e-12), {dt:.1f}s (<10s)")
    assert ok


def test_criterion_2_gradient_correctness(report):
    t0 = time.perf_counter()
    rep = run_gradcheck(scenes=25, n_gaussians=10, size=8, seed=0)
    dt = time.perf_counter() - t0
    checked = sum(a.checked for a in rep.attributes.values())
    skipped = sum(a.skipped for a in rep.attributes.values())
    max_rel = max(a.max_rel for a in rep.attributes.values())
    ok = rep.passed and dt < 60
    report(
        2, ok,
        f"{checked} entries checked ({skipped} straddling a branch skipped), "
        f"{len(rep.failures)} failures, max rel err {max_rel:.2e} (<=1e-4), {dt:.1f}s (<60s)",
    )
    assert ok, rep.table()


def test_criterion_3_prerender_exactness(default_fixture, report):
    ds, gt = default_fixture
    cams = ds.cameras[:6]
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_split = 0.0
    for frac in (0.9, 0.7, 0.5, 0.3, 0.1):
        for cam in cams:
            active = rng.random(gt.count) < frac
            base = render_oit(gt, cam, index=np.flatnonzero(~active)).per_pixel_acc
            out, _ = render_with_prerender(gt, active, cam, base)
            worst_split = max(worst_split, float(np.max(np.abs(out.image - render_oit(gt, cam).image))))
    worst_staged = 0.0
    for schedule in range(3):
        state = ActiveSetState.full(gt.count)
        cache = PreRenderCache.empty(cams, gt.dtype)
        for stage in range(4):
            state.freeze(state.active & (rng.random(gt.count) < 0.25 + 0.1 * schedule))
            # visit a random subset of views so some caches fall several stages behind
            for v in rng.choice(len(cams), size=3, replace=False):
                out = render_view(gt, v, cams[v], cache, state)
                worst_staged = max(worst_staged, float(np.max(np.abs(out.image - render_oit(gt, cams[v]).image))))
    dt = time.perf_counter() - t0
    ok = worst_split <= 1e-5 and worst_staged <= 1e-5 and dt < 30
    report(3, ok, f"splits 90/10..10/90 max diff {worst_split:.2e}, 3 staged schedules {worst_staged:.2e} (<=1e-5), {dt:.1f}s (<30s)")
    assert ok


def test_criterion_4_sparsity_proportional_work(phase1, report):
    ds, _, head, _ = phase1
    cams, imgs = ds.split("train")
    rows = bench_fractions(head.cloud, cams, imgs, [1.0, 0.1], iters=34, repeats=3, seed=0)
    full, sparse = rows
    ok = sparse["pairs_ratio"] <= 0.12 and sparse["speedup"] >= 2.0
    report(
        4, ok,
        f"{head.cloud.count} Gaussians: pairs ratio {sparse['pairs_ratio']:.3f} (<=0.12), "
        f"wall {full['wall_ms']:.1f} -> {sparse['wall_ms']:.1f} ms/iter, speedup {sparse['speedup']:.2f}x (>=2)",
    )
    assert ok


def test_criterion_5_end_to_end(phase1, report):
    """Phase 1 is shared (it is identical with or without the active set); the two
    phase-2 continuations run in ABBA order so slow machine drift cancels."""
    ds, _, head, t_head = phase1
    test_cams, test_imgs = ds.split("test")
    t_start = time.perf_counter()

    def run(active_set):
        cfg = TrainConfig(**{**SCHEDULE, "active_set": active_set})
        adam = head.adam.select(np.arange(head.adam.count))  # train mutates its optimizer state
        return train(ds, cfg, init=head.cloud, adam=adam, start_iteration=2500)

    results = {True: [], False: []}
    for flag in (False, True, True, False):
        results[flag].append(run(flag))
    on, off = results[True], results[False]
    psnr_on = evaluate(on[0].cloud, test_cams, test_imgs)["psnr"]
    psnr_off = evaluate(off[0].cloud, test_cams, test_imgs)["psnr"]
    wall_on = t_head + np.mean([r.wall_seconds for r in on])
    wall_off = t_head + np.mean([r.wall_seconds for r in off])
    runtime = t_head + time.perf_counter() - t_start
    same_iters = all(r.iterations_run == 2500 and not r.halted_early for r in on + off)
    repeatable = np.array_equal(on[0].cloud.mu, on[1].cloud.mu) and np.array_equal(off[0].cloud.mu, off[1].cloud.mu)
    ok = psnr_on >= 30.0 and wall_on < wall_off and psnr_off - psnr_on <= 0.5 and same_iters and runtime < 900
    report(
        5, ok,
        f"held-out PSNR on {psnr_on:.2f} dB (>=30), off {psnr_off:.2f} dB, drop {psnr_off - psnr_on:.2f} (<=0.5); "
        f"5k-iteration wall on {wall_on:.0f}s vs off {wall_off:.0f}s; final active {on[0].active.count}/{on[0].cloud.count}; "
        f"total {runtime:.0f}s (<900s)",
    )
    assert repeatable
    assert ok


def test_criterion_6_subsampling_reliability(phase1, report):
    """FPS is fixed once its uniformly random first view is drawn, so the 20
    possible subsamples are enumerated and the expected agreement is exact."""
    ds, _, head, _ = phase1
    cams, imgs = ds.cameras, ds.images  # all 20 fixture views
    cloud = head.cloud
    state = ActiveSetState.full(cloud.count)
    cache = PreRenderCache.empty(cams, cloud.dtype)
    frac = SCHEDULE["threshold_fraction"]
    norms_all, _, _ = accumulate_subsample_norms(cloud, cams, imgs, np.arange(len(cams)), cache, state)
    dec_all = classify_active(norms_all, data_relative_thresholds(norms_all, frac))
    agree = []
    for first in range(len(cams)):
        ids = subsample_views(cams, 10, ("first", first))
        norms_sub, _, _ = accumulate_subsample_norms(cloud, cams, imgs, ids, cache, state)
        dec_sub = classify_active(norms_sub, data_relative_thresholds(norms_sub, frac))
        agree.append(float(np.mean(dec_sub == dec_all)))
    agree = np.array(agree)
    ok = agree.mean() >= 0.95
    report(
        6, ok,
        f"expected agreement S=10 vs all 20 views {agree.mean():.4f} (>=0.95); per subsample min {agree.min():.4f}, "
        f"max {agree.max():.4f}, {int((agree < 0.95).sum())}/20 below 0.95; {dec_all.mean():.1%} active by all views",
    )
    assert ok


def test_criterion_7_oracle_equivalence(report):
    worst = 0.0
    for seed in range(20):
        cloud, cam, bg, _ = random_scene(seed, n=1, size=16)
        a = render_sorted(cloud, cam, bg).image
        b = render_oit(cloud, cam, bg).image
        worst = max(worst, float(np.max(np.abs(a - b))))
    cloud, cams, k = swap_scene()
    ds, do = path_deltas(cloud, cams)
    ratio = ds[k] / do[k]
    ok = worst <= 1e-6 and ratio >= 10
    report(7, ok, f"single-Gaussian sorted vs OIT max diff {worst:.2e} (<=1e-6); swap-frame delta sorted {ds[k]:.3f} "
                  f"vs OIT {do[k]:.2e}, ratio {ratio:.0f} (>=10)")
    assert ok


def test_criterion_8_determinism(tmp_path, report):
    data = tmp_path / "data"
    assert cli_main(["generate", "--out", str(data), "--gaussians", "150", "--views", "10", "--resolution", "32"]) == 0
    common = ["train", "--data", str(data), "--iters", "300", "--activation-iter", "150", "--update-interval", "50",
              "--subsample", "4", "--threshold-fraction", "0.7", "--densify-from", "50", "--seed", "7", "--deterministic"]
    for run in ("a", "b"):
        assert cli_main(common + ["--out", str(tmp_path / run)]) == 0
    files = ["checkpoint/scene.ply", "checkpoint/state.bin", "metrics.csv", "active_set.csv"]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    ok = all(same.values())
    report(8, ok, "bitwise identical: " + ", ".join(f"{f} {'yes' if s else 'NO'}" for f, s in same.items()))
    assert ok
