"""Command-line interface: ``oitsplat <command> [flags]``.

Commands: generate, train, render, eval, gradcheck, bench, compare.
A ``--config FILE`` of ``key = value`` lines supplies defaults for any flag
(keys use the flag name with dashes or underscores); flags on the command
line win. Exit codes: 0 success, 1 failed check, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import DatasetError, InvalidParameterError, OITSplatError

log = logging.getLogger("oitsplat")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config file
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; values may be quoted."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if len(val) >= 2 and val[0] == val[-1] and val[0] in "\"'":
            val = val[1:-1]
        out[key.replace("-", "_")] = val
    return out


def _on_off(text: str) -> bool:
    t = str(text).lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _fractions(text: str) -> List[float]:
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(not 0.0 < v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("fractions must lie in (0, 1]")
    return vals


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("runtime")
    g.add_argument("--config", help="key = value file supplying flag defaults")
    g.add_argument("--backend", choices=("numba", "numpy"), default=None, help="kernel backend (default: env)")
    g.add_argument("--threads", type=int, default=None, help="cap on numba worker threads")
    g.add_argument("--deterministic", action="store_true", help="fixed merge order, zeroed timings")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-v", "--verbose", action="count", default=0)


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--iters", type=int, default=30000, help="total iterations")
    g.add_argument("--activation-iter", type=int, default=15000, help="iteration K that engages the active set")
    g.add_argument("--active-set", type=_on_off, default=True, metavar="on|off")
    g.add_argument("--update-interval", type=int, default=None, help="active-set update interval I (default 500/600)")
    g.add_argument("--subsample", type=int, default=30, help="views S per active-set update")
    g.add_argument("--threshold-fraction", type=float, default=1e-2, help="epsilon as a fraction of the median norm")
    g.add_argument("--threshold", type=float, default=None, help="fixed epsilon for every attribute")
    g.add_argument("--refresh-every", type=int, default=0, help="re-open the active set every n updates")
    g.add_argument("--lambda-ssim", type=float, default=0.2)
    g.add_argument("--densify", type=_on_off, default=True, metavar="on|off")
    g.add_argument("--densify-from", type=int, default=500)
    g.add_argument("--densify-until", type=int, default=15000)
    g.add_argument("--densify-interval", type=int, default=100)
    g.add_argument("--densify-grad", type=float, default=2e-4)
    g.add_argument("--densify-prob", type=float, default=0.5, help="Bernoulli gate on densification candidates")
    g.add_argument("--prune-opacity", type=float, default=0.005)
    g.add_argument("--lr-opacity", type=float, default=0.01)
    g.add_argument("--lr-sigma", type=float, default=0.1)
    g.add_argument("--lr-weight-sh", type=float, default=0.005)
    g.add_argument("--eval-every", type=int, default=0)
    g.add_argument("--check-cache", action="store_true", help="verify every cached render (slow)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oitsplat", description="Differentiable OIT Gaussian splatting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic fixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--gaussians", type=int, default=500)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--resolution", type=int, default=64)
    _common(p)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="initial scene PLY instead of the dataset points")
    _train_flags(p)
    _common(p)

    p = sub.add_parser("render", help="render views of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory or scene PLY")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--format", choices=("png", "f32"), default="png")
    p.add_argument("--sorted", action="store_true", help="use sorted compositing")
    _common(p)

    p = sub.add_parser("eval", help="PSNR / SSIM of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--csv", default=None)
    _common(p)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--scenes", type=int, default=25)
    p.add_argument("--gaussians", type=int, default=10)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-4)
    p.add_argument("--atol", type=float, default=1e-7)
    p.add_argument("--json", action="store_true", help="print a JSON report")
    _common(p)

    p = sub.add_parser("bench", help="per-iteration cost at forced active fractions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--fractions", type=_fractions, default=[1.0, 0.5, 0.25, 0.1])
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--compare-backends", action="store_true", help="also run the numpy backend")
    _common(p)

    p = sub.add_parser("compare", help="sorted vs OIT renders and popping along a path")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--path-steps", type=int, default=8, help="frames between consecutive views")
    p.add_argument("--swap-scene", action="store_true", help="use the two-splat depth-swap scene")
    _common(p)
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _setup_runtime(args) -> None:
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        try:
            import numba

            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        except ImportError:
            pass
    if args.deterministic:
        try:
            import numba

            numba.set_num_threads(1)
        except ImportError:
            pass


def _print_config(args) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("func",)}
    print("# resolved configuration")
    for k in sorted(items):
        print(f"{k} = {items[k]}")
    sys.stdout.flush()


def _load_cloud(path):
    from .io import load_checkpoint, read_ply

    path = Path(path)
    if path.is_dir():
        return load_checkpoint(path)[0]
    if path.suffix == ".ply":
        return read_ply(path)
    raise DatasetError(f"not a checkpoint directory or PLY: {path}")


def _views(dataset, split):
    if split == "all":
        return list(dataset.cameras), list(dataset.images)
    return dataset.split(split)


def _write_csv(path, rows):
    from .training import write_csv

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_csv(path, rows)


def _train_config(args):
    from .optim import DensifyConfig, LearningRates
    from .training import TrainConfig

    return TrainConfig(
        iterations=args.iters,
        activation_iteration=args.activation_iter,
        lambda_ssim=args.lambda_ssim,
        lrs=LearningRates(opacity=args.lr_opacity, log_sigma=args.lr_sigma, weight_sh=args.lr_weight_sh),
        densify=DensifyConfig(
            start=args.densify_from,
            stop=args.densify_until,
            interval=args.densify_interval,
            grad_threshold=args.densify_grad,
            prune_opacity=args.prune_opacity,
            sample_prob=args.densify_prob,
        ),
        densification=args.densify,
        active_set=args.active_set,
        update_interval=args.update_interval,
        subsample_count=args.subsample,
        threshold_fraction=args.threshold_fraction,
        fixed_threshold=args.threshold,
        refresh_every=args.refresh_every,
        seed=args.seed,
        eval_every=args.eval_every,
        deterministic=args.deterministic,
        backend=args.backend,
        check_cache=args.check_cache,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from .io import FixtureSpec, generate_fixture, save_dataset, write_ply

    spec = FixtureSpec(n_gaussians=args.gaussians, n_views=args.views, resolution=args.resolution, seed=args.seed)
    dataset, gt = generate_fixture(spec)
    out = Path(args.out)
    save_dataset(dataset, out)
    write_ply(out / "ground_truth.ply", gt)
    print(f"wrote {len(dataset.cameras)} views and {gt.count} ground-truth Gaussians to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .io import load_dataset, read_ply, save_checkpoint
    from .rasterizer import render_oit, write_png
    from .training import evaluate, train

    dataset = load_dataset(args.data)
    config = _train_config(args)
    init = read_ply(args.init) if args.init else None
    result = train(dataset, config, init=init)
    out = Path(args.out)
    meta = {"iteration": result.iterations_run, "seed": args.seed, "halted_early": result.halted_early}
    save_checkpoint(out / "checkpoint", result.cloud, result.adam, result.active, meta)
    _write_csv(out / "metrics.csv", result.metrics)
    _write_csv(out / "active_set.csv", result.active_log)
    if result.eval_log:
        _write_csv(out / "eval.csv", result.eval_log)
    cams, imgs = dataset.split("test")
    (out / "renders").mkdir(parents=True, exist_ok=True)
    for i, cam in zip(dataset.test_idx, cams):
        write_png(out / "renders" / f"test_{i:04d}.png", render_oit(result.cloud, cam, config.background).image)
    if cams:
        m = evaluate(result.cloud, cams, imgs, config.background, args.backend)
        print(f"held-out PSNR {m['psnr']:.3f} dB  SSIM {m['ssim']:.4f}")
    print(f"{result.iterations_run} iterations, {result.cloud.count} Gaussians -> {out / 'checkpoint'}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .io import load_dataset
    from .rasterizer import render_oit, render_sorted, write_f32, write_png

    cloud = _load_cloud(args.checkpoint)
    dataset = load_dataset(args.data)
    cams, _ = _views(dataset, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    renderer = render_sorted if args.sorted else render_oit
    for i, cam in enumerate(cams):
        img = renderer(cloud, cam, backend=args.backend).image
        stem = Path(cam.image_name).stem if cam.image_name else f"{i:04d}"
        if args.format == "png":
            write_png(out / f"{stem}.png", img)
        else:
            write_f32(out / f"{stem}.f32", img)
    print(f"rendered {len(cams)} views to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io import load_dataset
    from .losses import psnr, ssim
    from .rasterizer import render_oit

    cloud = _load_cloud(args.checkpoint)
    dataset = load_dataset(args.data)
    cams, imgs = _views(dataset, args.split)
    rows = []
    for cam, img in zip(cams, imgs):
        out = np.clip(render_oit(cloud, cam, backend=args.backend).image, 0.0, 1.0)
        rows.append({"image_name": cam.image_name, "psnr": psnr(out, img), "ssim": ssim(out, img)})
    mp = float(np.mean([r["psnr"] for r in rows])) if rows else float("nan")
    ms = float(np.mean([r["ssim"] for r in rows])) if rows else float("nan")
    print(f"views {len(rows)}  PSNR {mp:.3f} dB  SSIM {ms:.4f}  LPIPS n/a (out of scope)")
    if args.csv:
        _write_csv(args.csv, rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(
        scenes=args.scenes, n_gaussians=args.gaussians, size=args.size, seed=args.seed,
        step=args.step, rtol=args.rtol, atol=args.atol, backend=args.backend,
    )
    if args.json:
        print(json.dumps(report.to_dict(), indent=1))
    else:
        print(report.table())
        print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    from .bench import bench_fractions
    from .io import load_dataset

    cloud = _load_cloud(args.checkpoint)
    dataset = load_dataset(args.data)
    cams, imgs = dataset.split("train")
    backends = [args.backend]
    if args.compare_backends:
        backends = ["numba", "numpy"]
    rows = []
    for backend in backends:
        for r in bench_fractions(
            cloud, cams, imgs, args.fractions, args.iters, args.seed,
            repeats=args.repeats, backend=backend, deterministic=args.deterministic,
        ):
            from .kernels import _resolve

            rows.append({"backend": _resolve(backend), **r})
    _write_csv(args.out, rows)
    for r in rows:
        print(
            f"{r['backend']:<6} rho={r['rho']:<5} pairs={r['splat_pixel_pairs']:.0f} "
            f"({r.get('pairs_ratio', float('nan')):.3f}x)  wall={r['wall_ms']:.2f} ms"
        )
    return EXIT_OK


def cmd_compare(args) -> int:
    from . import compare as cmp
    from .io import load_dataset
    from .rasterizer import write_png

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.swap_scene:
        cloud, path, swap = cmp.swap_scene()
        cams = [path[swap], path[swap + 1]]
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("compare needs --checkpoint and --data unless --swap-scene is given")
        cloud = _load_cloud(args.checkpoint)
        dataset = load_dataset(args.data)
        cams = list(dataset.cameras)
        path = cmp.interpolate_cameras(cams, args.path_steps)
        swap = None
    rows, s_imgs, o_imgs = cmp.compare_views(cloud, cams, backend=args.backend)
    for r, s, o in zip(rows, s_imgs, o_imgs):
        write_png(out / f"grid_{r['view']:04d}.png", cmp.side_by_side(s, o))
    _write_csv(out / "views.csv", rows)
    ds, do = cmp.path_deltas(cloud, path, backend=args.backend)
    deltas = [{"frame": i + 1, "delta_sorted": float(a), "delta_oit": float(b)} for i, (a, b) in enumerate(zip(ds, do))]
    _write_csv(out / "path_deltas.csv", deltas)
    k = swap if swap is not None else int(np.argmax(ds)) if len(ds) else 0
    if len(ds):
        ratio = ds[k] / do[k] if do[k] > 0 else float("inf")
        print(f"largest sorted frame delta at frame {k + 1}: sorted {ds[k]:.4g}, OIT {do[k]:.4g}, ratio {ratio:.1f}")
    print(f"wrote {len(rows)} comparison grids to {out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "compare": cmd_compare,
}


def _apply_config_file(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    known = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for key, raw in values.items():
        if key not in known or key in ("help", "config"):
            raise UsageError(f"{args.config}: unknown key {key!r} for command {args.command}")
        action = known[key]
        if action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}") from None
        elif isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            defaults[key] = _on_off(raw)
        elif isinstance(action, argparse._CountAction):  # noqa: SLF001
            defaults[key] = int(raw)
        else:
            defaults[key] = raw
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"{args.config}: {key} must be one of {sorted(action.choices)}")
    sub.set_defaults(**defaults)
    # required flags may now come from the file
    for key in defaults:
        known[key].required = False
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        # a config file may supply required flags, so parse leniently first
        argv = list(sys.argv[1:] if argv is None else argv)
        args = _parse(parser, argv)
        _setup_runtime(args)
        _print_config(args)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, InvalidParameterError, DatasetError, OITSplatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _parse(parser, argv):
    cfg = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            cfg = argv[i + 1]
        elif a.startswith("--config="):
            cfg = a.split("=", 1)[1]
    if cfg is None:
        return parser.parse_args(argv)
    # relax required flags until the file has been applied
    command = next((a for a in argv if a in COMMANDS), None)
    if command is None:
        return parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[command]  # noqa: SLF001
    required = [a for a in sub._actions if a.required]  # noqa: SLF001
    for a in required:
        a.required = False
    args = _apply_config_file(parser, argv)
    missing = [a.option_strings[0] for a in required if getattr(args, a.dest) is None]
    if missing:
        parser.error(f"the following arguments are required: {', '.join(missing)}")
    return args


if __name__ == "__main__":
    sys.exit(main())
