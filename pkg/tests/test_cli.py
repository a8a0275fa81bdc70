import csv

import numpy as np
import pytest

from oitsplat.cli import main, read_config_file
from oitsplat.io import read_ply


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "data"), "--gaussians", "60", "--views", "9", "--resolution", "24", "--seed", "1"]) == 0
    train = [
        "train", "--data", str(root / "data"), "--out", str(root / "run"),
        "--iters", "40", "--activation-iter", "20", "--update-interval", "10", "--subsample", "3",
        "--threshold-fraction", "0.8", "--densify-from", "5", "--densify-interval", "5",
        "--eval-every", "20", "--deterministic",
    ]
    assert main(train) == 0
    return root, train


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_generate_layout(workdir):
    root, _ = workdir
    data = root / "data"
    assert (data / "cameras.json").exists() and (data / "points.ply").exists()
    assert len(list((data / "images").glob("*.png"))) == 9
    assert read_ply(data / "ground_truth.ply").count == 60


def test_train_outputs(workdir, capsys):
    root, _ = workdir
    run = root / "run"
    assert (run / "checkpoint" / "scene.ply").exists() and (run / "checkpoint" / "state.bin").exists()
    metrics = _rows(run / "metrics.csv")
    assert len(metrics) == 40
    assert set(metrics[0]) == {"iteration", "loss", "active_count", "splat_pixel_pairs", "wall_ms"}
    active = _rows(run / "active_set.csv")
    assert [int(r["iteration"]) for r in active] == [20, 30]
    assert len(active[0]["subsampled_view_ids"].split()) == 3
    assert "threshold_mu" in active[0]
    assert [int(r["iteration"]) for r in _rows(run / "eval.csv")] == [20, 40]
    assert sorted(p.name for p in (run / "renders").iterdir()) == ["test_0000.png", "test_0008.png"]


def test_deterministic_train_is_bitwise_repeatable(workdir, tmp_path):
    root, train = workdir
    argv = list(train)
    argv[argv.index("--out") + 1] = str(tmp_path / "again")
    assert main(argv) == 0
    for rel in ("checkpoint/scene.ply", "checkpoint/state.bin", "metrics.csv", "active_set.csv"):
        assert (tmp_path / "again" / rel).read_bytes() == (root / "run" / rel).read_bytes(), rel


def test_zero_iterations(workdir, tmp_path):
    root, _ = workdir
    rc = main(["train", "--data", str(root / "data"), "--out", str(tmp_path / "z"), "--iters", "0", "--subsample", "3"])
    assert rc == 0
    assert _rows(tmp_path / "z" / "metrics.csv") == []


def test_render_and_eval(workdir, tmp_path, capsys):
    root, _ = workdir
    ck = str(root / "run" / "checkpoint")
    assert main(["render", "--checkpoint", ck, "--data", str(root / "data"), "--out", str(tmp_path / "r")]) == 0
    assert len(list((tmp_path / "r").glob("*.png"))) == 2
    assert main(["render", "--checkpoint", ck + "/scene.ply", "--data", str(root / "data"),
                 "--out", str(tmp_path / "f"), "--format", "f32", "--split", "all", "--sorted"]) == 0
    assert len(list((tmp_path / "f").glob("*.f32"))) == 9
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ck, "--data", str(root / "data"), "--csv", str(tmp_path / "e.csv")]) == 0
    out = capsys.readouterr().out
    assert "PSNR" in out and "LPIPS n/a" in out
    assert len(_rows(tmp_path / "e.csv")) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--scenes", "1", "--gaussians", "4"]) == 0
    assert "PASS" in capsys.readouterr().out
    # an absurd tolerance cannot be met
    assert main(["gradcheck", "--scenes", "1", "--gaussians", "4", "--rtol", "1e-30", "--atol", "1e-30"]) == 1


def test_bench_command(workdir, tmp_path):
    root, _ = workdir
    rc = main(["bench", "--checkpoint", str(root / "run" / "checkpoint"), "--data", str(root / "data"),
               "--out", str(tmp_path / "b.csv"), "--fractions", "1,0.5", "--iters", "2", "--compare-backends"])
    assert rc == 0
    rows = _rows(tmp_path / "b.csv")
    assert [(r["backend"], float(r["rho"])) for r in rows] == [("numba", 1.0), ("numba", 0.5), ("numpy", 1.0), ("numpy", 0.5)]


def test_compare_command(workdir, tmp_path, capsys):
    root, _ = workdir
    assert main(["compare", "--swap-scene", "--out", str(tmp_path / "s")]) == 0
    assert "ratio" in capsys.readouterr().out
    deltas = _rows(tmp_path / "s" / "path_deltas.csv")
    assert len(deltas) == 39
    rc = main(["compare", "--checkpoint", str(root / "run" / "checkpoint"), "--data", str(root / "data"),
               "--out", str(tmp_path / "c"), "--path-steps", "2"])
    assert rc == 0
    assert len(_rows(tmp_path / "c" / "views.csv")) == 9
    assert main(["compare", "--out", str(tmp_path / "x")]) == 2


def test_config_file_supplies_flags(workdir, tmp_path, capsys):
    root, _ = workdir
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# training config\ndata = {root / 'data'}\nout = \"{tmp_path / 'o'}\"\niters = 3\nactive-set = off\ndeterministic = true\n")
    assert read_config_file(cfg)["active_set"] == "off"
    capsys.readouterr()
    assert main(["train", "--config", str(cfg), "--iters", "2"]) == 0
    out = capsys.readouterr().out
    assert "iters = 2" in out and "active_set = False" in out and "deterministic = True" in out
    assert len(_rows(tmp_path / "o" / "metrics.csv")) == 2


def test_usage_errors(workdir, tmp_path, capsys):
    root, _ = workdir
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key = 1\n")
    assert main(["train", "--config", str(cfg), "--data", "x", "--out", "y"]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["train", "--data", "x"]) == 2  # missing --out
    assert main(["train", "--bogus"]) == 2
    assert main([]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(root / "data")]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", str(root / "data"), "--out", str(tmp_path / "o"), "--subsample", "50"]) == 2
    assert main(["bench", "--checkpoint", "a", "--data", "b", "--out", "c", "--fractions", "0,2"]) == 2
