import json

import numpy as np
import pytest

from conftest import make_scene
from oitsplat.activeset import ActiveSetState
from oitsplat.errors import DatasetError
from oitsplat.io import (
    Dataset,
    FixtureSpec,
    cloud_from_points,
    generate_fixture,
    load_checkpoint,
    load_dataset,
    read_blob,
    read_ply,
    read_points_ply,
    ring_cameras,
    save_checkpoint,
    save_dataset,
    write_blob,
    write_ply,
    write_points_ply,
)
from oitsplat.optim import AdamState
from oitsplat.scene import GaussianCloud


def _random_cloud(dtype, n=7):
    cloud, _ = make_scene(0, n=n, dtype=np.float64)
    rng = np.random.default_rng(0)
    cloud.sh_color[:] = rng.standard_normal(cloud.sh_color.shape)
    cloud.weight_sh[:] = rng.standard_normal(cloud.weight_sh.shape)
    cloud.sigma = 6.123456789
    return cloud.astype(dtype)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_ply_round_trip_is_bitwise(tmp_path, dtype):
    cloud = _random_cloud(dtype)
    write_ply(tmp_path / "s.ply", cloud)
    back = read_ply(tmp_path / "s.ply")
    assert back.dtype == dtype and back.sigma == cloud.sigma
    for name in GaussianCloud.PER_GAUSSIAN:
        assert np.array_equal(getattr(back, name), getattr(cloud, name)), name


def test_ply_layout_is_channel_major(tmp_path):
    """The f_rest block lists all red coefficients, then green, then blue."""
    cloud = _random_cloud(np.float32, n=1)
    write_ply(tmp_path / "s.ply", cloud)
    raw = (tmp_path / "s.ply").read_bytes()
    header, body = raw.split(b"end_header\n", 1)
    names = [l.split()[-1].decode() for l in header.splitlines() if l.startswith(b"property")]
    assert names[:6] == ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    vals = dict(zip(names, np.frombuffer(body, dtype="<f4")))
    assert vals["f_rest_0"] == cloud.sh_color[0, 1, 0]
    assert vals["f_rest_15"] == cloud.sh_color[0, 1, 1]
    assert vals["rot_0"] == cloud.quat[0, 0]
    assert b"comment sigma" in header


def test_read_ply_errors(tmp_path):
    with pytest.raises(DatasetError, match="missing"):
        read_ply(tmp_path / "nope.ply")
    (tmp_path / "bad.ply").write_bytes(b"not a ply\n")
    with pytest.raises(DatasetError):
        read_ply(tmp_path / "bad.ply")
    write_points_ply(tmp_path / "pts.ply", np.zeros((2, 3)))
    with pytest.raises(DatasetError, match="missing vertex properties"):
        read_ply(tmp_path / "pts.ply")


def test_points_ply_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((10, 3)).astype(np.float32)
    cols = rng.random((10, 3)).astype(np.float32)
    write_points_ply(tmp_path / "p.ply", pts, cols)
    p2, c2 = read_points_ply(tmp_path / "p.ply")
    assert np.array_equal(p2, pts)
    np.testing.assert_allclose(c2, cols, atol=0.5 / 255 + 1e-7)


def test_split_rule():
    cams = ring_cameras(20, 4)
    ds = Dataset(cams, [np.zeros((4, 4, 3), np.float32)] * 20)
    assert ds.test_idx.tolist() == [0, 8, 16]
    assert len(ds.train_idx) == 17 and 8 not in ds.train_idx
    tc, ti = ds.split("test")
    assert len(tc) == 3 and tc[1] is cams[8]


def test_dataset_rejects_mismatched_image():
    cams = ring_cameras(2, 4)
    with pytest.raises(DatasetError):
        Dataset(cams, [np.zeros((4, 4, 3)), np.zeros((5, 4, 3))])


def test_dataset_save_load_round_trip(tmp_path):
    ds, _ = generate_fixture(FixtureSpec(n_gaussians=20, n_views=3, resolution=12, seed=2))
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert len(back.cameras) == 3
    for a, b in zip(ds.images, back.images):
        np.testing.assert_allclose(a, b, atol=0.5 / 255 + 1e-6)
    for a, b in zip(ds.cameras, back.cameras):
        assert np.array_equal(a.world_to_cam, b.world_to_cam)
    assert np.array_equal(back.init_points, ds.init_points)


def test_missing_png_error_names_file(tmp_path):
    ds, _ = generate_fixture(FixtureSpec(n_gaussians=5, n_views=2, resolution=8, seed=0))
    save_dataset(ds, tmp_path)
    (tmp_path / "images" / "0001.png").unlink()
    with pytest.raises(DatasetError, match="0001.png"):
        load_dataset(tmp_path)


def test_malformed_cameras_json(tmp_path):
    (tmp_path / "cameras.json").write_text(json.dumps([{"width": 3}]))
    with pytest.raises(DatasetError, match="camera #0"):
        load_dataset(tmp_path)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing_dir")


def test_fixture_is_deterministic_and_nontrivial():
    a, ga = generate_fixture(FixtureSpec(n_gaussians=30, n_views=4, resolution=16, seed=5))
    b, gb = generate_fixture(FixtureSpec(n_gaussians=30, n_views=4, resolution=16, seed=5))
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    assert np.array_equal(ga.mu, gb.mu)
    assert all(float(np.var(img)) > 1e-3 for img in a.images)
    c, _ = generate_fixture(FixtureSpec(n_gaussians=30, n_views=4, resolution=16, seed=6))
    assert not np.array_equal(a.images[0], c.images[0])


def test_fixture_without_gaussians_is_background():
    ds, _ = generate_fixture(FixtureSpec(n_gaussians=0, n_views=2, resolution=8), background=(0.25, 0.5, 0.75))
    for img in ds.images:
        np.testing.assert_allclose(img, np.broadcast_to([0.25, 0.5, 0.75], img.shape))


def test_cloud_from_points():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=np.float64)
    cams = ring_cameras(4, 8)
    c = cloud_from_points(pts, np.full((5, 3), 0.5), cams, dtype=np.float64)
    assert c.opacity == pytest.approx(0.1)
    np.testing.assert_allclose(c.sh_color[:, 0], 0.0)
    # point 0 has three neighbours at distance 1
    np.testing.assert_allclose(c.scale[0], 1.0)
    depths = np.concatenate([pts @ k.rotation[2] + k.translation[2] for k in cams])
    assert c.sigma == pytest.approx(np.percentile(depths, 90))


def test_blob_round_trip_and_errors(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.int64).reshape(2, 3), "b": np.linspace(0, 1, 4, dtype=np.float32)}
    write_blob(tmp_path / "x.bin", arrays, {"k": 1})
    back, meta = read_blob(tmp_path / "x.bin")
    assert meta == {"k": 1}
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])
    (tmp_path / "y.bin").write_bytes(b"garbage!")
    with pytest.raises(DatasetError):
        read_blob(tmp_path / "y.bin")


def test_checkpoint_round_trip(tmp_path):
    cloud = _random_cloud(np.float32)
    adam = AdamState.for_cloud(cloud)
    adam.steps[:] = np.arange(cloud.count)
    adam.m["mu"][:] = 0.5
    adam.sigma_m, adam.sigma_steps = 0.25, 3
    st = ActiveSetState.full(cloud.count, update_interval=250)
    st.thresholds = {"mu": 1e-3}
    st.freeze(np.arange(cloud.count) < 3)
    save_checkpoint(tmp_path / "ck", cloud, adam, st, {"iteration": 42})
    c2, a2, s2, meta = load_checkpoint(tmp_path / "ck")
    assert meta["iteration"] == 42
    assert np.array_equal(c2.mu, cloud.mu)
    assert np.array_equal(a2.steps, adam.steps) and np.array_equal(a2.m["mu"], adam.m["mu"])
    assert (a2.sigma_m, a2.sigma_steps) == (0.25, 3)
    assert np.array_equal(s2.active, st.active) and np.array_equal(s2.frozen_stage, st.frozen_stage)
    assert s2.stage == 1 and s2.thresholds == {"mu": 1e-3} and s2.update_interval == 250
    with pytest.raises(DatasetError):
        load_checkpoint(tmp_path / "empty")
