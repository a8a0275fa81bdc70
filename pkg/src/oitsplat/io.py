"""Datasets, synthetic fixtures and on-disk formats (PLY, cameras.json, checkpoints)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .camera import Camera
from .errors import DatasetError
from .scene import SH_C0, SH_COEFFS, WEIGHT_DC_INIT, GaussianCloud, inverse_sigmoid

# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    cameras: List[Camera]
    images: List[np.ndarray]
    init_points: Optional[np.ndarray] = None
    init_colors: Optional[np.ndarray] = None
    test_every: int = 8

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise DatasetError("number of cameras and images differ")
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise DatasetError(
                    f"view {cam.image_name!r}: image is {img.shape[:2]}, camera expects {(cam.height, cam.width)}"
                )

    @property
    def test_idx(self) -> np.ndarray:
        return np.arange(0, len(self.cameras), self.test_every, dtype=np.int64)

    @property
    def train_idx(self) -> np.ndarray:
        mask = np.ones(len(self.cameras), dtype=bool)
        mask[self.test_idx] = False
        return np.flatnonzero(mask)

    def split(self, which: str):
        idx = self.train_idx if which == "train" else self.test_idx
        return [self.cameras[i] for i in idx], [self.images[i] for i in idx]


def read_png(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise DatasetError(f"missing image file: {path}") from None
    except Exception as exc:  # PIL raises several unrelated types
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def write_png(path, image) -> None:
    from .rasterizer import write_png as _write

    _write(path, image)


def read_cameras_json(path) -> List[Camera]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing camera file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, list):
        raise DatasetError(f"{path}: expected a JSON array of cameras")
    cams = []
    for i, entry in enumerate(data):
        try:
            cams.append(Camera.from_dict(entry))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: camera #{i} is malformed ({exc})") from exc
    return cams


def write_cameras_json(path, cameras: Sequence[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    cams = read_cameras_json(root / "cameras.json")
    images = []
    for cam in cams:
        if not cam.image_name:
            raise DatasetError(f"{root / 'cameras.json'}: camera without image_name")
        img = read_png(root / cam.image_name)
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(
                f"view {cam.image_name!r}: image is {img.shape[1]}x{img.shape[0]}, "
                f"camera expects {cam.width}x{cam.height}"
            )
        images.append(img)
    points = colors = None
    if (root / "points.ply").exists():
        points, colors = read_points_ply(root / "points.ply")
    return Dataset(cams, images, points, colors)


def save_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        if not cam.image_name:
            cam.image_name = f"images/{i:04d}.png"
        write_png(root / cam.image_name, img)
    write_cameras_json(root / "cameras.json", dataset.cameras)
    if dataset.init_points is not None:
        write_points_ply(root / "points.ply", dataset.init_points, dataset.init_colors)


# ---------------------------------------------------------------------------
# Synthetic fixture
# ---------------------------------------------------------------------------


@dataclass
class FixtureSpec:
    n_gaussians: int = 500
    n_views: int = 20
    resolution: int = 64
    seed: int = 0
    radius: float = 3.0
    fov_deg: float = 40.0
    scale: float = 0.06
    point_noise: float = 0.01


def ring_cameras(n_views: int, resolution: int, radius: float = 3.0, fov_deg: float = 40.0) -> List[Camera]:
    cams = []
    for i in range(n_views):
        theta = 2.0 * np.pi * i / n_views
        eye = [radius * np.cos(theta), radius * np.sin(theta), 0.6 * np.sin(3.0 * theta)]
        cam = Camera.look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], resolution, resolution, fov_deg)
        cam.image_name = f"images/{i:04d}.png"
        cams.append(cam)
    return cams


def random_cloud(n: int, rng: np.random.Generator, scale: float = 0.06, sigma: float = 5.0, dtype=np.float32):
    """Seeded random Gaussians in the unit box with modest anisotropy."""
    cloud = GaussianCloud.zeros(n, dtype=np.float64, sigma=sigma)
    cloud.mu[:] = rng.uniform(-0.5, 0.5, (n, 3))
    cloud.quat[:] = rng.normal(size=(n, 4))
    cloud.normalize_quats()
    cloud.log_scale[:] = np.log(scale) + rng.uniform(-0.35, 0.35, (n, 3))
    cloud.opacity_logit[:] = inverse_sigmoid(rng.uniform(0.3, 0.95, n))
    base = rng.uniform(0.1, 0.9, (n, 3))
    cloud.sh_color[:, 0, :] = (base - 0.5) / SH_C0
    cloud.sh_color[:, 1:4, :] = rng.normal(0.0, 0.08, (n, 3, 3))
    cloud.weight_sh[:, 0] = WEIGHT_DC_INIT + rng.uniform(-1.0, 1.0, n)
    return cloud.astype(dtype)


def generate_fixture(spec: Optional[FixtureSpec] = None, background=(0.0, 0.0, 0.0), **kw):
    """Ground-truth cloud, cameras on a ring, and images rendered with OIT.

    Returns ``(dataset, gt_cloud)``. The dataset's ``init_points`` are the
    ground-truth centers plus Gaussian noise, with the view-independent
    colors.
    """
    from .rasterizer import render_oit

    spec = spec or FixtureSpec(**kw)
    rng = np.random.default_rng(spec.seed)
    cams = ring_cameras(spec.n_views, spec.resolution, spec.radius, spec.fov_deg)
    gt = random_cloud(spec.n_gaussians, rng, spec.scale)
    images = [np.clip(render_oit(gt, c, background).image, 0.0, 1.0).astype(np.float32) for c in cams]
    noise = rng.normal(0.0, spec.point_noise, gt.mu.shape)
    points = (gt.mu.astype(np.float64) + noise).astype(np.float32)
    colors = np.clip(gt.sh_color[:, 0, :].astype(np.float64) * SH_C0 + 0.5, 0.0, 1.0).astype(np.float32)
    return Dataset(cams, images, points, colors), gt


def cloud_from_points(points, colors, cameras: Sequence[Camera], dtype=np.float32, opacity=0.1) -> GaussianCloud:
    """Initial cloud from a colored point set.

    Scales come from the mean squared distance to the three nearest
    neighbours; sigma is the 90th percentile of camera-frame depths.
    """
    from scipy.spatial import cKDTree

    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(pts).query(pts, k=k)
        mean_sq = np.mean(d[:, 1:] ** 2, axis=1)
    else:
        mean_sq = np.array([0.01])
    mean_sq = np.maximum(mean_sq, 1e-7)
    depths = np.concatenate([pts @ c.rotation[2] + c.translation[2] for c in cameras]) if cameras else np.ones(1)
    depths = depths[depths > 0]
    sigma = float(np.percentile(depths, 90)) if depths.size else 1.0
    cloud = GaussianCloud.zeros(n, dtype=np.float64, sigma=sigma)
    cloud.mu[:] = pts
    cloud.log_scale[:] = (0.5 * np.log(mean_sq))[:, None]
    cloud.opacity_logit[:] = inverse_sigmoid(opacity)
    if colors is not None:
        cloud.sh_color[:, 0, :] = (np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0
    return cloud.astype(dtype)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {"float": "<f4", "double": "<f8", "uchar": "u1", "int": "<i4", "uint": "<u4"}
_PLY_NAMES = {np.dtype("<f4"): "float", np.dtype("<f8"): "double"}


def _scene_fields():
    names = ["x", "y", "z"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (SH_COEFFS - 1))]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    names += [f"weight_sh_{i}" for i in range(SH_COEFFS)]
    return names


def write_ply(path, cloud: GaussianCloud) -> None:
    """3DGS-layout binary PLY plus ``weight_sh_*`` and a ``sigma`` header comment."""
    dt = np.dtype(cloud.dtype).newbyteorder("<")
    type_name = _PLY_NAMES[np.dtype(dt.str)]
    names = _scene_fields()
    n = cloud.count
    rest = np.transpose(cloud.sh_color[:, 1:, :], (0, 2, 1)).reshape(n, -1)  # channel-major
    columns = np.concatenate(
        [
            cloud.mu,
            cloud.sh_color[:, 0, :],
            rest,
            cloud.opacity_logit[:, None],
            cloud.log_scale,
            cloud.quat,
            cloud.weight_sh,
        ],
        axis=1,
    ).astype(dt)
    header = ["ply", "format binary_little_endian 1.0", f"comment sigma {cloud.sigma!r}", f"element vertex {n}"]
    header += [f"property {type_name} {name}" for name in names]
    header += ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(columns).tobytes())


def _read_ply_raw(path):
    path = Path(path)
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        raise DatasetError(f"missing PLY file: {path}") from None
    with fh:
        if fh.readline().strip() != b"ply":
            raise DatasetError(f"{path}: not a PLY file")
        props, comments, count = [], [], None
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise DatasetError(f"{path}: truncated header")
            tokens = line.decode("ascii").strip().split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "comment":
                comments.append(tokens[1:])
            elif tokens[0] == "element":
                if tokens[1] == "vertex":
                    count = int(tokens[2])
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    raise DatasetError(f"{path}: list properties are not supported")
                props.append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise DatasetError(f"{path}: only binary_little_endian PLY is supported")
        data = np.frombuffer(fh.read(), dtype=np.dtype(props), count=count)
    return data, comments


def read_ply(path) -> GaussianCloud:
    data, comments = _read_ply_raw(path)
    sigma = 1.0
    for c in comments:
        if len(c) == 2 and c[0] == "sigma":
            sigma = float(c[1])
    names = _scene_fields()
    missing = [n for n in names if n not in data.dtype.names]
    if missing:
        raise DatasetError(f"{path}: missing vertex properties {missing[:4]}...")
    dt = data.dtype["x"].newbyteorder("=")
    n = data.shape[0]

    def cols(prefix, k):
        return np.stack([data[f"{prefix}{i}"] for i in range(k)], axis=1).astype(dt)

    sh = np.empty((n, SH_COEFFS, 3), dtype=dt)
    sh[:, 0, :] = cols("f_dc_", 3)
    sh[:, 1:, :] = np.transpose(cols("f_rest_", 3 * (SH_COEFFS - 1)).reshape(n, 3, SH_COEFFS - 1), (0, 2, 1))
    return GaussianCloud(
        mu=np.stack([data["x"], data["y"], data["z"]], axis=1).astype(dt),
        quat=cols("rot_", 4),
        log_scale=cols("scale_", 3),
        opacity_logit=np.ascontiguousarray(data["opacity"].astype(dt)),
        sh_color=sh,
        weight_sh=cols("weight_sh_", SH_COEFFS),
        sigma=sigma,
    )


def write_points_ply(path, points, colors=None) -> None:
    points = np.asarray(points, dtype="<f4")
    n = points.shape[0]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    if colors is not None:
        c8 = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = c8[:, 0], c8[:, 1], c8[:, 2]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {'float' if t == '<f4' else 'uchar'} {name}" for name, t in fields]
    header += ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_points_ply(path):
    data, _ = _read_ply_raw(path)
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float32)
    colors = None
    if data.dtype.names and "red" in data.dtype.names:
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1).astype(np.float32) / 255.0
    return pts, colors


# ---------------------------------------------------------------------------
# State blob (Adam + active set), versioned little-endian
# ---------------------------------------------------------------------------

BLOB_MAGIC = b"OITSTATE"
BLOB_VERSION = 1


def write_blob(path, arrays: dict, meta: dict) -> None:
    """``magic, u32 version, u32 meta_len, meta JSON, u32 n, entries``.

    Each entry: ``u16 name_len, name, u8 dtype_len, dtype str, u8 ndim,
    u64 shape..., raw little-endian bytes``. Entries are written in sorted
    name order so identical state gives identical bytes.
    """
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC + struct.pack("<II", BLOB_VERSION, len(meta_bytes)) + meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"))
            dstr = arr.dtype.str.encode()
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(dstr)) + dstr)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_blob(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != BLOB_MAGIC:
        raise DatasetError(f"{path}: not a state blob")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != BLOB_VERSION:
        raise DatasetError(f"{path}: unsupported state version {version}")
    pos = 16
    meta = json.loads(buf[pos : pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nl].decode()
        pos += nl
        (dl,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dt = np.dtype(buf[pos : pos + dl].decode())
        pos += dl
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=pos).reshape(shape).copy()
        pos += nbytes
    return arrays, meta


def save_checkpoint(directory, cloud: GaussianCloud, adam=None, active=None, meta: Optional[dict] = None) -> Path:
    """Checkpoint directory holding ``scene.ply`` and ``state.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ply(directory / "scene.ply", cloud)
    arrays = {}
    meta = dict(meta or {})
    if adam is not None:
        for k, a in adam.m.items():
            arrays[f"adam.m.{k}"] = a
        for k, a in adam.v.items():
            arrays[f"adam.v.{k}"] = a
        arrays["adam.steps"] = adam.steps
        meta["adam_sigma"] = [adam.sigma_m, adam.sigma_v, adam.sigma_steps]
    if active is not None:
        arrays["active.mask"] = active.active.astype(np.uint8)
        arrays["active.frozen_stage"] = active.frozen_stage
        meta["active"] = {
            "stage": active.stage,
            "thresholds": active.thresholds,
            "activation_iteration": active.activation_iteration,
            "update_interval": active.update_interval,
            "subsample_count": active.subsample_count,
            "threshold_fraction": active.threshold_fraction,
        }
    write_blob(directory / "state.bin", arrays, meta)
    return directory


def load_checkpoint(directory):
    """Returns ``(cloud, adam_or_None, active_or_None, meta)``."""
    from .activeset import ActiveSetState
    from .optim import AdamState

    directory = Path(directory)
    if not (directory / "scene.ply").exists():
        raise DatasetError(f"checkpoint directory {directory} has no scene.ply")
    cloud = read_ply(directory / "scene.ply")
    adam = active = None
    meta = {}
    if (directory / "state.bin").exists():
        arrays, meta = read_blob(directory / "state.bin")
        if "adam.steps" in arrays:
            names = GaussianCloud.PER_GAUSSIAN
            sm, sv, ss = meta.get("adam_sigma", [0.0, 0.0, 0])
            adam = AdamState(
                m={k: arrays[f"adam.m.{k}"] for k in names},
                v={k: arrays[f"adam.v.{k}"] for k in names},
                steps=arrays["adam.steps"],
                sigma_m=sm,
                sigma_v=sv,
                sigma_steps=int(ss),
            )
        if "active.mask" in arrays:
            a = meta["active"]
            active = ActiveSetState(
                active=arrays["active.mask"].astype(bool),
                frozen_stage=arrays["active.frozen_stage"],
                stage=a["stage"],
                thresholds=a["thresholds"],
                activation_iteration=a["activation_iteration"],
                update_interval=a["update_interval"],
                subsample_count=a["subsample_count"],
                threshold_fraction=a["threshold_fraction"],
            )
    return cloud, adam, active, meta
