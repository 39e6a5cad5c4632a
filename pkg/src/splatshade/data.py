"""Posed-image datasets in the transforms-JSON layout, plus image codecs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .pfm import read_pfm, write_pfm
from .scene import Camera

# OpenGL camera axes (y up, looking down -z) to the renderer's (y down, +z forward)
_FLIP = np.diag([1.0, -1.0, -1.0])


class DatasetError(ValueError):
    pass


@dataclass
class View:
    camera: Camera
    path: Path | None
    image: np.ndarray   # (H, W, 3) float64 in [0, 1]


@dataclass
class Dataset:
    views: list = field(default_factory=list)
    split: str = "train"

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def pairs(self):
        """``[(camera, image), ...]`` as consumed by the trainer."""
        return [(v.camera, v.image) for v in self.views]


# ---------------------------------------------------------------------------
# images


def load_image(path, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """8/16-bit PNG to float RGB in [0, 1], compositing alpha over ``background``."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            arr = np.repeat(arr[..., None], 3, axis=2)
        else:
            arr = np.asarray(im)
            scale = 65535.0 if arr.dtype == np.uint16 else 255.0
            arr = arr.astype(np.float64) / scale
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.shape[2] == 4:
        a = arr[..., 3:4]
        arr = arr[..., :3] * a + np.asarray(background, dtype=np.float64) * (1.0 - a)
    elif arr.shape[2] == 2:
        a = arr[..., 1:2]
        arr = np.repeat(arr[..., :1], 3, axis=2) * a + np.asarray(background, dtype=np.float64) * (1.0 - a)
    return arr[..., :3]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)


def save_normal_image(path, normal: np.ndarray) -> None:
    """Unit normals mapped to colours via 0.5 n + 0.5; empty pixels stay black."""
    valid = np.any(normal != 0.0, axis=-1, keepdims=True)
    save_image(path, np.where(valid, 0.5 * normal + 0.5, 0.0))


def save_depth(path, depth: np.ndarray) -> None:
    write_pfm(path, depth.astype(np.float32))


def load_depth(path) -> np.ndarray:
    return read_pfm(path)


# ---------------------------------------------------------------------------
# cameras


def camera_from_transform(c2w, width: int, height: int, fx: float, fy: float | None = None,
                          cx: float | None = None, cy: float | None = None) -> Camera:
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape not in ((4, 4), (3, 4)):
        raise DatasetError(f"transform_matrix must be 4x4, got shape {c2w.shape}")
    R_w2c = (c2w[:3, :3] @ _FLIP).T
    return Camera(fx, fx if fy is None else fy, width / 2.0 if cx is None else cx,
                  height / 2.0 if cy is None else cy, width, height, R_w2c, c2w[:3, 3])


def transform_from_camera(cam: Camera) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = cam.rotation.T @ _FLIP
    m[:3, 3] = cam.center
    return m


def _frame_path(root: Path, rel: str) -> Path:
    p = root / rel
    if p.suffix == "":
        p = p.with_suffix(".png")
    return p


def load_split(root, split: str, background=(0.0, 0.0, 0.0), downscale: int = 1) -> Dataset:
    root = Path(root)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.exists():
        raise DatasetError(f"{meta_path}: file not found")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{meta_path}: invalid JSON ({e})") from None
    if "frames" not in meta:
        raise DatasetError(f"{meta_path}: missing key 'frames'")
    if "camera_angle_x" not in meta and "fl_x" not in meta:
        raise DatasetError(f"{meta_path}: missing key 'camera_angle_x'")

    views = []
    for i, frame in enumerate(meta["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in frame:
                raise DatasetError(f"{meta_path}: frame {i} missing key '{key}'")
        path = _frame_path(root, frame["file_path"])
        if not path.exists():
            raise DatasetError(f"{meta_path}: frame {i} image {path} not found")
        img = load_image(path, background)
        h, w = img.shape[:2]
        if downscale > 1:
            img = np.asarray(Image.fromarray(to_uint8(img)).resize((w // downscale, h // downscale),
                                                                   Image.BILINEAR), dtype=np.float64) / 255.0
        if "fl_x" in meta and downscale == 1:
            fx = float(meta["fl_x"])
            fy = float(meta.get("fl_y", fx))
            cx = float(meta.get("cx", w / 2.0))
            cy = float(meta.get("cy", h / 2.0))
        else:
            fx = 0.5 * w / math.tan(0.5 * float(meta["camera_angle_x"]))
            fx, fy, cx, cy = fx / downscale, fx / downscale, None, None
        hh, ww = img.shape[:2]
        try:
            cam = camera_from_transform(frame["transform_matrix"], ww, hh, fx, fy, cx, cy)
        except ValueError as e:
            raise DatasetError(f"{meta_path}: frame {i}: {e}") from None
        views.append(View(cam, path, img))
    return Dataset(views, split)


def load_nerf_synthetic(root, background=(0.0, 0.0, 0.0), downscale: int = 1):
    """Returns ``(train, test)``; a missing test split falls back to ``val``."""
    root = Path(root)
    train = load_split(root, "train", background, downscale)
    for split in ("test", "val"):
        if (root / f"transforms_{split}.json").exists():
            return train, load_split(root, split, background, downscale)
    return train, Dataset([], "test")


def save_split(root, dataset: Dataset, split: str | None = None) -> None:
    """Write images and a transforms file that reloads to identical cameras."""
    root = Path(root)
    split = split or dataset.split
    frames = []
    cam0 = dataset.views[0].camera if dataset.views else None
    for i, v in enumerate(dataset.views):
        c = v.camera
        if (c.fx, c.fy, c.cx, c.cy, c.width, c.height) != (cam0.fx, cam0.fy, cam0.cx, cam0.cy, cam0.width, cam0.height):
            raise DatasetError("save_split needs shared intrinsics across views")
        rel = f"./{split}/r_{i}"
        save_image(_frame_path(root, rel), v.image)
        frames.append({"file_path": rel, "transform_matrix": transform_from_camera(c).tolist()})
    meta = {"frames": frames}
    if cam0 is not None:
        meta.update(camera_angle_x=2.0 * math.atan(0.5 * cam0.width / cam0.fx), fl_x=cam0.fx, fl_y=cam0.fy,
                    cx=cam0.cx, cy=cam0.cy, w=cam0.width, h=cam0.height)
    root.mkdir(parents=True, exist_ok=True)
    (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# ---------------------------------------------------------------------------
# point clouds (ASCII PLY: x y z, optional red green blue in [0, 1], optional scale)


def save_points(path, points, colors=None, scales=None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = [points]
    props = ["x", "y", "z"]
    if colors is not None:
        cols.append(np.asarray(colors, dtype=np.float64).reshape(-1, 3))
        props += ["red", "green", "blue"]
    if scales is not None:
        cols.append(np.asarray(scales, dtype=np.float64).reshape(-1, 1))
        props.append("scale")
    table = np.hstack(cols)
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    header += [f"property double {p}" for p in props] + ["end_header"]
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, table, fmt="%.17g")


def load_points(path):
    """Returns ``(points, colors or None, scales or None)``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply" or "end_header" not in lines:
        raise DatasetError(f"{path}: not an ASCII PLY point cloud")
    end = lines.index("end_header")
    props = [ln.split()[2] for ln in lines[:end] if ln.startswith("property")]
    if "format ascii" not in "\n".join(lines[:end]):
        raise DatasetError(f"{path}: only ASCII point clouds are supported")
    for p in ("x", "y", "z"):
        if p not in props:
            raise DatasetError(f"{path}: missing property '{p}'")
    body = [ln for ln in lines[end + 1:] if ln.strip()]
    table = np.loadtxt(body, ndmin=2) if body else np.zeros((0, len(props)))
    col = {p: i for i, p in enumerate(props)}
    pts = table[:, [col["x"], col["y"], col["z"]]]
    colors = table[:, [col["red"], col["green"], col["blue"]]] if "red" in col else None
    scales = table[:, col["scale"]] if "scale" in col else None
    return pts, colors, scales
