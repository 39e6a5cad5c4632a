"""Hand-authored synthetic scenes and their rendered datasets.

Ground truth comes from this package's own renderer, so fitting them checks
the optimiser rather than the image formation model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, View
from .envlight import EnvLight, texel_directions
from .rasterizer import render
from .scene import Camera, SplatScene, logit, rotmat_to_quat
from .trainer import DEFAULT_LR


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


def tangent_frames(normals: np.ndarray) -> np.ndarray:
    """Rotation matrices whose third column is the given normal."""
    helper = np.where(np.abs(normals[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(helper, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    return np.stack([t1, t2, normals], axis=2)


def two_light_env(resolution: int = 64, lights=None, ambient=0.08) -> EnvLight:
    """Dim sky gradient plus two soft bright lights."""
    if lights is None:
        lights = [((0.4, 0.8, 0.45), (6.0, 5.0, 3.5), 0.18),
                  ((-0.7, 0.3, -0.65), (1.5, 2.5, 5.0), 0.22)]
    d = texel_directions(resolution)
    out = ambient * (1.0 + 0.5 * d[..., 1:2]) * np.ones(3)
    for direction, color, width in lights:
        c = np.asarray(direction, dtype=np.float64)
        c /= np.linalg.norm(c)
        ang = np.arccos(np.clip(d @ c, -1, 1))
        out = out + np.exp(-0.5 * (ang / width) ** 2)[..., None] * np.asarray(color)
    return EnvLight(out)


def surface_gaussians(center, radius, count, diffuse, tint, roughness, opacity=0.95, thickness=0.08):
    """Flattened Gaussians tangent to a sphere, shortest axis along the surface normal."""
    n = fibonacci_sphere(count)
    spacing = np.sqrt(4 * np.pi * radius**2 / count)
    R = tangent_frames(n)
    scale = np.array([0.75 * spacing, 0.75 * spacing, 0.75 * spacing * thickness])
    return {
        "positions": np.asarray(center) + radius * n,
        "log_scales": np.tile(np.log(scale), (count, 1)),
        "rotations": rotmat_to_quat(R),
        "opacity_logits": np.full(count, logit(opacity)),
        "diffuse": np.tile(diffuse, (count, 1)).astype(np.float64),
        "tint": np.tile(tint, (count, 1)).astype(np.float64),
        "roughness_raw": np.full(count, logit(roughness)),
        "residual_sh": np.zeros((count, 16, 3)),
        "dn_out": np.zeros((count, 3)),
        "dn_in": np.zeros((count, 3)),
    }


def _merge(*parts):
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def spheres_scene(per_sphere: int = 900, env: EnvLight | None = None) -> SplatScene:
    """A diffuse sphere next to a mirror-like one."""
    diffuse = surface_gaussians((-0.6, 0.0, 0.0), 0.5, per_sphere, (0.65, 0.3, 0.2), (0.0, 0.0, 0.0), 0.5)
    mirror = surface_gaussians((0.6, 0.0, 0.0), 0.5, per_sphere, (0.03, 0.03, 0.03), (0.9, 0.9, 0.9), 0.1)
    return SplatScene(_merge(diffuse, mirror), env if env is not None else two_light_env())


def mirror_mask(scene: SplatScene) -> np.ndarray:
    return scene.tint.mean(axis=1) > 0.5


def plate_scene(count_side: int = 24, size: float = 1.2, tilt_deg: float = 25.0, env=None) -> SplatScene:
    """A square plate of flat Gaussians, tilted about the x axis."""
    g = (np.arange(count_side) + 0.5) / count_side - 0.5
    xx, yy = np.meshgrid(g * size, g * size)
    t = np.deg2rad(tilt_deg)
    Rt = np.array([[1, 0, 0], [0, np.cos(t), -np.sin(t)], [0, np.sin(t), np.cos(t)]])
    # plate spans the x/z plane before tilting; normal +y
    pts = np.stack([xx.ravel(), np.zeros(xx.size), yy.ravel()], axis=1) @ Rt.T
    n = len(pts)
    frame = Rt @ np.array([[1.0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]]).T  # columns: x, z, y(normal)
    spacing = size / count_side
    rng = np.random.default_rng(3)
    p = {
        "positions": pts,
        "log_scales": np.tile(np.log([0.7 * spacing, 0.7 * spacing, 0.05 * spacing]), (n, 1)),
        "rotations": np.tile(rotmat_to_quat(frame), (n, 1)),
        "opacity_logits": np.full(n, logit(0.95)),
        "diffuse": np.clip(0.45 + 0.3 * rng.random((n, 3)), 0, 1),
        "tint": np.zeros((n, 3)),
        "roughness_raw": np.zeros(n),
        "residual_sh": np.zeros((n, 16, 3)),
        "dn_out": np.zeros((n, 3)),
        "dn_in": np.zeros((n, 3)),
    }
    return SplatScene(p, env if env is not None else two_light_env())


def single_gaussian_scene(env=None) -> SplatScene:
    """One isotropic, purely diffuse Gaussian at the origin."""
    p = {
        "positions": np.zeros((1, 3)),
        "log_scales": np.full((1, 3), np.log(0.1)),
        "rotations": np.array([[1.0, 0, 0, 0]]),
        "opacity_logits": np.array([logit(0.8)]),
        "diffuse": np.array([[0.8, 0.45, 0.3]]),
        "tint": np.zeros((1, 3)),
        "roughness_raw": np.zeros(1),
        "residual_sh": np.zeros((1, 16, 3)),
        "dn_out": np.zeros((1, 3)),
        "dn_in": np.zeros((1, 3)),
    }
    return SplatScene(p, env if env is not None else EnvLight.constant(0.5, resolution=8))


def orbit_cameras(count: int, radius: float, size: int, fov_deg: float = 45.0, seed: int = 0,
                  elevation=(-0.35, 0.85), target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Cameras on a sphere around ``target`` with jittered golden-angle azimuths."""
    rng = np.random.default_rng(seed)
    fx = 0.5 * size / np.tan(np.deg2rad(fov_deg) / 2)
    cams = []
    for i in range(count):
        az = 2.399963 * i + rng.uniform(0, 0.2)
        el = np.arcsin(rng.uniform(*elevation))
        eye = np.asarray(target) + radius * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
        cams.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), fx, size, size))
    return cams


def render_views(scene: SplatScene, cams, split: str) -> Dataset:
    scene.envlight.refresh()
    return Dataset([View(c, None, render(scene, c).color) for c in cams], split)


@dataclass
class ToyData:
    scene: SplatScene          # ground truth
    train: Dataset
    test: Dataset
    init_points: np.ndarray
    init_scales: np.ndarray | None = None
    config: dict | None = None  # suggested TrainConfig overrides


def spheres_dataset(n_train: int = 30, n_test: int = 5, size: int = 64, per_sphere: int = 900,
                    init_points: int = 1500, noise: float = 0.02, seed: int = 0) -> ToyData:
    gt = spheres_scene(per_sphere)
    cams = orbit_cameras(n_train + n_test, 3.6, size, seed=seed)
    rng = np.random.default_rng(seed + 1)
    dirs = fibonacci_sphere(init_points // 2)
    pts = np.concatenate([c + 0.5 * dirs for c in ((-0.6, 0, 0), (0.6, 0, 0))])
    pts = pts + rng.normal(0, noise, pts.shape)
    return ToyData(gt, render_views(gt, cams[:n_train], "train"), render_views(gt, cams[n_train:], "test"), pts)


def plate_dataset(n_train: int = 16, n_test: int = 4, size: int = 48, init_side: int = 16,
                  noise: float = 0.03, seed: int = 0) -> ToyData:
    gt = plate_scene()
    cams = orbit_cameras(n_train + n_test, 2.6, size, fov_deg=40, seed=seed, elevation=(0.5, 0.95))
    rng = np.random.default_rng(seed + 1)
    g = (np.arange(init_side) + 0.5) / init_side - 0.5
    xx, yy = np.meshgrid(g * 1.2, g * 1.2)
    t = np.deg2rad(25.0)
    Rt = np.array([[1, 0, 0], [0, np.cos(t), -np.sin(t)], [0, np.sin(t), np.cos(t)]])
    pts = np.stack([xx.ravel(), np.zeros(xx.size), yy.ravel()], axis=1) @ Rt.T
    pts = pts + rng.normal(0, noise, pts.shape)
    return ToyData(gt, render_views(gt, cams[:n_train], "train"), render_views(gt, cams[n_train:], "test"), pts)


def single_gaussian_dataset(size: int = 32) -> ToyData:
    """One view of one diffuse Gaussian; training starts from the right geometry."""
    gt = single_gaussian_scene()
    cam = Camera.look_at((0.0, 0.0, -1.5), (0, 0, 0), (0, 1, 0), 1.2 * size, size, size)
    train = render_views(gt, [cam], "train")
    test = Dataset(list(train.views), "test")
    # diffuse-only fit: geometry, opacity and light known, specular off, only colour trained
    lr = {k: 0.0 for k in DEFAULT_LR}
    lr["diffuse"] = 0.01
    config = dict(iterations=500, residual_activation_iter=None, densify_interval=0, lr=lr,
                  init_opacity=0.8, init_tint=0.0, env_init=0.5, env_resolution=8, eval_interval=100)
    return ToyData(gt, train, test, gt.positions.copy(), np.exp(gt.log_scales[:, 0]), config)
