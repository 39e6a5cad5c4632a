"""Gaussian scene representation, cameras and checkpoint I/O.

Per-Gaussian state is stored as a structure of arrays so that projection,
shading and the optimizer can all operate on whole columns at once.
Bounded quantities are stored unconstrained:

    scale     = exp(log_scales)
    opacity   = sigmoid(opacity_logits)
    roughness = sigmoid(roughness_raw)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .envlight import EnvLight

SH_COEFFS = 16

# Trainable per-Gaussian fields in declaration order; shapes exclude the leading N.
PARAM_SHAPES: dict[str, tuple[int, ...]] = {
    "positions": (3,),
    "log_scales": (3,),
    "rotations": (4,),
    "opacity_logits": (),
    "diffuse": (3,),
    "tint": (3,),
    "roughness_raw": (),
    "residual_sh": (SH_COEFFS, 3),
    "dn_out": (3,),
    "dn_in": (3,),
}
PARAM_FIELDS = tuple(PARAM_SHAPES)


class InitializationError(ValueError):
    pass


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(x):
    """Logistic function, kept strictly inside (0, 1) even where float64 would round."""
    return np.clip(expit(np.asarray(x, dtype=np.float64)), _SIG_LO, _SIG_HI)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions; inputs are normalized first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternion given dL/dR."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    G = grad_R
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=-1)
    # project out the radial component of the normalization
    return (gu - u * np.sum(gu * u, axis=-1, keepdims=True)) / norm


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) for a batch of proper rotation matrices."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.reshape(-1, 3, 3)
    out = np.empty((len(batch), 4))
    for k, m in enumerate(batch):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            out[k] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        else:
            i = int(np.argmax(np.diag(m)))
            j, l = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(1.0 + m[i, i] - m[j, j] - m[l, l])
            q = np.empty(4)
            q[0] = (m[l, j] - m[j, l]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (m[j, i] + m[i, j]) / s
            q[1 + l] = (m[l, i] + m[i, l]) / s
            out[k] = q
    return out.reshape(R.shape[:-2] + (4,))


# ---------------------------------------------------------------------------
# cameras


@dataclass
class Camera:
    """Pinhole camera with an OpenCV-style frame (x right, y down, z forward).

    The pose is kept as the world-to-camera rotation plus the camera centre in
    world coordinates so that a transforms-file round trip is bit exact.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"resolution must be at least 1x1, got {self.width}x{self.height}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation is not orthonormal (error {err:.2e})")

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.center

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation.T

    @classmethod
    def look_at(cls, eye, target, up, fx, width, height, fy=None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fx if fy is None else fy, width / 2.0, height / 2.0, width, height, R, eye)


# ---------------------------------------------------------------------------
# Gaussians


@dataclass
class Gaussian:
    """A single Gaussian, detached from any scene."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float = 0.0
    diffuse: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    specular_tint: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    roughness_raw: float = 0.0
    residual_sh: np.ndarray = field(default_factory=lambda: np.zeros((SH_COEFFS, 3)))
    normal_residual_outward: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal_residual_inward: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("position", "scale", "rotation", "diffuse", "specular_tint", "residual_sh",
                     "normal_residual_outward", "normal_residual_inward"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def roughness(self) -> float:
        return float(sigmoid(self.roughness_raw))


def covariance(g: Gaussian) -> np.ndarray:
    """3D covariance R S S^T R^T."""
    M = quat_to_rotmat(g.rotation) * g.scale[None, :]
    return M @ M.T


def shortest_axis(g: Gaussian) -> np.ndarray:
    return quat_to_rotmat(g.rotation)[:, int(np.argmin(g.scale))]


class SplatScene:
    """All Gaussians plus the environment light; the complete trainable state."""

    def __init__(self, params: dict[str, np.ndarray], envlight: EnvLight, residual_active: bool = False):
        n = len(params["positions"])
        for name, shape in PARAM_SHAPES.items():
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            if arr.shape != (n,) + shape:
                raise ValueError(f"{name}: expected shape {(n,) + shape}, got {arr.shape}")
            setattr(self, name, arr)
        self.envlight = envlight
        self.residual_active = residual_active

    # -- derived quantities
    def __len__(self) -> int:
        return len(self.positions)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def roughness(self) -> np.ndarray:
        return sigmoid(self.roughness_raw)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.rotations)

    def covariances(self) -> np.ndarray:
        M = self.rotation_matrices() * self.scales[:, None, :]
        return M @ np.swapaxes(M, 1, 2)

    def shortest_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Shortest axis per Gaussian and the column index it came from."""
        k = np.argmin(self.log_scales, axis=1)
        R = self.rotation_matrices()
        return R[np.arange(len(self)), :, k], k

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            scale=np.exp(self.log_scales[i]),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            diffuse=self.diffuse[i].copy(),
            specular_tint=self.tint[i].copy(),
            roughness_raw=float(self.roughness_raw[i]),
            residual_sh=self.residual_sh[i].copy(),
            normal_residual_outward=self.dn_out[i].copy(),
            normal_residual_inward=self.dn_in[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian], envlight: EnvLight, residual_active=False):
        if not gaussians:
            return cls.empty(envlight)
        cols = {
            "positions": [g.position for g in gaussians],
            "log_scales": [np.log(g.scale) for g in gaussians],
            "rotations": [g.rotation for g in gaussians],
            "opacity_logits": [g.opacity_logit for g in gaussians],
            "diffuse": [g.diffuse for g in gaussians],
            "tint": [g.specular_tint for g in gaussians],
            "roughness_raw": [g.roughness_raw for g in gaussians],
            "residual_sh": [g.residual_sh for g in gaussians],
            "dn_out": [g.normal_residual_outward for g in gaussians],
            "dn_in": [g.normal_residual_inward for g in gaussians],
        }
        return cls({k: np.array(v, dtype=np.float64) for k, v in cols.items()}, envlight, residual_active)

    @classmethod
    def empty(cls, envlight: EnvLight) -> "SplatScene":
        return cls({k: np.zeros((0,) + s) for k, s in PARAM_SHAPES.items()}, envlight)

    def copy(self) -> "SplatScene":
        return SplatScene({k: v.copy() for k, v in self.params().items()}, self.envlight.copy(),
                          self.residual_active)

    def select(self, mask_or_index) -> "SplatScene":
        """Subset of Gaussians sharing the same environment light."""
        return SplatScene({k: v[mask_or_index] for k, v in self.params().items()}, self.envlight,
                          self.residual_active)

    def normalize_rotations(self):
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def clamp_colors(self):
        np.clip(self.diffuse, 0.0, 1.0, out=self.diffuse)
        np.clip(self.tint, 0.0, 1.0, out=self.tint)


def init_scene(points=None, colors=None, count: int | None = None, bounds=None, seed: int = 0,
               envlight: EnvLight | None = None, neighbors: int = 3,
               default_scale: float = 0.01, scales=None, opacity: float = 0.1, tint: float = 0.5,
               roughness: float = 0.5) -> SplatScene:
    """One Gaussian per input point (or per uniformly sampled point in ``bounds``).

    Scales are isotropic and equal to the mean distance to the ``neighbors``
    nearest other points unless given explicitly.
    """
    if not 0.0 < opacity < 1.0 or not 0.0 < roughness < 1.0 or not 0.0 <= tint <= 1.0:
        raise InitializationError(f"bad initial values: opacity={opacity} roughness={roughness} tint={tint}")
    rng = np.random.default_rng(seed)
    if points is None:
        if not count or count < 1:
            raise InitializationError("need at least one point or count >= 1")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in (bounds if bounds is not None else ([-1] * 3, [1] * 3)))
        points = lo + (hi - lo) * rng.random((count, 3))
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise InitializationError("cannot initialize a scene from an empty point set")

    if scales is not None:
        scale = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n,)).copy()
    elif n > 1:
        k = min(neighbors, n - 1)
        dist, _ = cKDTree(points).query(points, k=k + 1)
        scale = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    else:
        scale = np.full(1, default_scale)

    params = {
        "positions": points.copy(),
        "log_scales": np.repeat(np.log(scale)[:, None], 3, axis=1),
        "rotations": np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        "opacity_logits": np.full(n, logit(opacity)),
        "diffuse": np.full((n, 3), 0.5) if colors is None else np.clip(np.asarray(colors, dtype=np.float64), 0, 1),
        "tint": np.full((n, 3), float(tint)),
        "roughness_raw": np.full(n, logit(roughness)),
        "residual_sh": np.zeros((n, SH_COEFFS, 3)),
        "dn_out": np.zeros((n, 3)),
        "dn_in": np.zeros((n, 3)),
    }
    return SplatScene(params, envlight if envlight is not None else EnvLight.constant(0.5))


# ---------------------------------------------------------------------------
# checkpoints: binary little-endian PLY, float64 properties

def _ply_columns() -> list[tuple[str, str, int]]:
    cols = []
    names = {
        "positions": ["x", "y", "z"],
        "log_scales": [f"log_scale_{i}" for i in range(3)],
        "rotations": [f"rot_{c}" for c in "wxyz"],
        "opacity_logits": ["opacity_logit"],
        "diffuse": [f"diffuse_{c}" for c in "rgb"],
        "tint": [f"tint_{c}" for c in "rgb"],
        "roughness_raw": ["roughness_raw"],
        "residual_sh": [f"sh_{k}_{c}" for k in range(SH_COEFFS) for c in "rgb"],
        "dn_out": [f"dn_out_{i}" for i in range(3)],
        "dn_in": [f"dn_in_{i}" for i in range(3)],
    }
    for field_name in PARAM_FIELDS:
        for i, col in enumerate(names[field_name]):
            cols.append((col, field_name, i))
    return cols


def save_checkpoint(scene: SplatScene, path) -> None:
    """Write the scene as a binary PLY with a ``gaussian`` and an ``envtexel`` element.

    Gaussian columns appear in field declaration order; envlight texels are
    stored face-major (face, row, col) with ``r g b`` properties.
    """
    cols = _ply_columns()
    n = len(scene)
    table = np.empty((n, len(cols)), dtype="<f8")
    for j, (_, field_name, i) in enumerate(cols):
        table[:, j] = getattr(scene, field_name).reshape(n, int(np.prod(PARAM_SHAPES[field_name])))[:, i]
    env = scene.envlight
    texels = np.ascontiguousarray(env.base, dtype="<f8").reshape(-1, 3)
    header = ["ply", "format binary_little_endian 1.0",
              f"comment envlight_resolution {env.resolution}",
              "comment envlight_levels " + " ".join(repr(float(r)) for r in env.roughness_levels),
              f"comment residual_active {int(scene.residual_active)}",
              f"element gaussian {n}"]
    header += [f"property double {name}" for name, _, _ in cols]
    header += [f"element envtexel {len(texels)}", "property double r", "property double g",
               "property double b", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(table.tobytes())
        fh.write(texels.tobytes())


def load_checkpoint(path) -> SplatScene:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY checkpoint")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    meta = {}
    elements = []
    for line in header:
        parts = line.split()
        if parts[:1] == ["comment"] and len(parts) >= 3:
            meta[parts[1]] = parts[2:]
        elif parts[:1] == ["element"]:
            elements.append([parts[1], int(parts[2]), []])
        elif parts[:1] == ["property"]:
            elements[-1][2].append(parts[2])
    try:
        (gname, n, gprops), (ename, m, _) = elements
        resolution = int(meta["envlight_resolution"][0])
        levels = tuple(float(x) for x in meta["envlight_levels"])
        residual = bool(int(meta["residual_active"][0]))
    except (ValueError, KeyError) as exc:
        raise ValueError(f"{path}: malformed checkpoint header ({exc})") from None
    cols = _ply_columns()
    if gname != "gaussian" or ename != "envtexel" or gprops != [c[0] for c in cols]:
        raise ValueError(f"{path}: unexpected checkpoint layout")
    table = np.frombuffer(body[: n * len(cols) * 8], dtype="<f8").reshape(n, len(cols))
    texels = np.frombuffer(body[n * len(cols) * 8:], dtype="<f8").reshape(m, 3)
    params = {k: np.zeros((n,) + s) for k, s in PARAM_SHAPES.items()}
    for j, (_, field_name, i) in enumerate(cols):
        params[field_name].reshape(n, int(np.prod(PARAM_SHAPES[field_name])))[:, i] = table[:, j]
    env = EnvLight(texels.reshape(6, resolution, resolution, 3).copy(), levels)
    return SplatScene(params, env, residual)
