"""Trainable cube-map environment light with a GGX-prefiltered roughness pyramid.

Face order and orientation follow the OpenGL cube-map convention::

    face  major   sc   tc
    0     +X      -z   -y
    1     -X      +z   -y
    2     +Y      +x   +z
    3     -Y      +x   -z
    4     +Z      +x   -y
    5     -Z      -x   -y

with u = (sc/|ma| + 1)/2 along the columns and v = (tc/|ma| + 1)/2 down the
rows. Texel (row i, col j) has its centre at u = (j + 0.5)/R, v = (i + 0.5)/R.

Every pyramid level is a fixed linear map of the base texels, so the lookup
gradient can be pulled back exactly onto the base map.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .pfm import read_pfm, write_pfm

FACE_NAMES = ("px", "nx", "py", "ny", "pz", "nz")
DEFAULT_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)
# a coarser band takes over at this many of its own texel widths from the lobe centre
BAND_START = 2.5

# (major axis, major sign, sc axis, sc sign, tc axis, tc sign)
_FACES = np.array([
    (0, +1, 2, -1, 1, -1),
    (0, -1, 2, +1, 1, -1),
    (1, +1, 0, +1, 2, +1),
    (1, -1, 0, +1, 2, -1),
    (2, +1, 0, +1, 1, -1),
    (2, -1, 0, -1, 1, -1),
])


class StaleEnvLightError(RuntimeError):
    """Raised when the prefiltered pyramid no longer matches the base texels."""


# ---------------------------------------------------------------------------
# cube-map geometry


def face_uv_to_dir(face, u, v) -> np.ndarray:
    """Unnormalized direction for face coordinates; u, v may leave [0, 1]."""
    face = np.asarray(face)
    sc = 2.0 * np.asarray(u, dtype=np.float64) - 1.0
    tc = 2.0 * np.asarray(v, dtype=np.float64) - 1.0
    a, sa, isc, ssc, itc, stc = (_FACES[face, k] for k in range(6))
    d = np.zeros(np.broadcast(face, sc, tc).shape + (3,))
    np.put_along_axis(d, a[..., None], sa[..., None].astype(np.float64), axis=-1)
    np.put_along_axis(d, isc[..., None], (ssc * sc)[..., None], axis=-1)
    np.put_along_axis(d, itc[..., None], (stc * tc)[..., None], axis=-1)
    return d


def dir_to_face_uv(d: np.ndarray):
    """Face index and (u, v) for directions (..., 3); ties pick the lower axis."""
    d = np.asarray(d, dtype=np.float64)
    absd = np.abs(d)
    a = np.argmax(absd, axis=-1)
    comp = np.take_along_axis(d, a[..., None], axis=-1)[..., 0]
    face = 2 * a + (comp < 0)
    _, _, isc, ssc, itc, stc = (_FACES[face, k] for k in range(6))
    ma = np.abs(comp)
    sc = ssc * np.take_along_axis(d, isc[..., None], axis=-1)[..., 0]
    tc = stc * np.take_along_axis(d, itc[..., None], axis=-1)[..., 0]
    return face, 0.5 * (sc / ma + 1.0), 0.5 * (tc / ma + 1.0)


def _dir_to_face_uv_jacobian(d: np.ndarray, face: np.ndarray):
    """d(u)/d(d) and d(v)/d(d), each (..., 3)."""
    a, sa, isc, ssc, itc, stc = (_FACES[face, k] for k in range(6))
    comp = np.take_along_axis(d, a[..., None], axis=-1)[..., 0]
    ma = np.abs(comp)
    sc = ssc * np.take_along_axis(d, isc[..., None], axis=-1)[..., 0]
    tc = stc * np.take_along_axis(d, itc[..., None], axis=-1)[..., 0]
    du = np.zeros(d.shape)
    dv = np.zeros(d.shape)
    np.put_along_axis(du, isc[..., None], (0.5 * ssc / ma)[..., None], axis=-1)
    np.put_along_axis(dv, itc[..., None], (0.5 * stc / ma)[..., None], axis=-1)
    # the major component enters through 1/|ma|
    np.put_along_axis(du, a[..., None], (-0.5 * sc * sa / ma**2)[..., None], axis=-1)
    np.put_along_axis(dv, a[..., None], (-0.5 * tc * sa / ma**2)[..., None], axis=-1)
    return du, dv


@functools.lru_cache(maxsize=None)
def texel_directions(res: int) -> np.ndarray:
    """Unit directions of all texel centres, (6, res, res, 3)."""
    c = (np.arange(res) + 0.5) / res
    v, u = np.meshgrid(c, c, indexing="ij")
    faces = np.arange(6)[:, None, None]
    d = face_uv_to_dir(faces, u[None], v[None])
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d.flags.writeable = False
    return d


@functools.lru_cache(maxsize=None)
def texel_solid_angles(res: int) -> np.ndarray:
    """Exact solid angle subtended by every texel, (6, res, res)."""
    edges = np.linspace(-1.0, 1.0, res + 1)

    def area(x, y):
        return np.arctan2(x * y, np.sqrt(x * x + y * y + 1.0))

    x0, x1 = edges[:-1], edges[1:]
    y0, y1 = x0[:, None], x1[:, None]
    omega = area(x1, y1) - area(x0, y1) - area(x1, y0) + area(x0, y0)
    out = np.broadcast_to(omega, (6, res, res)).copy()
    out.flags.writeable = False
    return out


def _nearest_texel(d: np.ndarray, res: int) -> np.ndarray:
    face, u, v = dir_to_face_uv(d)
    col = np.clip(np.floor(u * res), 0, res - 1).astype(np.int64)
    row = np.clip(np.floor(v * res), 0, res - 1).astype(np.int64)
    return (face * res + row) * res + col


def bilinear_taps(dirs: np.ndarray, res: int, with_grad: bool = False):
    """Seamless bilinear footprint of directions in a res x res cube map.

    Returns flat texel indices (N, 4), weights (N, 4) and, optionally, the
    derivative of each weight with respect to the direction (N, 4, 3).
    Footprint corners that fall off a face are redirected to the texel their
    extrapolated direction lands in on the neighbouring face.
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    face, u, v = dir_to_face_uv(dirs)
    x = u * res - 0.5
    y = v * res - 0.5
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    fx = x - j0
    fy = y - i0

    rows = np.stack([i0, i0, i0 + 1, i0 + 1], axis=1)
    cols = np.stack([j0, j0 + 1, j0, j0 + 1], axis=1)
    faces = np.repeat(face[:, None], 4, axis=1)
    idx = (faces * res + np.clip(rows, 0, res - 1)) * res + np.clip(cols, 0, res - 1)
    off = (rows < 0) | (rows >= res) | (cols < 0) | (cols >= res)
    if off.any():
        vd = face_uv_to_dir(faces[off], (cols[off] + 0.5) / res, (rows[off] + 0.5) / res)
        idx[off] = _nearest_texel(vd, res)

    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    if not with_grad:
        return idx, w
    dwdx = np.stack([-(1 - fy), 1 - fy, -fy, fy], axis=1)
    dwdy = np.stack([-(1 - fx), -fx, 1 - fx, fx], axis=1)
    du, dv = _dir_to_face_uv_jacobian(dirs, face)
    dw = res * (dwdx[:, :, None] * du[:, None, :] + dwdy[:, :, None] * dv[:, None, :])
    return idx, w, dw


def sample_bilinear(texels: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Seamless bilinear lookup of a (6, R, R, C) cube map at directions (N, 3)."""
    res = texels.shape[1]
    idx, w = bilinear_taps(dirs, res)
    flat = texels.reshape(6 * res * res, -1)
    return np.einsum("nk,nkc->nc", w, flat[idx])


# ---------------------------------------------------------------------------
# reflection and lobe


def reflect(view_dir: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Mirror the (outgoing) view direction about the normal: 2(w.n)n - w."""
    view_dir = np.asarray(view_dir, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    d = np.sum(view_dir * normal, axis=-1, keepdims=True)
    return 2.0 * d * normal - view_dir


def ggx_ndf(r, wi, roughness):
    """GGX lobe centred on ``r`` evaluated towards ``wi`` (alpha = roughness^2)."""
    cos = np.sum(np.asarray(r, dtype=np.float64) * np.asarray(wi, dtype=np.float64), axis=-1)
    return ggx_ndf_cos(cos, roughness)


def ggx_ndf_cos(cos, roughness):
    a2 = np.asarray(roughness, dtype=np.float64) ** 4
    denom = np.asarray(cos) ** 2 * (a2 - 1.0) + 1.0
    return a2 / (np.pi * denom * denom)


# ---------------------------------------------------------------------------
# prefiltering


def compute_resolution(res: int, roughness: float) -> int:
    """Finest resolution used for one pyramid level.

    The lobe is resolved with texels no wider than a fifth of its width
    (alpha = roughness^2); never below 8 texels per face edge.
    """
    if roughness <= 0:
        return res
    alpha = roughness**2
    c = res
    while c // 2 >= 8 and _texel_angle(c // 2) <= alpha / 5.0:
        c //= 2
    return c


def _texel_angle(res: int) -> float:
    return 0.5 * np.pi / res


def _band_resolutions(res: int, roughness: float) -> list[int]:
    c = compute_resolution(res, roughness)
    out = [c]
    while out[-1] // 2 >= 8:
        out.append(out[-1] // 2)
    return out


def _window(theta, a, b):
    """1 below a, 0 above b, raised-cosine in between."""
    t = np.clip((theta - a) / (b - a), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def _downsample_operator(res: int, coarse: int) -> sp.csr_matrix:
    """Radiance at ``coarse`` from ``res`` by splatting texel power with bilinear weights.

    Using the transpose of the bilinear upsample keeps every source texel's
    centroid in place, so coarse bands stay accurate to second order.
    """
    up = _upsample_operator(coarse, res)
    omega_f = texel_solid_angles(res).reshape(-1)
    omega_c = texel_solid_angles(coarse).reshape(-1)
    return (sp.diags(1.0 / omega_c) @ up.T @ sp.diags(omega_f)).tocsr()


def _upsample_operator(coarse: int, res: int) -> sp.csr_matrix:
    idx, w = bilinear_taps(texel_directions(res).reshape(-1, 3), coarse)
    n = 6 * res * res
    return sp.csr_matrix((w.ravel(), (np.repeat(np.arange(n), 4), idx.ravel())), shape=(n, 6 * coarse * coarse))


def _subtexels(res: int, n: int):
    """Directions and solid angles of an n x n grid inside every texel, (T, n*n, 3) and (T, n*n)."""
    f = res * n
    d = texel_directions(f)
    om = texel_solid_angles(f)
    d = d.reshape(6, res, n, res, n, 3).transpose(0, 1, 3, 2, 4, 5).reshape(6 * res * res, n * n, 3)
    om = om.reshape(6, res, n, res, n).transpose(0, 1, 3, 2, 4).reshape(6 * res * res, n * n)
    return d, om


def _integrated_lobe(r, cols, res, roughness, n, chunk=1 << 18):
    """Lobe x cosine integrated over each source texel with an n x n midpoint rule."""
    sub_d, sub_om = _subtexels(res, n)
    out = np.empty(len(cols))
    for a in range(0, len(cols), chunk):
        b = a + chunk
        cos = np.einsum("pj,pqj->pq", r[a:b], sub_d[cols[a:b]])
        out[a:b] = np.sum(ggx_ndf_cos(cos, roughness) * np.maximum(cos, 0.0) * sub_om[cols[a:b]], axis=1)
    return out


def _band_operator(res: int, roughness: float, inner, outer, supersample: int = 1) -> sp.csr_matrix:
    """Unnormalized GGX x cosine x solid-angle kernel restricted to one angular band.

    ``inner``/``outer`` are (a, b) ramps: the band weight is
    (1 - window(inner)) * window(outer), with ``None`` meaning no cut.
    """
    dirs = texel_directions(res).reshape(-1, 3)
    omega = texel_solid_angles(res).reshape(-1)
    n = len(dirs)
    if outer is None:
        rows, cols = np.nonzero(dirs @ dirs.T > 0.0) if n <= 6 * 32 * 32 else _pairs_within(dirs, 0.5 * np.pi)
    else:
        rows, cols = _pairs_within(dirs, outer[1])
    cos = np.einsum("ij,ij->i", dirs[rows], dirs[cols])
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    if supersample > 1:
        w = _integrated_lobe(dirs[rows], cols, res, roughness, supersample)
    else:
        w = ggx_ndf_cos(cos, roughness) * np.maximum(cos, 0.0) * omega[cols]
    if outer is not None:
        w = w * _window(theta, *outer)
    if inner is not None:
        w = w * (1.0 - _window(theta, *inner))
    keep = w > 0.0
    return sp.csr_matrix((w[keep], (rows[keep], cols[keep])), shape=(n, n))


def _pairs_within(dirs: np.ndarray, angle: float):
    tree = cKDTree(dirs)
    pairs = tree.query_pairs(2.0 * np.sin(0.5 * angle), output_type="ndarray")
    rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(len(dirs))])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(len(dirs))])
    return rows, cols


@dataclass(frozen=True)
class LevelOperator:
    """Linear map base texels -> one prefiltered level.

    Sum over angular bands of U_k K_k D_k (downsample, band kernel, upsample),
    followed by a per-texel rescale that makes every row sum to one.
    """

    bands: tuple          # of (down, kernel, up); down/up None at base resolution
    inv_norm: np.ndarray  # (T,)

    def _raw(self, x):
        out = 0.0
        for down, k, up in self.bands:
            y = x if down is None else down @ x
            y = k @ y
            out = out + (y if up is None else up @ y)
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.inv_norm[:, None] * self._raw(x) if x.ndim == 2 else self.inv_norm * self._raw(x)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        g = self.inv_norm[:, None] * g if g.ndim == 2 else self.inv_norm * g
        out = 0.0
        for down, k, up in self.bands:
            y = g if up is None else up.T @ g
            y = k.T @ y
            out = out + (y if down is None else down.T @ y)
        return out

    def dense(self) -> np.ndarray:
        return self.apply(np.eye(len(self.inv_norm)))

    @property
    def nnz(self) -> int:
        return sum(k.nnz for _, k, _ in self.bands)


@functools.lru_cache(maxsize=None)
def level_operator(res: int, roughness: float) -> LevelOperator:
    resolutions = _band_resolutions(res, roughness)
    bands = []
    inner = None
    for i, c in enumerate(resolutions):
        if i + 1 < len(resolutions):
            a = BAND_START * _texel_angle(resolutions[i + 1])
            outer = (a, 2.0 * a)
        else:
            outer = None
        # the sharpest band sees the lobe at only a few texels: integrate over texel areas
        sub = 4 if i == 0 and roughness**2 < 8.0 * _texel_angle(c) else 1
        k = _band_operator(c, roughness, inner, outer, sub).tocsr()
        down = up = None
        if c != res:
            down = _downsample_operator(res, c)
            up = _upsample_operator(c, res)
        bands.append((down, k, up))
        inner = outer
    op = LevelOperator(tuple(bands), np.ones(6 * res * res))
    z = op._raw(np.ones(6 * res * res))
    return LevelOperator(tuple(bands), 1.0 / z)


def prefilter(base_texels: np.ndarray, roughness_levels=DEFAULT_LEVELS) -> np.ndarray:
    """Prefiltered pyramid (M, 6, R, R, 3); roughness 0 is the delta lobe (a copy)."""
    base = np.asarray(base_texels, dtype=np.float64)
    res = base.shape[1]
    flat = base.reshape(-1, base.shape[-1])
    levels = []
    for rho in roughness_levels:
        if rho <= 0:
            levels.append(flat.copy())
        else:
            levels.append(level_operator(res, float(rho)).apply(flat))
    return np.stack(levels).reshape((len(levels),) + base.shape)


# ---------------------------------------------------------------------------
# trainable light


@dataclass
class LightQuery:
    """Everything the backward pass needs from one batch of lookups."""

    idx: np.ndarray       # (N, 4) flat texel indices
    weights: np.ndarray   # (N, 4)
    dweights: np.ndarray  # (N, 4, 3)
    lo: np.ndarray        # (N,) lower pyramid level
    hi: np.ndarray        # (N,) upper pyramid level
    t: np.ndarray         # (N,) blend towards hi
    dt: np.ndarray        # (N,) d t / d roughness
    v_lo: np.ndarray      # (N, 3) bilinear sample at lo
    v_hi: np.ndarray      # (N, 3)
    version: int

    def __len__(self):
        return len(self.lo)


@dataclass
class EnvLightGrad:
    base: np.ndarray       # (6, R, R, 3)
    directions: np.ndarray  # (N, 3)
    roughness: np.ndarray  # (N,)


class EnvLight:
    def __init__(self, base: np.ndarray, roughness_levels=DEFAULT_LEVELS):
        base = np.ascontiguousarray(base, dtype=np.float64)
        if base.ndim != 4 or base.shape[0] != 6 or base.shape[1] != base.shape[2] or base.shape[3] != 3:
            raise ValueError(f"cube map must be (6, R, R, 3), got {base.shape}")
        levels = tuple(float(r) for r in roughness_levels)
        if any(b <= a for a, b in zip(levels, levels[1:])) or levels[0] < 0 or levels[-1] > 1:
            raise ValueError(f"roughness levels must increase within [0, 1], got {levels}")
        self.base = base
        self.roughness_levels = levels
        self._pyramid = None
        self._built_from = None
        self._version = 0

    @classmethod
    def constant(cls, value=0.5, resolution: int = 64, **kw) -> "EnvLight":
        base = np.empty((6, resolution, resolution, 3))
        base[...] = value
        return cls(base, **kw)

    @classmethod
    def from_function(cls, fn, resolution: int = 64, **kw) -> "EnvLight":
        """Sample ``fn(dirs) -> (..., 3)`` at texel centres."""
        return cls(np.asarray(fn(texel_directions(resolution)), dtype=np.float64), **kw)

    @property
    def resolution(self) -> int:
        return self.base.shape[1]

    def copy(self) -> "EnvLight":
        out = EnvLight(self.base.copy(), self.roughness_levels)
        if not self.stale:
            out._pyramid = self._pyramid
            out._built_from = out.base.copy()
        return out

    @property
    def stale(self) -> bool:
        return self._pyramid is None or not np.array_equal(self._built_from, self.base)

    def refresh(self, force: bool = False) -> None:
        if force or self.stale:
            self._pyramid = prefilter(self.base, self.roughness_levels)
            self._built_from = self.base.copy()
            self._version += 1

    def set_base(self, base: np.ndarray) -> None:
        base = np.asarray(base, dtype=np.float64)
        if base.shape != self.base.shape:
            raise ValueError(f"expected cube map {self.base.shape}, got {base.shape}")
        self.base[...] = base

    def clamp(self) -> None:
        np.maximum(self.base, 0.0, out=self.base)

    @property
    def pyramid(self) -> np.ndarray:
        if self.stale:
            raise StaleEnvLightError("environment pyramid is stale; call refresh() after changing texels")
        return self._pyramid

    # -- lookups
    def _level_bracket(self, roughness: np.ndarray):
        levels = np.asarray(self.roughness_levels)
        rho = np.clip(roughness, levels[0], levels[-1])
        hi = np.clip(np.searchsorted(levels, rho, side="right"), 1, len(levels) - 1)
        lo = hi - 1
        span = levels[hi] - levels[lo]
        t = (rho - levels[lo]) / span
        inside = (roughness >= levels[0]) & (roughness <= levels[-1])
        dt = np.where(inside, 1.0 / span, 0.0)
        return lo, hi, t, dt

    def lookup(self, directions, roughness):
        """Trilinear lookup: bilinear within the two levels bracketing ``roughness``."""
        pyr = self.pyramid
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        roughness = np.broadcast_to(np.asarray(roughness, dtype=np.float64), (len(directions),))
        flat = pyr.reshape(len(self.roughness_levels), -1, 3)
        idx, w, dw = bilinear_taps(directions, self.resolution, with_grad=True)
        lo, hi, t, dt = self._level_bracket(roughness)
        v_lo = np.einsum("nk,nkc->nc", w, flat[lo[:, None], idx])
        v_hi = np.einsum("nk,nkc->nc", w, flat[hi[:, None], idx])
        values = (1.0 - t)[:, None] * v_lo + t[:, None] * v_hi
        return values, LightQuery(idx, w, dw, lo, hi, t, dt, v_lo, v_hi, self._version)

    def specular_light(self, view_dirs, normals, roughness):
        """Prefiltered specular radiance seen along ``view_dirs`` (surface to eye)."""
        r = reflect(view_dirs, normals)
        return self.lookup(r, roughness)

    def backward(self, query: LightQuery, grad_values: np.ndarray) -> EnvLightGrad:
        """Pull per-query radiance gradients back to texels, directions and roughness."""
        grad_values = np.asarray(grad_values, dtype=np.float64)
        if grad_values.shape != (len(query), 3):
            raise ValueError(f"gradient shape {grad_values.shape} does not match {len(query)} queries")
        if query.version != self._version or self.stale:
            raise StaleEnvLightError("query was recorded against a different pyramid")
        M = len(self.roughness_levels)
        T = 6 * self.resolution**2
        flat = self._pyramid.reshape(M, T, 3)

        g_level = np.zeros((M * T, 3))
        for level, scale in ((query.lo, 1.0 - query.t), (query.hi, query.t)):
            target = (level[:, None] * T + query.idx).ravel()
            contrib = (scale[:, None, None] * query.weights[:, :, None] * grad_values[:, None, :]).reshape(-1, 3)
            for c in range(3):
                g_level[:, c] += np.bincount(target, weights=contrib[:, c], minlength=M * T)
        g_level = g_level.reshape(M, T, 3)

        g_base = np.zeros((T, 3))
        for m, rho in enumerate(self.roughness_levels):
            if not g_level[m].any():
                continue
            if rho <= 0:
                g_base += g_level[m]
            else:
                g_base += level_operator(self.resolution, rho).adjoint(g_level[m])

        tex = (1.0 - query.t)[:, None, None] * flat[query.lo[:, None], query.idx] \
            + query.t[:, None, None] * flat[query.hi[:, None], query.idx]        # (N, 4, 3)
        g_tap = np.einsum("nkc,nc->nk", tex, grad_values)
        g_dir = np.einsum("nk,nkd->nd", g_tap, query.dweights)
        g_rough = np.sum((query.v_hi - query.v_lo) * grad_values, axis=1) * query.dt
        return EnvLightGrad(g_base.reshape(self.base.shape), g_dir, g_rough)

    # -- face images
    def save_faces(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for f, name in enumerate(FACE_NAMES):
            write_pfm(directory / f"{name}.pfm", self.base[f])

    @classmethod
    def load_faces(cls, directory, **kw) -> "EnvLight":
        directory = Path(directory)
        faces = []
        for name in FACE_NAMES:
            path = directory / f"{name}.pfm"
            if not path.exists():
                raise FileNotFoundError(f"missing cube-map face {path}")
            img = read_pfm(path)
            if img.ndim != 3 or img.shape[0] != img.shape[1]:
                raise ValueError(f"{path}: faces must be square RGB, got {img.shape}")
            faces.append(img.astype(np.float64))
        if len({f.shape for f in faces}) != 1:
            raise ValueError(f"{directory}: cube-map faces differ in size")
        return cls(np.maximum(np.stack(faces), 0.0), **kw)
