"""CPU tile rasterizer for shaded Gaussians, with an exact backward pass.

Each visible Gaussian carries an 8-vector of blended features
``[r, g, b, depth, nx, ny, nz, 1]`` (normals in camera space). Pixels blend
them front to back with weights alpha_i * T_i; colour, raw depth, raw normal
and accumulated alpha are all linear in those weights, which keeps the
backward kernel a single loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .envlight import EnvLight, StaleEnvLightError
from .scene import Camera, SplatScene, quat_to_rotmat, quat_to_rotmat_backward
from .shading import ShadingResult, shade_backward, shade_batch

TILE = 16
NEAR = 0.01
COV_FLOOR = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
DEPTH_ALPHA_MIN = 1e-3
NORMAL_ALPHA_MIN = 1e-3
N_FEAT = 8


# ---------------------------------------------------------------------------
# projection


@dataclass
class Projection:
    """Screen-space splats for the Gaussians that survived culling."""

    index: np.ndarray     # (M,) source indices into the scene
    p_cam: np.ndarray     # (M, 3)
    mean2d: np.ndarray    # (M, 2) pixels
    cov2d: np.ndarray     # (M, 2, 2)
    conic: np.ndarray     # (M, 3) a, b, c of the inverse covariance
    radius: np.ndarray    # (M,) 3-sigma radius in pixels
    jac: np.ndarray       # (M, 2, 3)
    cov3d: np.ndarray     # (M, 3, 3)
    rot: np.ndarray       # (M, 3, 3)
    scales: np.ndarray    # (M, 3)

    @property
    def depth(self) -> np.ndarray:
        return self.p_cam[:, 2]


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_index: int


def project_all(scene: SplatScene, cam: Camera) -> Projection:
    p_cam = cam.world_to_camera(scene.positions)
    z = p_cam[:, 2]
    keep = z > NEAR
    idx = np.flatnonzero(keep)
    p_cam = p_cam[idx]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    rot = quat_to_rotmat(scene.rotations[idx])
    scales = np.exp(scene.log_scales[idx])
    M = rot * scales[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z**2
    T = jac @ cam.rotation
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += COV_FLOOR
    cov2d[:, 1, 1] += COV_FLOOR

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam)
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    onscreen = ((mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < cam.width)
                & (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < cam.height))
    s = onscreen
    return Projection(idx[s], p_cam[s], mean2d[s], cov2d[s], conic[s], radius[s], jac[s], cov3d[s],
                      rot[s], scales[s])


def project(g, cam: Camera) -> Splat2D | None:
    """Project a single Gaussian; ``None`` when culled."""
    from .scene import SplatScene as _S
    scene = _S.from_gaussians([g], EnvLight.constant(0.0, resolution=1))
    proj = project_all(scene, cam)
    if len(proj.index) == 0:
        return None
    return Splat2D(proj.mean2d[0], proj.cov2d[0], float(proj.depth[0]), 0)


# ---------------------------------------------------------------------------
# tile binning


@numba.njit(cache=True)
def _bin_tiles(order, mean2d, radius, tiles_x, tiles_y, tile):
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    rects = np.empty((len(order), 4), dtype=np.int64)
    for k in range(len(order)):
        s = order[k]
        x0 = max(int(np.floor((mean2d[s, 0] - radius[s]) / tile)), 0)
        x1 = min(int(np.floor((mean2d[s, 0] + radius[s]) / tile)), tiles_x - 1)
        y0 = max(int(np.floor((mean2d[s, 1] - radius[s]) / tile)), 0)
        y1 = min(int(np.floor((mean2d[s, 1] + radius[s]) / tile)), tiles_y - 1)
        rects[k, 0] = x0
        rects[k, 1] = x1
        rects[k, 2] = y0
        rects[k, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], dtype=np.int64)
    for k in range(len(order)):
        s = order[k]
        for ty in range(rects[k, 2], rects[k, 3] + 1):
            for tx in range(rects[k, 0], rects[k, 1] + 1):
                t = ty * tiles_x + tx
                lists[fill[t]] = s
                fill[t] += 1
    return offsets, lists


# ---------------------------------------------------------------------------
# blending kernels


@numba.njit(cache=True)
def _blend_forward(offsets, lists, mean2d, conic, opacity, feats, width, height, tile, tiles_x):
    accum = np.zeros((height, width, feats.shape[1]))
    t_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for py in range(height):
        ty = py // tile
        for px in range(width):
            t = ty * tiles_x + px // tile
            start = offsets[t]
            end = offsets[t + 1]
            T = 1.0
            last = 0
            cx = px + 0.5
            cy = py + 0.5
            for k in range(start, end):
                s = lists[k]
                dx = cx - mean2d[s, 0]
                dy = cy - mean2d[s, 1]
                power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                if power > 0.0:
                    power = 0.0
                alpha = min(ALPHA_MAX, opacity[s] * np.exp(power))
                test_T = T * (1.0 - alpha)
                if test_T < T_MIN:
                    break
                w = alpha * T
                for f in range(feats.shape[1]):
                    accum[py, px, f] += w * feats[s, f]
                T = test_T
                last = k + 1 - start
            t_final[py, px] = T
            n_contrib[py, px] = last
    return accum, t_final, n_contrib


@numba.njit(cache=True)
def _blend_backward(offsets, lists, mean2d, conic, opacity, feats, width, height, tile, tiles_x,
                    t_final, n_contrib, grad):
    m = len(opacity)
    nf = feats.shape[1]
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_opac = np.zeros(m)
    g_feat = np.zeros((m, nf))
    for py in range(height):
        ty = py // tile
        for px in range(width):
            n = n_contrib[py, px]
            if n == 0:
                continue
            t = ty * tiles_x + px // tile
            start = offsets[t]
            T = t_final[py, px]
            suffix = 0.0
            cx = px + 0.5
            cy = py + 0.5
            for k in range(start + n - 1, start - 1, -1):
                s = lists[k]
                dx = cx - mean2d[s, 0]
                dy = cy - mean2d[s, 1]
                power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                clipped_power = power > 0.0
                if clipped_power:
                    power = 0.0
                gauss = np.exp(power)
                raw = opacity[s] * gauss
                alpha = min(ALPHA_MAX, raw)
                T = T / (1.0 - alpha)
                w = alpha * T
                gf = 0.0
                for f in range(nf):
                    gf += grad[py, px, f] * feats[s, f]
                    g_feat[s, f] += w * grad[py, px, f]
                d_alpha = T * gf - suffix / (1.0 - alpha)
                suffix += gf * w
                if raw < ALPHA_MAX:
                    g_opac[s] += d_alpha * gauss
                    if not clipped_power:
                        d_power = d_alpha * opacity[s] * gauss
                        g_mean[s, 0] += d_power * (conic[s, 0] * dx + conic[s, 1] * dy)
                        g_mean[s, 1] += d_power * (conic[s, 1] * dx + conic[s, 2] * dy)
                        g_conic[s, 0] += -0.5 * dx * dx * d_power
                        g_conic[s, 1] += -dx * dy * d_power
                        g_conic[s, 2] += -0.5 * dy * dy * d_power
    return g_mean, g_conic, g_opac, g_feat


@numba.njit(cache=True)
def _blend_records(offsets, lists, mean2d, conic, opacity, width, height, tile, tiles_x, n_contrib, source):
    total = 0
    for py in range(height):
        for px in range(width):
            total += n_contrib[py, px]
    ptr = np.zeros(width * height + 1, dtype=np.int64)
    src = np.empty(total, dtype=np.int64)
    wts = np.empty(total)
    k_out = 0
    for py in range(height):
        ty = py // tile
        for px in range(width):
            t = ty * tiles_x + px // tile
            start = offsets[t]
            T = 1.0
            for k in range(start, start + n_contrib[py, px]):
                s = lists[k]
                dx = px + 0.5 - mean2d[s, 0]
                dy = py + 0.5 - mean2d[s, 1]
                power = min(0.0, -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy)
                alpha = min(ALPHA_MAX, opacity[s] * np.exp(power))
                src[k_out] = source[s]
                wts[k_out] = alpha * T
                T *= 1.0 - alpha
                k_out += 1
            ptr[py * width + px + 1] = k_out
    return ptr, src, wts


# ---------------------------------------------------------------------------
# render


@dataclass
class BlendRecords:
    """Per-pixel ordered (source_index, weight) lists in CSR layout (row-major pixels)."""

    offsets: np.ndarray
    source: np.ndarray
    weight: np.ndarray
    width: int

    def pixel(self, x: int, y: int):
        p = y * self.width + x
        sl = slice(self.offsets[p], self.offsets[p + 1])
        return list(zip(self.source[sl].tolist(), self.weight[sl].tolist()))


@dataclass
class RenderOutput:
    color: np.ndarray   # (H, W, 3)
    depth: np.ndarray   # (H, W)
    alpha: np.ndarray   # (H, W)
    normal: np.ndarray  # (H, W, 3) camera space
    ctx: dict = field(default_factory=dict, repr=False)

    @property
    def blend_records(self) -> BlendRecords:
        if "records" not in self.ctx:
            c = self.ctx
            if c["proj"] is None:
                h, w = self.alpha.shape
                self.ctx["records"] = BlendRecords(np.zeros(h * w + 1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                                                   np.zeros(0), w)
            else:
                ptr, src, wts = _blend_records(c["offsets"], c["lists"], c["proj"].mean2d, c["proj"].conic,
                                               c["opacity"], c["width"], c["height"], TILE, c["tiles_x"],
                                               c["n_contrib"], c["proj"].index)
                self.ctx["records"] = BlendRecords(ptr, src, wts, c["width"])
        return self.ctx["records"]


def _empty_output(cam: Camera) -> RenderOutput:
    h, w = cam.height, cam.width
    return RenderOutput(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w, 3)),
                        {"proj": None, "width": w, "height": h, "cam": cam, "n_gaussians": 0})


def render(scene: SplatScene, cam: Camera) -> RenderOutput:
    env = scene.envlight
    if env.stale:
        raise StaleEnvLightError("render() needs a fresh environment pyramid; call envlight.refresh()")
    n_total = len(scene)
    proj = project_all(scene, cam) if n_total else None
    if proj is None or len(proj.index) == 0:
        out = _empty_output(cam)
        out.ctx["n_gaussians"] = n_total
        return out

    idx = proj.index
    to_cam = cam.center - scene.positions[idx]
    dist = np.linalg.norm(to_cam, axis=1)
    view_dirs = to_cam / dist[:, None]
    k = np.argmin(scene.log_scales[idx], axis=1)
    axes = proj.rot[np.arange(len(idx)), :, k]
    sres = shade_batch(axes, scene.dn_out[idx], scene.dn_in[idx], scene.diffuse[idx], scene.tint[idx],
                       scene.roughness_raw[idx], scene.residual_sh[idx], view_dirs, env,
                       scene.residual_active, indices=idx)
    opacity = 1.0 / (1.0 + np.exp(-scene.opacity_logits[idx]))

    feats = np.empty((len(idx), N_FEAT))
    feats[:, :3] = sres.color
    feats[:, 3] = proj.depth
    feats[:, 4:7] = sres.normal @ cam.rotation.T
    feats[:, 7] = 1.0

    order = np.lexsort((idx, proj.depth))
    tiles_x = -(-cam.width // TILE)
    tiles_y = -(-cam.height // TILE)
    offsets, lists = _bin_tiles(order, proj.mean2d, proj.radius, tiles_x, tiles_y, TILE)
    accum, t_final, n_contrib = _blend_forward(offsets, lists, proj.mean2d, proj.conic, opacity, feats,
                                               cam.width, cam.height, TILE, tiles_x)

    alpha = accum[..., 7]
    depth_ok = alpha > DEPTH_ALPHA_MIN
    depth = np.where(depth_ok, accum[..., 3] / np.where(depth_ok, alpha, 1.0), 0.0)
    m = accum[..., 4:7]
    mnorm = np.linalg.norm(m, axis=-1)
    normal_ok = (alpha > NORMAL_ALPHA_MIN) & (mnorm > 1e-12)
    normal = np.where(normal_ok[..., None], m / np.where(normal_ok, mnorm, 1.0)[..., None], 0.0)

    ctx = dict(cam=cam, proj=proj, shading=sres, view_dirs=view_dirs, dist=dist, axis_index=k,
               opacity=opacity, feats=feats, offsets=offsets, lists=lists, tiles_x=tiles_x,
               t_final=t_final, n_contrib=n_contrib, accum=accum, depth_ok=depth_ok,
               normal_ok=normal_ok, mnorm=mnorm, width=cam.width, height=cam.height,
               n_gaussians=n_total, env_version=env._version)
    return RenderOutput(accum[..., :3].copy(), depth, alpha.copy(), normal, ctx)


# ---------------------------------------------------------------------------
# backward


@dataclass
class GradientBuffer:
    """Per-parameter gradients mirroring :class:`SplatScene`."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    diffuse: np.ndarray
    tint: np.ndarray
    roughness_raw: np.ndarray
    residual_sh: np.ndarray
    dn_out: np.ndarray
    dn_in: np.ndarray
    envlight: np.ndarray
    mean2d: np.ndarray  # screen-space mean gradient, used for densification statistics

    @classmethod
    def zeros_like(cls, scene: SplatScene) -> "GradientBuffer":
        n = len(scene)
        return cls(**{k: np.zeros_like(v) for k, v in scene.params().items()},
                   envlight=np.zeros_like(scene.envlight.base), mean2d=np.zeros((n, 2)))

    def param_items(self):
        from .scene import PARAM_FIELDS
        return [(k, getattr(self, k)) for k in PARAM_FIELDS]

    def add(self, other: "GradientBuffer") -> "GradientBuffer":
        for k in self.__dataclass_fields__:
            getattr(self, k)[...] += getattr(other, k)
        return self


def render_backward(scene: SplatScene, cam: Camera, out: RenderOutput, d_color=None, d_normal=None,
                    d_depth=None, d_alpha=None) -> GradientBuffer:
    """Gradients of a scalar loss given its derivatives w.r.t. the render outputs."""
    grads = GradientBuffer.zeros_like(scene)
    ctx = out.ctx
    if ctx.get("n_gaussians") != len(scene) or ctx.get("cam") is not cam:
        raise ValueError("render output does not belong to this scene/camera")
    proj: Projection | None = ctx["proj"]
    if proj is None:
        return grads
    env = scene.envlight
    if env.stale or ctx["env_version"] != env._version:
        raise StaleEnvLightError("environment light changed between render and backward")
    h, w = ctx["height"], ctx["width"]
    accum = ctx["accum"]
    alpha = accum[..., 7]

    G = np.zeros((h, w, N_FEAT))
    if d_color is not None:
        G[..., :3] = d_color
    if d_alpha is not None:
        G[..., 7] += d_alpha
    if d_depth is not None:
        ok = ctx["depth_ok"]
        safe = np.where(ok, alpha, 1.0)
        G[..., 3] = np.where(ok, d_depth / safe, 0.0)
        G[..., 7] += np.where(ok, -out.depth * d_depth / safe, 0.0)
    if d_normal is not None:
        ok = ctx["normal_ok"]
        n = out.normal
        proj_g = d_normal - n * np.sum(n * d_normal, axis=-1, keepdims=True)
        G[..., 4:7] = np.where(ok[..., None], proj_g / np.where(ok, ctx["mnorm"], 1.0)[..., None], 0.0)

    g_mean, g_conic, g_opac, g_feat = _blend_backward(
        ctx["offsets"], ctx["lists"], proj.mean2d, proj.conic, ctx["opacity"], ctx["feats"],
        w, h, TILE, ctx["tiles_x"], ctx["t_final"], ctx["n_contrib"], G)

    idx = proj.index
    sres: ShadingResult = ctx["shading"]
    g_normal_world = g_feat[:, 4:7] @ cam.rotation
    sg = shade_backward(sres, scene.tint[idx], scene.residual_sh[idx], env, g_feat[:, :3], g_normal_world)

    opacity = ctx["opacity"]
    grads.opacity_logits[idx] = g_opac * opacity * (1.0 - opacity)
    grads.diffuse[idx] = sg.diffuse
    grads.tint[idx] = sg.tint
    grads.roughness_raw[idx] = sg.roughness_raw
    grads.residual_sh[idx] = sg.residual_sh
    grads.dn_out[idx] = sg.dn_out
    grads.dn_in[idx] = sg.dn_in
    grads.envlight[...] = sg.envlight.base
    grads.mean2d[idx] = g_mean

    # conic -> 2D covariance -> 3D covariance and Jacobian
    Q = np.empty((len(idx), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    GQ = np.empty_like(Q)
    GQ[:, 0, 0] = g_conic[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_conic[:, 1]
    GQ[:, 1, 1] = g_conic[:, 2]
    G_cov2d = -Q @ GQ @ Q
    W = cam.rotation
    T = proj.jac @ W
    G_cov3d = np.swapaxes(T, 1, 2) @ G_cov2d @ T
    G_T = 2.0 * G_cov2d @ T @ proj.cov3d
    G_J = G_T @ W.T

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    g_pc = np.zeros((len(idx), 3))
    g_pc[:, 0] = G_J[:, 0, 2] * (-fx / z**2) + g_mean[:, 0] * fx / z
    g_pc[:, 1] = G_J[:, 1, 2] * (-fy / z**2) + g_mean[:, 1] * fy / z
    g_pc[:, 2] = (G_J[:, 0, 0] * (-fx / z**2) + G_J[:, 0, 2] * (2 * fx * x / z**3)
                  + G_J[:, 1, 1] * (-fy / z**2) + G_J[:, 1, 2] * (2 * fy * y / z**3)
                  - g_mean[:, 0] * fx * x / z**2 - g_mean[:, 1] * fy * y / z**2
                  + g_feat[:, 3])
    g_pos = g_pc @ W
    vd = ctx["view_dirs"]
    gv = sg.view_dirs
    g_pos -= (gv - vd * np.sum(vd * gv, axis=1, keepdims=True)) / ctx["dist"][:, None]
    grads.positions[idx] = g_pos

    M = proj.rot * proj.scales[:, None, :]
    G_M = 2.0 * G_cov3d @ M
    G_R = G_M * proj.scales[:, None, :]
    g_s = np.sum(proj.rot * G_M, axis=1)
    G_R[np.arange(len(idx)), :, ctx["axis_index"]] += sg.axes
    grads.log_scales[idx] = g_s * proj.scales
    grads.rotations[idx] = quat_to_rotmat_backward(scene.rotations[idx], G_R)
    return grads


# ---------------------------------------------------------------------------
# normals from depth

_SMOOTH = (1.0, 2.0, 1.0)


def _rays(cam: Camera) -> np.ndarray:
    u = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    v = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    r = np.empty((cam.height, cam.width, 3))
    r[..., 0] = u[None, :]
    r[..., 1] = v[:, None]
    r[..., 2] = 1.0
    return r


@dataclass
class DepthNormals:
    normal: np.ndarray  # (H, W, 3) camera space, zero where invalid
    valid: np.ndarray   # (H, W) bool
    du: np.ndarray
    dv: np.ndarray
    cross: np.ndarray
    sign: np.ndarray
    rays: np.ndarray


def depth_to_normal(depth: np.ndarray, alpha: np.ndarray, cam: Camera, alpha_threshold: float = 0.5,
                    return_cache: bool = False):
    """Camera-space normals from a depth map via Sobel-smoothed point-map differences.

    Pixels on the border, or whose 3x3 neighbourhood has alpha at or below
    ``alpha_threshold``, get a zero normal and are marked invalid.
    """
    h, w = depth.shape
    rays = _rays(cam)
    P = depth[..., None] * rays
    du = np.zeros((h, w, 3))
    dv = np.zeros((h, w, 3))
    if h >= 3 and w >= 3:
        for k, s in enumerate(_SMOOTH):
            r = slice(k, h - 2 + k)
            c = slice(k, w - 2 + k)
            du[1:-1, 1:-1] += s * (P[r, 2:] - P[r, :-2])
            dv[1:-1, 1:-1] += s * (P[2:, c] - P[:-2, c])
        du /= 8.0
        dv /= 8.0
    cross = np.cross(dv, du)
    norm = np.linalg.norm(cross, axis=-1)

    covered = alpha > alpha_threshold
    valid = np.zeros((h, w), dtype=bool)
    if h >= 3 and w >= 3:
        ok = np.ones((h - 2, w - 2), dtype=bool)
        for i in range(3):
            for j in range(3):
                ok &= covered[i:h - 2 + i, j:w - 2 + j]
        valid[1:-1, 1:-1] = ok
    valid &= norm > 1e-12
    unit = cross / np.where(valid, norm, 1.0)[..., None]
    sign = np.where(np.sum(unit * P, axis=-1) > 0, -1.0, 1.0)
    normal = np.where(valid[..., None], sign[..., None] * unit, 0.0)
    if return_cache:
        return DepthNormals(normal, valid, du, dv, cross, sign, rays)
    return normal, valid


def depth_to_normal_backward(cache: DepthNormals, grad_normal: np.ndarray) -> np.ndarray:
    """dL/d(depth) from dL/d(normal) for :func:`depth_to_normal`."""
    h, w = cache.valid.shape
    g = np.where(cache.valid[..., None], grad_normal, 0.0) * cache.sign[..., None]
    norm = np.linalg.norm(cache.cross, axis=-1)
    unit = cache.cross / np.where(cache.valid, norm, 1.0)[..., None]
    g_cross = (g - unit * np.sum(unit * g, axis=-1, keepdims=True)) / np.where(cache.valid, norm, 1.0)[..., None]
    g_dv = np.cross(cache.du, g_cross) / 8.0
    g_du = np.cross(g_cross, cache.dv) / 8.0
    g_P = np.zeros((h, w, 3))
    if h >= 3 and w >= 3:
        for k, s in enumerate(_SMOOTH):
            r = slice(k, h - 2 + k)
            c = slice(k, w - 2 + k)
            g_P[r, 2:] += s * g_du[1:-1, 1:-1]
            g_P[r, :-2] -= s * g_du[1:-1, 1:-1]
            g_P[2:, c] += s * g_dv[1:-1, 1:-1]
            g_P[:-2, c] -= s * g_dv[1:-1, 1:-1]
    return np.sum(g_P * cache.rays, axis=-1)
