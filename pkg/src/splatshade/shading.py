"""Per-Gaussian shading: diffuse + tinted prefiltered specular + SH residual, gamma mapped.

Directions follow one convention throughout: ``view_dirs`` point from the
Gaussian towards the camera.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .envlight import EnvLight, EnvLightGrad, LightQuery, reflect
from .scene import Gaussian, quat_to_rotmat, sigmoid

GAMMA = 2.2
DEGENERATE_NORM = 1e-8

# Incremented whenever a residual cancels the shortest axis and we fall back to it.
diagnostics: Counter = Counter()

# ---------------------------------------------------------------------------
# real spherical harmonics up to degree 3, ordered (l, m) with m = -l..l

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005, 1.0925484305920792, 0.5462742152960396)
_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658, 0.3731763325901154,
       0.4570457994644658, 1.445305721320277, 0.5900435899266435)


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """(N, 16) basis values for unit directions (N, 3)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    return np.stack([
        np.full_like(x, _C0),
        _C1 * y, _C1 * z, _C1 * x,
        _C2[0] * x * y, _C2[1] * y * z, _C2[2] * (3 * zz - 1), _C2[3] * x * z, _C2[4] * (xx - yy),
        _C3[0] * y * (3 * xx - yy), _C3[1] * x * y * z, _C3[2] * y * (5 * zz - 1),
        _C3[3] * z * (5 * zz - 3), _C3[4] * x * (5 * zz - 1), _C3[5] * z * (xx - yy),
        _C3[6] * x * (xx - 3 * yy),
    ], axis=1)


def sh_basis_jacobian(dirs: np.ndarray) -> np.ndarray:
    """(N, 16, 3) partial derivatives of the basis polynomials in (x, y, z)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    o = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [
        (o, o, o),
        (o, _C1 * one, o), (o, o, _C1 * one), (_C1 * one, o, o),
        (_C2[0] * y, _C2[0] * x, o), (o, _C2[1] * z, _C2[1] * y), (o, o, 6 * _C2[2] * z),
        (_C2[3] * z, o, _C2[3] * x), (2 * _C2[4] * x, -2 * _C2[4] * y, o),
        (6 * _C3[0] * x * y, _C3[0] * (3 * x * x - 3 * y * y), o),
        (_C3[1] * y * z, _C3[1] * x * z, _C3[1] * x * y),
        (o, _C3[2] * (5 * z * z - 1), 10 * _C3[2] * y * z),
        (o, o, _C3[3] * (15 * z * z - 3)),
        (_C3[4] * (5 * z * z - 1), o, 10 * _C3[4] * x * z),
        (2 * _C3[5] * x * z, -2 * _C3[5] * y * z, _C3[5] * (x * x - y * y)),
        (_C3[6] * (3 * x * x - 3 * y * y), -6 * _C3[6] * x * y, o),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=1)


def eval_sh(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Evaluate (16, 3) or (N, 16, 3) coefficients along unit directions."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    basis = sh_basis(dirs)
    if coeffs.ndim == 2:
        out = basis @ coeffs
    else:
        out = np.einsum("nk,nkc->nc", basis, coeffs)
    return out[0] if np.ndim(dirs) == 1 else out


# ---------------------------------------------------------------------------
# tone mapping


def tonemap(linear):
    """Clamp below at zero, apply x^(1/2.2), clamp above at one."""
    x = np.maximum(np.asarray(linear, dtype=np.float64), 0.0)
    return np.minimum(x ** (1.0 / GAMMA), 1.0)


def tonemap_grad(linear):
    """Derivative of :func:`tonemap`; zero where either clamp is active."""
    x = np.asarray(linear, dtype=np.float64)
    inside = (x > 0.0) & (x < 1.0)
    safe = np.where(inside, x, 1.0)
    return np.where(inside, (1.0 / GAMMA) * safe ** (1.0 / GAMMA - 1.0), 0.0)


# ---------------------------------------------------------------------------
# normals


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def effective_normals(axes, dn_out, dn_in, view_dirs):
    """Viewer-facing residual-corrected normals.

    Returns (normals, cache) where cache holds what the backward pass needs.
    Exact ties (view . axis == 0) take the outward branch.
    """
    axes = np.asarray(axes, dtype=np.float64)
    outward = np.sum(view_dirs * axes, axis=-1) >= 0.0
    sign = np.where(outward, 1.0, -1.0)
    u = axes + np.where(outward[:, None], dn_out, dn_in)
    norm = np.linalg.norm(u, axis=-1)
    degenerate = norm < DEGENERATE_NORM
    if degenerate.any():
        diagnostics["degenerate_normal"] += int(degenerate.sum())
        u = np.where(degenerate[:, None], axes, u)
        norm = np.where(degenerate, np.linalg.norm(axes, axis=-1), norm)
    normals = sign[:, None] * u / norm[:, None]
    return normals, (outward, sign, norm, normals, degenerate)


def effective_normal(g: Gaussian, view_dir) -> np.ndarray:
    from .scene import shortest_axis
    n, _ = effective_normals(shortest_axis(g)[None], g.normal_residual_outward[None],
                             g.normal_residual_inward[None], np.asarray(view_dir, dtype=np.float64)[None])
    return n[0]


# ---------------------------------------------------------------------------
# shading


@dataclass
class ShadingResult:
    color: np.ndarray         # (N, 3) tone-mapped
    normal: np.ndarray        # (N, 3) world space, unit
    linear: np.ndarray        # (N, 3) before tone mapping
    view_dirs: np.ndarray
    reflected: np.ndarray
    specular: np.ndarray      # (N, 3) prefiltered light L_s
    sh: np.ndarray | None     # (N, 16) basis values when the residual is active
    roughness: np.ndarray
    light_query: LightQuery
    normal_cache: tuple


@dataclass
class ShadingGrad:
    diffuse: np.ndarray
    tint: np.ndarray
    roughness_raw: np.ndarray
    residual_sh: np.ndarray
    dn_out: np.ndarray
    dn_in: np.ndarray
    axes: np.ndarray
    view_dirs: np.ndarray
    envlight: EnvLightGrad


def shade_batch(axes, dn_out, dn_in, diffuse, tint, roughness_raw, residual_sh, view_dirs,
                env: EnvLight, residual_active: bool, indices=None) -> ShadingResult:
    view_dirs = np.asarray(view_dirs, dtype=np.float64)
    normals, ncache = effective_normals(axes, dn_out, dn_in, view_dirs)
    rough = sigmoid(roughness_raw)
    r = reflect(view_dirs, normals)
    spec, query = env.lookup(r, rough)
    linear = diffuse + tint * spec
    basis = None
    if residual_active:
        basis = sh_basis(view_dirs)
        linear = linear + np.einsum("nk,nkc->nc", basis, residual_sh)
    bad = ~np.isfinite(linear).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        src = i if indices is None else int(indices[i])
        raise FloatingPointError(f"non-finite shaded color for Gaussian {src}")
    return ShadingResult(tonemap(linear), normals, linear, view_dirs, r, spec, basis, rough, query, ncache)


def shade(g: Gaussian, view_dir, env: EnvLight, residual_active: bool = False) -> ShadingResult:
    """Shade one Gaussian seen along ``view_dir`` (unit, Gaussian -> camera)."""
    R = quat_to_rotmat(g.rotation)
    axis = R[:, int(np.argmin(g.scale))]
    return shade_batch(axis[None], g.normal_residual_outward[None], g.normal_residual_inward[None],
                       g.diffuse[None], g.specular_tint[None], np.atleast_1d(g.roughness_raw),
                       g.residual_sh[None], np.asarray(view_dir, dtype=np.float64)[None], env, residual_active)


def shade_backward(res: ShadingResult, tint, residual_sh, env: EnvLight,
                   grad_color, grad_normal=None) -> ShadingGrad:
    """Chain rule through tone mapping, the shading sum, the normal and the light lookup.

    ``grad_color`` is dL/d(color); ``grad_normal`` optionally adds dL/d(normal)
    for the world-space effective normal.
    """
    if res is None or res.light_query is None:
        raise ValueError("shade_backward needs the forward ShadingResult")
    n = len(res.color)
    grad_color = np.asarray(grad_color, dtype=np.float64)
    g_lin = grad_color * tonemap_grad(res.linear)

    g_spec = g_lin * tint
    env_grad = env.backward(res.light_query, g_spec)
    rough = res.roughness
    g_rough_raw = env_grad.roughness * rough * (1.0 - rough)

    g_view = np.zeros((n, 3))
    g_sh = np.zeros((n, 16, 3))
    if res.sh is not None:
        g_sh = res.sh[:, :, None] * g_lin[:, None, :]
        jac = sh_basis_jacobian(res.view_dirs)               # (N, 16, 3)
        g_basis = np.einsum("nkc,nc->nk", residual_sh, g_lin)
        g_view += np.einsum("nk,nkd->nd", g_basis, jac)

    # r = 2 (w.n) n - w
    w = res.view_dirs
    normals = res.normal
    g_r = env_grad.directions
    wn = np.sum(w * normals, axis=1, keepdims=True)
    g_view += 2.0 * normals * np.sum(normals * g_r, axis=1, keepdims=True) - g_r
    g_n = 2.0 * np.sum(normals * g_r, axis=1, keepdims=True) * w + 2.0 * wn * g_r
    if grad_normal is not None:
        g_n = g_n + grad_normal

    outward, sign, norm, _, degenerate = res.normal_cache
    nu = sign[:, None] * normals  # unit vector along u
    g_u = sign[:, None] * (g_n - nu * np.sum(nu * g_n, axis=1, keepdims=True)) / norm[:, None]
    g_dn = np.where(degenerate[:, None], 0.0, g_u)
    g_dn_out = np.where(outward[:, None], g_dn, 0.0)
    g_dn_in = np.where(outward[:, None], 0.0, g_dn)
    return ShadingGrad(
        diffuse=g_lin, tint=g_lin * res.specular, roughness_raw=g_rough_raw, residual_sh=g_sh,
        dn_out=g_dn_out, dn_in=g_dn_in, axes=g_u, view_dirs=g_view, envlight=env_grad,
    )
