"""Shared builders and numerical oracles for the test suite."""

import numpy as np

from splatshade.envlight import EnvLight, face_uv_to_dir, ggx_ndf_cos
from splatshade.losses import loss_and_grad
from splatshade.scene import PARAM_FIELDS, Camera, SplatScene, logit, rotmat_to_quat


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_quats(rng, n):
    return unit(rng.normal(size=(n, 4)))


def front_camera(size=16, dist=3.0, f=None):
    f = f if f is not None else 1.1 * size
    return Camera.look_at((0.0, 0.0, -dist), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), f, size, size)


def random_scene(rng, n=12, env_res=4, spread=0.5, residual_active=True, tint=True):
    """Small, well-conditioned scene: flattened Gaussians in front of ``front_camera``."""
    scales = np.exp(rng.uniform(np.log(0.08), np.log(0.3), (n, 3)))
    scales[:, 2] *= rng.uniform(0.2, 0.6, n)
    p = {
        "positions": rng.uniform(-spread, spread, (n, 3)),
        "log_scales": np.log(scales),
        "rotations": random_quats(rng, n),
        "opacity_logits": logit(rng.uniform(0.3, 0.8, n)),
        "diffuse": rng.uniform(0.1, 0.5, (n, 3)),
        "tint": rng.uniform(0.2, 0.6, (n, 3)) if tint else np.zeros((n, 3)),
        "roughness_raw": rng.uniform(-1.2, 1.2, n),
        "residual_sh": 0.05 * rng.normal(size=(n, 16, 3)),
        "dn_out": 0.1 * rng.normal(size=(n, 3)),
        "dn_in": 0.1 * rng.normal(size=(n, 3)),
    }
    env = EnvLight(rng.uniform(0.1, 0.6, (6, env_res, env_res, 3)))
    return SplatScene(p, env, residual_active)


def flat_gaussian(position, normal, scale=(0.2, 0.2, 0.02), opacity=0.9, diffuse=(0.5, 0.5, 0.5),
                  tint=(0.0, 0.0, 0.0), roughness=0.5):
    """Parameter dict for one Gaussian whose shortest axis is ``normal``."""
    n = unit(normal)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = unit(np.cross(helper, n))
    t2 = np.cross(n, t1)
    R = np.stack([t1, t2, n], axis=1)
    return {
        "positions": np.asarray(position, dtype=np.float64)[None],
        "log_scales": np.log(np.asarray(scale, dtype=np.float64))[None],
        "rotations": rotmat_to_quat(R)[None],
        "opacity_logits": np.array([logit(opacity)]),
        "diffuse": np.asarray(diffuse, dtype=np.float64)[None],
        "tint": np.asarray(tint, dtype=np.float64)[None],
        "roughness_raw": np.array([logit(roughness)]),
        "residual_sh": np.zeros((1, 16, 3)),
        "dn_out": np.zeros((1, 3)),
        "dn_in": np.zeros((1, 3)),
    }


def centred_camera(size=16, dist=0.0, f=20.0):
    """Camera at z = dist looking down +z with the optical axis through a pixel centre."""
    c = size // 2 + 0.5
    return Camera(f, f, c, c, size, size, np.eye(3), np.array([0.0, 0.0, dist]))


def diffuse_stack(depths, opacities, colors):
    parts = [flat_gaussian((0, 0, z), (0, 0, -1), scale=(0.3, 0.3, 0.01), opacity=o, diffuse=c)
             for z, o, c in zip(depths, opacities, colors)]
    return SplatScene(merge(*parts), EnvLight.constant(0.5, resolution=2))


def plane_depth(cam, normal, point):
    """Depth map of the plane n . (x - p) = 0 in camera space."""
    u = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    v = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    rays = np.stack(np.broadcast_arrays(u[None, :], v[:, None], 1.0), axis=-1)
    return (normal @ point) / (rays @ normal)


def merge(*parts):
    return {k: np.concatenate([p[k] for p in parts]) for k in PARAM_FIELDS}


def objective(scene, cam, gt, **weights):
    scene.envlight.refresh()
    rep, _, _ = loss_and_grad(scene, cam, gt, **weights)
    return rep.total


def fd_param_check(scene, cam, gt, name, idx, h=1e-6, **weights):
    """Central differences of the total objective at the flat entries ``idx`` of one field.

    Returns (analytic, numeric) arrays.
    """
    scene.envlight.refresh()
    _, grads, _ = loss_and_grad(scene, cam, gt, **weights)
    if name == "envlight":
        arr, g = scene.envlight.base, grads.envlight
    else:
        arr, g = getattr(scene, name), getattr(grads, name)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    num = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = objective(scene, cam, gt, **weights)
        flat[i] = old - h
        fm = objective(scene, cam, gt, **weights)
        flat[i] = old
        num[k] = (fp - fm) / (2 * h)
    scene.envlight.refresh()
    return gflat[np.asarray(idx)], num


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else float(np.linalg.norm(a))


def texel_lobe_mc(face, i, j, res, r, n, roughness, samples=10**6, seed=0):
    """Monte-Carlo estimate of the GGX x cosine integral over one cube-map texel.

    Uniform samples in the texel's face coordinates, with the Jacobian
    d(omega) = (2/res)^2 / |d|^3 du dv. ``r`` is the lobe axis, ``n`` the
    normal in the cosine; both (K, 3).
    """
    rng = np.random.default_rng(seed)
    u = (j + rng.random(samples)) / res
    v = (i + rng.random(samples)) / res
    d = face_uv_to_dir(np.full(samples, face), u, v)
    length = np.linalg.norm(d, axis=1)
    dh = d / length[:, None]
    jac = (2.0 / res) ** 2 / length**3
    out = []
    for rr, nn in zip(np.atleast_2d(r), np.atleast_2d(n)):
        out.append(np.mean(ggx_ndf_cos(dh @ rr, roughness) * np.maximum(dh @ nn, 0.0) * jac))
    return np.array(out)


def ggx_sample(r, roughness, count, rng):
    """Directions distributed with density D(r . w)(r . w) around the unit axis ``r``."""
    a2 = roughness**4
    xi1, xi2 = rng.random(count), rng.random(count)
    c2 = (1.0 - xi1) / (1.0 + (a2 - 1.0) * xi1)
    c = np.sqrt(c2)
    s = np.sqrt(np.maximum(1.0 - c2, 0.0))
    ph = 2.0 * np.pi * xi2
    helper = np.array([1.0, 0.0, 0.0]) if abs(r[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = unit(np.cross(helper, r))
    y = np.cross(r, x)
    return (s * np.cos(ph))[:, None] * x + (s * np.sin(ph))[:, None] * y + c[:, None] * r


def blob_env(rng):
    """Smooth random radiance: coloured ambient plus 2-3 Gaussian blobs 0.3-0.6 rad wide."""
    k = rng.integers(2, 4)
    mus = unit(rng.normal(size=(k, 3)))
    sig = rng.uniform(0.3, 0.6, k)
    col = rng.uniform(0.3, 1.5, (k, 3))
    amb = rng.uniform(0.05, 0.3, 3)

    def f(d):
        out = np.broadcast_to(amb, d.shape[:-1] + (3,)).copy()
        for mu, s, c in zip(mus, sig, col):
            out += np.exp((d @ mu - 1.0) / s**2)[..., None] * c
        return out
    return f


def specular_mc(f, r, n, roughness, rng, samples=10**6):
    """Normalised GGX x cosine average of radiance ``f`` around ``r`` with cosine against ``n``."""
    w = ggx_sample(r, roughness, samples, rng)
    # the sampler's density is D(r . w)(r . w), so the cosine against n enters as a ratio
    wt = np.maximum(w @ n, 0.0) / (w @ r)
    return (f(w) * wt[:, None]).sum(0) / wt.sum()
