import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import (centred_camera, diffuse_stack, front_camera, plane_depth, random_scene,
                     rel_err, unit)
from splatshade.envlight import EnvLight, StaleEnvLightError
from splatshade.losses import loss_and_grad
from splatshade.rasterizer import (ALPHA_MAX, COV_FLOOR, T_MIN, TILE, GradientBuffer, depth_to_normal,
                                   depth_to_normal_backward, project, render, render_backward)
from splatshade.scene import Camera, Gaussian, SplatScene, quat_to_rotmat
from splatshade.shading import shade_batch, tonemap, tonemap_grad


# -- brute-force reference


def reference_render(scene, cam):
    """Direct per-pixel evaluation, independent of the tiled kernels."""
    scene.envlight.refresh()
    Rw = cam.rotation
    p = (scene.positions - cam.center) @ Rw.T
    out = np.zeros((cam.height, cam.width, 8))
    keep = np.flatnonzero(p[:, 2] > 0.01)
    if len(keep) == 0:
        return out
    rot = quat_to_rotmat(scene.rotations)
    cov3 = np.einsum("nij,nj,nkj->nik", rot, np.exp(2 * scene.log_scales), rot)
    splats = []
    for i in keep:
        x, y, z = p[i]
        J = np.array([[cam.fx / z, 0, -cam.fx * x / z**2], [0, cam.fy / z, -cam.fy * y / z**2]])
        c2 = J @ Rw @ cov3[i] @ Rw.T @ J.T + COV_FLOOR * np.eye(2)
        mean = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        rad = 3 * np.sqrt(np.linalg.eigvalsh(c2).max())
        if mean[0] + rad <= 0 or mean[0] - rad >= cam.width or mean[1] + rad <= 0 or mean[1] - rad >= cam.height:
            continue
        splats.append((z, i, mean, np.linalg.inv(c2), rad))
    splats.sort(key=lambda s: (s[0], s[1]))
    idx = np.array([s[1] for s in splats], dtype=int)
    if len(idx) == 0:
        return out
    to_cam = cam.center - scene.positions[idx]
    view = to_cam / np.linalg.norm(to_cam, axis=1, keepdims=True)
    axes, _ = scene.shortest_axes()
    sres = shade_batch(axes[idx], scene.dn_out[idx], scene.dn_in[idx], scene.diffuse[idx], scene.tint[idx],
                       scene.roughness_raw[idx], scene.residual_sh[idx], view, scene.envlight, scene.residual_active)
    feats = np.concatenate([sres.color, np.array([s[0] for s in splats])[:, None], sres.normal @ Rw.T,
                            np.ones((len(idx), 1))], axis=1)
    opac = scene.opacities[idx]
    for py in range(cam.height):
        for px in range(cam.width):
            T = 1.0
            for k, (z, i, mean, inv, rad) in enumerate(splats):
                # the splat reaches this pixel's tile
                tx0, tx1 = np.floor((mean[0] - rad) / TILE), np.floor((mean[0] + rad) / TILE)
                ty0, ty1 = np.floor((mean[1] - rad) / TILE), np.floor((mean[1] + rad) / TILE)
                if not (tx0 <= px // TILE <= tx1 and ty0 <= py // TILE <= ty1):
                    continue
                d = np.array([px + 0.5, py + 0.5]) - mean
                a = min(ALPHA_MAX, opac[k] * np.exp(-0.5 * d @ inv @ d))
                if T * (1 - a) < T_MIN:
                    break
                out[py, px] += a * T * feats[k]
                T *= 1 - a
    return out


@pytest.mark.parametrize("seed", range(4))
def test_render_matches_reference(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n=15)
    cam = front_camera(20)
    scene.envlight.refresh()
    out = render(scene, cam)
    ref = reference_render(scene, cam)
    assert np.allclose(out.color, ref[..., :3], atol=1e-12)
    assert np.allclose(out.alpha, ref[..., 7], atol=1e-12)
    ok = ref[..., 7] > 1e-3
    assert np.allclose(out.depth[ok], ref[..., 3][ok] / ref[..., 7][ok], atol=1e-12)
    m = ref[..., 4:7]
    nrm = np.linalg.norm(m, axis=-1)
    good = ok & (nrm > 1e-12)
    assert np.allclose(out.normal[good], m[good] / nrm[good, None], atol=1e-12)
    assert not out.normal[~ok].any()


# -- projection


def test_project_behind_camera_is_culled():
    g = Gaussian(np.array([0, 0, -1.0]), np.full(3, 0.1), np.array([1.0, 0, 0, 0]))
    assert project(g, centred_camera()) is None


def test_project_off_frame_is_culled():
    g = Gaussian(np.array([50.0, 0, 2.0]), np.full(3, 0.1), np.array([1.0, 0, 0, 0]))
    assert project(g, centred_camera()) is None


@given(st.floats(0.5, 20.0), st.floats(0.01, 0.5), st.floats(5.0, 100.0))
def test_project_on_axis(d, s, f):
    cam = Camera(f, f, 8.0, 8.0, 16, 16)
    sp = project(Gaussian(np.array([0, 0, d]), np.full(3, s), np.array([1.0, 0, 0, 0])), cam)
    assert np.allclose(sp.mean2d, [8.0, 8.0], atol=1e-12)
    assert np.allclose(sp.cov2d, (f * s / d) ** 2 * np.eye(2) + COV_FLOOR * np.eye(2), rtol=1e-12)
    assert sp.depth == d


@given(st.tuples(*[st.floats(-5, 5)] * 3), st.integers(0, 1000))
def test_project_rigid_translation_invariance(offset, seed):
    rng = np.random.default_rng(seed)
    q = unit(rng.normal(size=4))
    g = Gaussian(np.array([0.1, -0.2, 2.0]), rng.uniform(0.05, 0.3, 3), q)
    cam = Camera.look_at((0, 0, -1.0), (0, 0, 1.0), (0, 1, 0), 20.0, 16, 16)
    off = np.asarray(offset)
    g2 = Gaussian(g.position + off, g.scale, q)
    cam2 = Camera(cam.fx, cam.fy, cam.cx, cam.cy, 16, 16, cam.rotation, cam.center + off)
    a, b = project(g, cam), project(g2, cam2)
    assert np.allclose(a.mean2d, b.mean2d, atol=1e-9)
    assert np.allclose(a.cov2d, b.cov2d, rtol=1e-9, atol=1e-9)
    assert abs(a.depth - b.depth) < 1e-9


# -- forward


def test_empty_scene_renders_zero():
    scene = SplatScene.empty(EnvLight.constant(0.5, resolution=2))
    scene.envlight.refresh()
    out = render(scene, centred_camera())
    for im in (out.color, out.depth, out.alpha, out.normal):
        assert not im.any()


def test_render_stale_env_raises():
    scene = diffuse_stack([2.0], [0.5], [(0.5, 0.5, 0.5)])
    with pytest.raises(StaleEnvLightError):
        render(scene, centred_camera())


def test_single_opaque_gaussian():
    scene = diffuse_stack([2.0], [0.999999], [(0.2, 0.4, 0.6)])
    scene.envlight.refresh()
    out = render(scene, centred_camera())
    c = tonemap(np.array([0.2, 0.4, 0.6]))
    # opacity saturates at the alpha clip
    assert np.allclose(out.color[8, 8], ALPHA_MAX * c, atol=1e-12)
    assert out.depth[8, 8] == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(out.normal[8, 8], [0, 0, -1], atol=1e-12)


def test_two_gaussians_clipped_back():
    c1, c2 = (0.9, 0.1, 0.1), (0.1, 0.1, 0.9)
    scene = diffuse_stack([2.0, 3.0], [0.6, 0.999999], [c1, c2])
    scene.envlight.refresh()
    px = render(scene, centred_camera()).color[8, 8]
    t1, t2 = tonemap(np.array(c1)), tonemap(np.array(c2))
    assert np.allclose(px, 0.6 * t1 + 0.4 * ALPHA_MAX * t2, atol=1e-12)


def test_two_and_three_gaussian_expansions():
    cs = [(0.9, 0.1, 0.1), (0.1, 0.8, 0.1), (0.1, 0.1, 0.7)]
    t = [tonemap(np.array(c)) for c in cs]
    scene = diffuse_stack([2.0, 3.0], [0.6, 0.9], cs[:2])
    scene.envlight.refresh()
    assert np.allclose(render(scene, centred_camera()).color[8, 8], 0.6 * t[0] + 0.4 * 0.9 * t[1], atol=1e-12)
    scene = diffuse_stack([2.5, 2.0, 4.0], [0.3, 0.5, 0.8], [cs[1], cs[0], cs[2]])
    scene.envlight.refresh()
    out = render(scene, centred_camera())
    expect = 0.5 * t[0] + 0.5 * 0.3 * t[1] + 0.5 * 0.7 * 0.8 * t[2]
    assert np.allclose(out.color[8, 8], expect, atol=1e-12)
    d = (0.5 * 2.0 + 0.15 * 2.5 + 0.28 * 4.0) / (0.5 + 0.15 + 0.28)
    assert out.depth[8, 8] == pytest.approx(d, abs=1e-12)
    assert out.alpha[8, 8] == pytest.approx(1 - 0.5 * 0.7 * 0.2, abs=1e-12)


def test_early_termination():
    # two clipped splats leave T = 1e-4; the third would push it below and is never blended
    scene = diffuse_stack([2.0, 3.0, 4.0], [0.999999] * 3, [(1, 1, 1), (0.2, 0.2, 0.2), (0.5, 0, 0)])
    scene.envlight.refresh()
    out = render(scene, centred_camera())
    a = ALPHA_MAX
    assert np.allclose(out.color[8, 8], a * tonemap(np.ones(3)) + (1 - a) * a * tonemap(np.full(3, 0.2)))
    rec = out.blend_records.pixel(8, 8)
    assert [s for s, _ in rec] == [0, 1]


@given(st.integers(0, 10**6))
def test_blend_weights_sum_to_alpha(seed):
    scene = random_scene(np.random.default_rng(seed), n=10)
    scene.envlight.refresh()
    out = render(scene, front_camera(16))
    rec = out.blend_records
    assert np.all(rec.weight >= 0)
    sums = np.add.reduceat(np.append(rec.weight, 0.0), rec.offsets[:-1]) * (np.diff(rec.offsets) > 0)
    assert np.allclose(sums.reshape(out.alpha.shape), out.alpha, atol=1e-12)
    assert np.all(out.alpha <= 1.0)


@given(st.integers(0, 10**6))
def test_color_linear_in_shaded_colors(seed):
    scene = random_scene(np.random.default_rng(seed), n=10)
    scene.envlight.refresh()
    out = render(scene, front_camera(16))
    colors = np.zeros((len(scene), 3))
    colors[out.ctx["proj"].index] = out.ctx["shading"].color
    rec = out.blend_records
    recon = np.zeros(out.color.shape).reshape(-1, 3)
    pix = np.repeat(np.arange(len(rec.offsets) - 1), np.diff(rec.offsets))
    np.add.at(recon, pix, rec.weight[:, None] * colors[rec.source])
    assert np.allclose(recon.reshape(out.color.shape), out.color, atol=1e-12)


@given(st.integers(0, 10**6))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n=12)
    scene.envlight.refresh()
    cam = front_camera(16)
    a = render(scene, cam)
    perm = rng.permutation(len(scene))
    b = render(scene.select(perm), cam)
    for x, y in ((a.color, b.color), (a.depth, b.depth), (a.alpha, b.alpha), (a.normal, b.normal)):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("opacity", [0.9, 0.99, 0.9999])
def test_occlusion_limit(opacity):
    front, back = (0.8, 0.2, 0.1), (0.0, 0.9, 0.9)
    scene = diffuse_stack([2.0, 3.0], [opacity, 0.9], [front, back])
    scene.envlight.refresh()
    px = render(scene, centred_camera()).color[8, 8]
    a = min(opacity, ALPHA_MAX)
    assert np.allclose(px, a * tonemap(np.array(front)) + (1 - a) * 0.9 * tonemap(np.array(back)), atol=1e-12)
    assert np.abs(px - tonemap(np.array(front))).max() <= (1 - a) + 1e-12


def test_render_deterministic():
    scene = random_scene(np.random.default_rng(0), n=20)
    scene.envlight.refresh()
    cam = front_camera(24)
    a, b = render(scene, cam), render(scene, cam)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.normal, b.normal)


# -- depth to normal


def test_fronto_parallel_plane():
    cam = centred_camera(12)
    n, valid = depth_to_normal(np.full((12, 12), 3.0), np.ones((12, 12)), cam)
    assert valid[1:-1, 1:-1].all() and not valid[0].any() and not valid[:, -1].any()
    assert np.allclose(n[1:-1, 1:-1], [0, 0, -1], atol=1e-12)


def test_plane_tilted_30_degrees():
    cam = centred_camera(24, f=24.0)
    t = np.deg2rad(30)
    normal = np.array([0.0, np.sin(t), -np.cos(t)])
    depth = plane_depth(cam, normal, np.array([0, 0, 4.0]))
    n, valid = depth_to_normal(depth, np.ones_like(depth), cam)
    ang = np.degrees(np.arccos(np.clip(n[valid] @ normal, -1, 1)))
    assert valid.sum() == 22 * 22
    assert ang.max() < 1.0


@given(st.floats(-1.2, 1.2), st.floats(0, 2 * np.pi), st.floats(2.0, 8.0))
def test_random_planes_recovered(tilt, azim, dist):
    cam = centred_camera(16, f=16.0)
    normal = unit(np.array([np.sin(tilt) * np.cos(azim), np.sin(tilt) * np.sin(azim), -np.cos(tilt)]))
    depth = plane_depth(cam, normal, np.array([0, 0, dist]))
    if np.any(depth <= 0):
        return
    n, valid = depth_to_normal(depth, np.ones_like(depth), cam)
    assert valid.any()
    assert np.degrees(np.arccos(np.clip(n[valid] @ normal, -1, 1))).max() < 1.0


def test_zero_alpha_gives_zero_normals():
    cam = centred_camera(10)
    n, valid = depth_to_normal(np.full((10, 10), 2.0), np.zeros((10, 10)), cam)
    assert not n.any() and not valid.any()


def test_alpha_hole_masks_neighbours():
    cam = centred_camera(10)
    alpha = np.ones((10, 10))
    alpha[5, 5] = 0.2
    _, valid = depth_to_normal(np.full((10, 10), 2.0), alpha, cam)
    assert not valid[4:7, 4:7].any() and valid[2, 2]


def test_depth_to_normal_backward_fd():
    rng = np.random.default_rng(0)
    cam = centred_camera(9, f=9.0)
    depth = 3.0 + 0.2 * rng.random((9, 9))
    alpha = np.ones((9, 9))
    up = rng.normal(size=(9, 9, 3))
    cache = depth_to_normal(depth, alpha, cam, return_cache=True)
    ana = depth_to_normal_backward(cache, up)
    h = 1e-6
    num = np.zeros_like(depth)
    for i in range(9):
        for j in range(9):
            d = depth.copy()
            d[i, j] += h
            fp = np.sum(depth_to_normal(d, alpha, cam)[0] * up)
            d[i, j] -= 2 * h
            fm = np.sum(depth_to_normal(d, alpha, cam)[0] * up)
            num[i, j] = (fp - fm) / (2 * h)
    assert rel_err(ana, num) < 1e-6


# -- backward


def test_backward_zero_upstream():
    scene = random_scene(np.random.default_rng(0), n=8)
    scene.envlight.refresh()
    cam = front_camera(16)
    out = render(scene, cam)
    g = render_backward(scene, cam, out, np.zeros((16, 16, 3)))
    for k in g.__dataclass_fields__:
        assert not getattr(g, k).any(), k


def test_backward_single_pixel_diffuse():
    scene = diffuse_stack([2.0], [0.7], [(0.2, 0.4, 0.6)])
    scene.envlight.refresh()
    cam = Camera(20.0, 20.0, 0.5, 0.5, 1, 1, np.eye(3), np.zeros(3))
    out = render(scene, cam)
    d = np.zeros((1, 1, 3))
    d[0, 0] = [1.0, 0, 0]
    g = render_backward(scene, cam, out, d)
    (src, w), = out.blend_records.pixel(0, 0)
    assert w == pytest.approx(0.7, abs=1e-12)
    assert g.diffuse[0, 0] == pytest.approx(w * tonemap_grad(0.2), rel=1e-12)
    assert g.diffuse[0, 1] == 0 and g.diffuse[0, 2] == 0


def test_backward_culled_gaussians_get_zero():
    rng = np.random.default_rng(1)
    scene = random_scene(rng, n=6)
    scene.positions[2] = [0, 0, -10.0]   # behind the camera
    scene.positions[4] = [40.0, 0, 0]    # off frame
    scene.envlight.refresh()
    cam = front_camera(16)
    _, g, _ = loss_and_grad(scene, cam, rng.random((16, 16, 3)), lambda_sparse=0.0, lambda_reg=0.0)
    for name, arr in g.param_items():
        assert not arr[[2, 4]].any(), name


def test_backward_rejects_mismatched_output():
    scene = random_scene(np.random.default_rng(0), n=5)
    scene.envlight.refresh()
    cam = front_camera(16)
    out = render(scene, cam)
    with pytest.raises(ValueError):
        render_backward(scene.select(np.arange(4)), cam, out, np.zeros((16, 16, 3)))
    with pytest.raises(ValueError):
        render_backward(scene, front_camera(16), out, np.zeros((16, 16, 3)))
    scene.envlight.base += 0.1
    scene.envlight.refresh()
    with pytest.raises(StaleEnvLightError):
        render_backward(scene, cam, out, np.zeros((16, 16, 3)))


def test_gradient_buffer_mirrors_scene():
    scene = random_scene(np.random.default_rng(0), n=7)
    g = GradientBuffer.zeros_like(scene)
    for name, arr in g.param_items():
        assert arr.shape == getattr(scene, name).shape
    assert g.envlight.shape == scene.envlight.base.shape
