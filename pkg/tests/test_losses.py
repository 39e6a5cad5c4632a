import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import fd_param_check, front_camera, random_scene, rel_err
from splatshade import losses
from splatshade.losses import (LAMBDA_NORMAL, LAMBDA_REG, LAMBDA_SPARSE, color_loss, color_loss_grad,
                               loss_and_grad, normal_loss, normal_loss_grad, reg_loss, reg_loss_grad, sparse_loss,
                               sparse_loss_grad_logits, total_loss)
from splatshade.scene import PARAM_FIELDS, logit

probs = st.floats(1e-9, 1 - 1e-9)


# -- colour


def test_color_loss_examples():
    a = np.random.default_rng(0).random((4, 5, 3))
    assert color_loss(a, a) == 0
    assert color_loss(np.zeros((4, 5, 3)), np.ones((4, 5, 3))) == 1
    b = a.copy()
    b[2, 3, 1] += 0.5
    assert color_loss(a, b) == pytest.approx(0.25 / (3 * 4 * 5), rel=1e-12)


def test_color_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        color_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


@given(st.integers(0, 10**6))
def test_color_loss_grad_fd(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 3, 4, 3))
    g = color_loss_grad(a, b)
    h = 1e-6
    i = tuple(rng.integers(0, s) for s in a.shape)
    ap, am = a.copy(), a.copy()
    ap[i] += h
    am[i] -= h
    assert abs(g[i] - (color_loss(ap, b) - color_loss(am, b)) / (2 * h)) < 1e-7
    assert color_loss(a, b) >= 0


# -- normal


def test_normal_loss_examples():
    rng = np.random.default_rng(0)
    n = rng.normal(size=(4, 4, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    mask = rng.random((4, 4)) > 0.3
    assert normal_loss(n, n, mask) == 0
    assert normal_loss(n, -n, mask) == pytest.approx(4.0, rel=1e-12)
    a = np.zeros((2, 2, 3))
    b = np.zeros((2, 2, 3))
    a[1, 0] = [0, 0, 1]
    b[1, 0] = [0, 1, 0]
    m = np.zeros((2, 2), bool)
    m[1, 0] = True
    assert normal_loss(a, b, m) == pytest.approx(2.0)


def test_normal_loss_empty_mask():
    assert normal_loss(np.ones((3, 3, 3)), np.zeros((3, 3, 3)), np.zeros((3, 3), bool)) == 0.0


def test_normal_loss_shape_mismatch():
    with pytest.raises(ValueError):
        normal_loss(np.ones((3, 3, 3)), np.zeros((3, 2, 3)), np.ones((3, 3), bool))
    with pytest.raises(ValueError):
        normal_loss(np.ones((3, 3, 3)), np.zeros((3, 3, 3)), np.ones((2, 3), bool))


@given(st.integers(0, 10**6))
def test_normal_loss_grad_both_sides(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 5, 5, 3))
    mask = rng.random((5, 5)) > 0.5
    ga, gb = normal_loss_grad(a, b, mask)
    h = 1e-6
    for arr, g, first in ((a, ga, True), (b, gb, False)):
        i = tuple(rng.integers(0, s) for s in arr.shape)
        p, m = arr.copy(), arr.copy()
        p[i] += h
        m[i] -= h
        f = (lambda x: normal_loss(x, b, mask)) if first else (lambda x: normal_loss(a, x, mask))
        assert abs(g[i] - (f(p) - f(m)) / (2 * h)) < 1e-7
    assert normal_loss(a, b, mask) >= 0


# -- sparsity


def test_sparse_loss_examples():
    assert sparse_loss([0.5]) == pytest.approx(-2 * math.log(2), abs=1e-12)
    assert sparse_loss([0.5, 0.5]) == sparse_loss([0.5])
    assert sparse_loss([1 - 1e-6]) == pytest.approx(math.log(1 - 1e-6) + math.log(1e-6), abs=1e-9)
    assert abs(sparse_loss([1 - 1e-6]) - (-13.8155)) < 1e-4
    # values beyond the clamp behave as the clamp
    assert sparse_loss([1.0]) == sparse_loss([1 - 1e-6])
    assert sparse_loss([0.0]) == sparse_loss([1e-6])


def test_sparse_loss_empty_warns():
    before = losses.warnings["sparse_loss_empty"]
    assert sparse_loss([]) == 0.0
    assert losses.warnings["sparse_loss_empty"] == before + 1


@given(arrays(np.float64, st.integers(1, 20), elements=probs))
def test_sparse_loss_symmetric_and_bounded(a):
    # 1 - a rounds by ~1e-16, amplified by d log / da <= 1/eps = 1e6 near the clamp
    assert abs(sparse_loss(a) - sparse_loss(1 - a)) < 1e-9
    assert sparse_loss(a) <= -2 * math.log(2) + 1e-15


@given(st.floats(0.5, 1 - 1e-6), st.floats(0.0, 0.4))
def test_sparse_loss_decreasing_away_from_half(a, step):
    b = min(a + step, 1 - 1e-6)
    assert sparse_loss([b]) <= sparse_loss([a])
    assert sparse_loss([1 - b]) <= sparse_loss([1 - a])


def test_sparse_loss_strict_maximum():
    for a in (0.49, 0.51, 0.1, 0.9):
        assert sparse_loss([a]) < sparse_loss([0.5])


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10)))
def test_sparse_grad_fd(x):
    g = sparse_loss_grad_logits(x)
    h = 1e-6
    for i in range(len(x)):
        p, m = x.copy(), x.copy()
        p[i] += h
        m[i] -= h
        sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
        num = (sparse_loss(sig(p)) - sparse_loss(sig(m))) / (2 * h)
        assert abs(g[i] - num) < 1e-6


# -- residual regulariser


def test_reg_loss_examples():
    assert reg_loss(np.zeros((4, 3))) == 0
    assert reg_loss([[1.0, 0, 0]]) == 1
    assert reg_loss([[0.1, 0, 0], [0, 0.2, 0]]) == pytest.approx(0.025, rel=1e-12)


@given(arrays(np.float64, (5, 3), elements=st.floats(-2, 2).filter(lambda x: x == 0 or abs(x) > 1e-150)))
def test_reg_loss_nonnegative_zero_iff_zero(r):
    v = reg_loss(r)
    assert v >= 0
    assert (v == 0) == (not r.any())
    g = reg_loss_grad(r)
    h = 1e-6
    p, m = r.copy(), r.copy()
    p[2, 1] += h
    m[2, 1] -= h
    assert abs(g[2, 1] - (reg_loss(p) - reg_loss(m)) / (2 * h)) < 1e-7


# -- total


def test_total_loss_examples():
    assert total_loss(1, 0, 0, 0).total == 1
    assert total_loss(0, 0, 0, 0).total == 0
    rep = total_loss(0.5, 2.0, -1.3863, 0.1)
    assert rep.total == pytest.approx(0.5187137, abs=1e-12)
    assert (LAMBDA_NORMAL, LAMBDA_SPARSE, LAMBDA_REG) == (0.01, 0.001, 0.001)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(-30, 0), st.floats(0, 10))
def test_total_is_weighted_sum(c, n, s, r):
    rep = total_loss(c, n, s, r)
    assert rep.total == c + 0.01 * n + 0.001 * s + 0.001 * r
    assert set(rep.as_dict()) == {"color", "normal", "sparse", "reg", "total"}


# -- full objective through the renderer


@pytest.mark.parametrize("name", PARAM_FIELDS + ("envlight",))
def test_objective_gradient_per_class(name):
    rng = np.random.default_rng(11)
    scene = random_scene(rng, n=10)
    cam = front_camera(16)
    gt = rng.random((16, 16, 3))
    w = dict(lambda_normal=1.0, lambda_sparse=1.0, lambda_reg=1.0)
    size = scene.envlight.base.size if name == "envlight" else getattr(scene, name).size
    idx = rng.choice(size, min(size, 24), replace=False)
    ana, num = fd_param_check(scene, cam, gt, name, idx, **w)
    assert rel_err(ana, num) < 1e-4, (name, rel_err(ana, num))


def test_loss_and_grad_report_matches_components():
    rng = np.random.default_rng(2)
    scene = random_scene(rng, n=8)
    scene.envlight.refresh()
    cam = front_camera(16)
    gt = rng.random((16, 16, 3))
    rep, _, out = loss_and_grad(scene, cam, gt)
    assert rep.color == color_loss(out.color, gt)
    assert rep.sparse == sparse_loss(scene.opacities)
    assert rep.reg == reg_loss(np.concatenate([scene.dn_out, scene.dn_in]))
    assert rep.total == pytest.approx(rep.color + 0.01 * rep.normal + 0.001 * rep.sparse + 0.001 * rep.reg,
                                      abs=1e-15)


def test_normal_term_off_leaves_no_normal_gradient():
    rng = np.random.default_rng(3)
    scene = random_scene(rng, n=8, tint=False, residual_active=False)
    scene.envlight.refresh()
    cam = front_camera(16)
    _, g, _ = loss_and_grad(scene, cam, rng.random((16, 16, 3)), lambda_normal=0.0, lambda_reg=0.0)
    # with no tint and no normal term the residuals cannot affect the objective
    assert not g.dn_out.any() and not g.dn_in.any()


def test_sparse_gradient_reaches_invisible_gaussians():
    rng = np.random.default_rng(4)
    scene = random_scene(rng, n=5)
    scene.positions[0] = [0, 0, -20.0]
    scene.opacity_logits[0] = logit(0.3)
    scene.envlight.refresh()
    _, g, _ = loss_and_grad(scene, front_camera(16), rng.random((16, 16, 3)))
    assert g.opacity_logits[0] == pytest.approx(0.001 * (1 - 2 * 0.3) / 5, rel=1e-9)
