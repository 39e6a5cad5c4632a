"""Training objectives and their gradients.

Every term is a mean so the default weights do not depend on image size or
Gaussian count.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .rasterizer import RenderOutput, depth_to_normal, depth_to_normal_backward

LAMBDA_NORMAL = 0.01
LAMBDA_SPARSE = 0.001
LAMBDA_REG = 0.001
OPACITY_EPS = 1e-6
NORMAL_MASK_ALPHA = 0.5

warnings: Counter = Counter()


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def color_loss(rendered, gt) -> float:
    rendered, gt = np.asarray(rendered, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _same_shape(rendered, gt, "color_loss")
    return float(np.mean((rendered - gt) ** 2))


def color_loss_grad(rendered, gt) -> np.ndarray:
    rendered, gt = np.asarray(rendered, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _same_shape(rendered, gt, "color_loss")
    return 2.0 * (rendered - gt) / rendered.size


def normal_loss(rendered_normal, depth_normal, mask) -> float:
    """Mean over masked pixels of |n_render - n_depth|^2 (0 for an empty mask)."""
    a, b = np.asarray(rendered_normal, dtype=np.float64), np.asarray(depth_normal, dtype=np.float64)
    _same_shape(a, b, "normal_loss")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:-1]:
        raise ValueError(f"normal_loss: mask shape {mask.shape} does not match {a.shape[:-1]}")
    k = int(mask.sum())
    if k == 0:
        return 0.0
    return float(np.sum((a - b)[mask] ** 2) / k)


def normal_loss_grad(rendered_normal, depth_normal, mask):
    """Gradients w.r.t. (rendered_normal, depth_normal)."""
    a, b = np.asarray(rendered_normal, dtype=np.float64), np.asarray(depth_normal, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    k = int(mask.sum())
    g = np.zeros_like(a)
    if k:
        g[mask] = 2.0 * (a - b)[mask] / k
    return g, -g


def sparse_loss(opacities) -> float:
    """Mean of log(a) + log(1 - a) with a clamped to [eps, 1 - eps]."""
    a = np.asarray(opacities, dtype=np.float64).ravel()
    if a.size == 0:
        warnings["sparse_loss_empty"] += 1
        return 0.0
    a = np.clip(a, OPACITY_EPS, 1.0 - OPACITY_EPS)
    return float(np.mean(np.log(a) + np.log1p(-a)))


def sparse_loss_grad_logits(opacity_logits) -> np.ndarray:
    """Gradient w.r.t. the opacity logits; zero where the clamp is active."""
    x = np.asarray(opacity_logits, dtype=np.float64)
    if x.size == 0:
        return np.zeros_like(x)
    a = 1.0 / (1.0 + np.exp(-x))
    inside = (a > OPACITY_EPS) & (a < 1.0 - OPACITY_EPS)
    # d/dx [log a + log(1-a)] = (1 - a) - a
    return np.where(inside, (1.0 - 2.0 * a) / x.size, 0.0)


def reg_loss(residuals) -> float:
    """Mean squared norm over a stack of residual vectors (..., 3)."""
    r = np.asarray(residuals, dtype=np.float64).reshape(-1, 3)
    if len(r) == 0:
        return 0.0
    return float(np.mean(np.sum(r * r, axis=1)))


def reg_loss_grad(residuals) -> np.ndarray:
    r = np.asarray(residuals, dtype=np.float64)
    n = r.reshape(-1, 3).shape[0]
    return 2.0 * r / max(n, 1)


@dataclass
class LossReport:
    color: float
    normal: float
    sparse: float
    reg: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def total_loss(color, normal, sparse, reg, lambda_normal=LAMBDA_NORMAL, lambda_sparse=LAMBDA_SPARSE,
               lambda_reg=LAMBDA_REG) -> LossReport:
    total = color + lambda_normal * normal + lambda_sparse * sparse + lambda_reg * reg
    return LossReport(float(color), float(normal), float(sparse), float(reg), float(total))


@dataclass
class LossGrads:
    """Derivatives of the weighted total w.r.t. render outputs and directly-penalised parameters."""

    d_color: np.ndarray
    d_normal: np.ndarray
    d_depth: np.ndarray
    opacity_logits: np.ndarray
    dn_out: np.ndarray
    dn_in: np.ndarray


def scene_losses(scene, cam, out: RenderOutput, gt, lambda_normal=LAMBDA_NORMAL, lambda_sparse=LAMBDA_SPARSE,
                 lambda_reg=LAMBDA_REG, with_grad=True):
    """Evaluate the weighted objective on one rendered view.

    The normal term compares the blended normal map against normals derived
    from the rendered depth; both sides receive gradient.
    """
    lc = color_loss(out.color, gt)
    dn = depth_to_normal(out.depth, out.alpha, cam, NORMAL_MASK_ALPHA, return_cache=True)
    mask = dn.valid & np.any(out.normal != 0.0, axis=-1)
    ln = normal_loss(out.normal, dn.normal, mask)
    ls = sparse_loss(scene.opacities)
    residuals = np.concatenate([scene.dn_out, scene.dn_in])
    lr = reg_loss(residuals)
    report = total_loss(lc, ln, ls, lr, lambda_normal, lambda_sparse, lambda_reg)
    if not with_grad:
        return report, None

    g_render, g_depthn = normal_loss_grad(out.normal, dn.normal, mask)
    d_depth = depth_to_normal_backward(dn, lambda_normal * g_depthn) if lambda_normal else np.zeros_like(out.depth)
    g_res = reg_loss_grad(residuals) * lambda_reg
    n = len(scene)
    grads = LossGrads(
        d_color=color_loss_grad(out.color, gt),
        d_normal=lambda_normal * g_render,
        d_depth=d_depth,
        opacity_logits=lambda_sparse * sparse_loss_grad_logits(scene.opacity_logits),
        dn_out=g_res[:n],
        dn_in=g_res[n:],
    )
    return report, grads


def loss_and_grad(scene, cam, gt, **weights):
    """Render, evaluate the objective and backpropagate into a GradientBuffer."""
    from .rasterizer import render, render_backward
    out = render(scene, cam)
    report, lg = scene_losses(scene, cam, out, gt, **weights)
    grads = render_backward(scene, cam, out, lg.d_color, lg.d_normal, lg.d_depth)
    grads.opacity_logits += lg.opacity_logits
    grads.dn_out += lg.dn_out
    grads.dn_in += lg.dn_in
    return report, grads, out
