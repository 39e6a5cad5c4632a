"""Optimisation loop: per-group Adam, residual-colour schedule, densify/prune."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .losses import LAMBDA_NORMAL, LAMBDA_REG, LAMBDA_SPARSE, loss_and_grad, scene_losses
from .metrics import psnr
from .rasterizer import GradientBuffer, render
from .scene import PARAM_FIELDS, SplatScene, quat_to_rotmat, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_LR = {
    "positions": 1.6e-4,
    "log_scales": 5e-3,
    "rotations": 1e-3,
    "opacity_logits": 0.05,
    "diffuse": 2.5e-3,
    "tint": 2.5e-3,
    "roughness_raw": 2.5e-3,
    "residual_sh": 2.5e-4,
    "dn_out": 1e-3,
    "dn_in": 1e-3,
    "envlight": 1e-2,
}


@dataclass
class TrainConfig:
    """Training hyper-parameters; every field can be set from a JSON file."""

    iterations: int = 30_000
    residual_activation_iter: int | None = 15_000   # None: never activate
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15_000
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 5000
    lambda_normal: float = LAMBDA_NORMAL
    lambda_sparse: float = LAMBDA_SPARSE
    lambda_reg: float = LAMBDA_REG
    seed: int = 0
    deterministic: bool = False
    eval_interval: int = 1000
    checkpoint_interval: int = 0
    log_interval: int = 100
    # initialisation when no point cloud accompanies the data
    init_count: int = 2000
    init_bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    env_init: float = 0.3
    env_resolution: int = 64
    init_opacity: float = 0.1
    init_tint: float = 0.5
    init_roughness: float = 0.5

    def __post_init__(self):
        lr = dict(DEFAULT_LR)
        lr.update(self.lr or {})
        unknown = set(lr) - set(DEFAULT_LR)
        if unknown:
            raise ValueError(f"unknown learning-rate groups: {sorted(unknown)}")
        self.lr = lr
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        r = self.residual_activation_iter
        if r is not None and not 0 <= r <= max(self.iterations, 0):
            raise ValueError(f"residual_activation_iter={r} must lie in [0, iterations={self.iterations}]")
        if not 0.0 < self.init_opacity < 1.0 or not 0.0 < self.init_roughness < 1.0:
            raise ValueError("init_opacity and init_roughness must lie in (0, 1)")
        if not 0.0 <= self.init_tint <= 1.0:
            raise ValueError("init_tint must lie in [0, 1]")
        if any(v < 0 for v in self.lr.values()):
            raise ValueError("learning rates must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, x) -> "AdamState":
        return cls(np.zeros_like(x), np.zeros_like(x), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update, applied in place; returns ``param``."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ValueError(f"adam_step: shapes differ (param {param.shape}, grad {grad.shape}, state {state.m.shape})")
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class Optimizer:
    """Adam over every parameter group of a scene, index-aligned with its Gaussians."""

    def __init__(self, scene: SplatScene, config: TrainConfig):
        self.config = config
        self.state = {k: AdamState.zeros_like(v) for k, v in scene.params().items()}
        self.state["envlight"] = AdamState.zeros_like(scene.envlight.base)

    def step(self, scene: SplatScene, grads: GradientBuffer, skip=()):
        c = self.config
        for name in PARAM_FIELDS:
            if name in skip:
                continue
            adam_step(getattr(scene, name), getattr(grads, name), self.state[name], c.lr[name], c.beta1, c.beta2, c.eps)
        adam_step(scene.envlight.base, grads.envlight, self.state["envlight"], c.lr["envlight"], c.beta1, c.beta2, c.eps)
        scene.normalize_rotations()
        scene.clamp_colors()
        scene.envlight.clamp()

    def remap(self, source: np.ndarray, fresh: np.ndarray):
        """Re-index per-Gaussian state: row i copies old row ``source[i]``, zeroed where ``fresh``."""
        for name in PARAM_FIELDS:
            st = self.state[name]
            st.m = st.m[source].copy()
            st.v = st.v[source].copy()
            st.m[fresh] = 0.0
            st.v[fresh] = 0.0


# ---------------------------------------------------------------------------
# density control


@dataclass
class GradStats:
    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n) -> "GradStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def add(self, grad_mean2d: np.ndarray, visible: np.ndarray, width: int, height: int):
        # pixel-space gradient rescaled to normalised device coordinates
        g = grad_mean2d * np.array([0.5 * width, 0.5 * height])
        self.accum[visible] += np.linalg.norm(g[visible], axis=1)
        self.count[visible] += 1

    def average(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def scene_extent(scene: SplatScene, cameras=None) -> float:
    if cameras:
        centers = np.array([c.center for c in cameras])
        return float(1.1 * np.max(np.linalg.norm(centers - centers.mean(0), axis=1)))
    if len(scene) == 0:
        return 1.0
    return float(np.max(np.linalg.norm(scene.positions - scene.positions.mean(0), axis=1)) or 1.0)


def densify_and_prune(scene: SplatScene, stats: GradStats, config: TrainConfig, extent: float,
                      rng: np.random.Generator, optimizer: Optimizer | None = None):
    """Clone/split high-gradient Gaussians and drop nearly transparent ones.

    Returns ``(scene, report)``; the scene is a new object unless nothing changed.
    """
    n = len(scene)
    avg = stats.average()
    high = avg >= config.densify_grad_threshold
    big = scene.scales.max(axis=1) > config.percent_dense * extent
    clone = np.flatnonzero(high & ~big)
    split = np.flatnonzero(high & big)

    budget = max(config.max_gaussians - n, 0)
    # clones add one Gaussian each, splits add one net
    if len(clone) + len(split) > budget:
        cand = np.concatenate([clone, split])
        keep = cand[np.argsort(-avg[cand], kind="stable")[:budget]]
        clone = np.sort(keep[np.isin(keep, clone)])
        split = np.sort(keep[np.isin(keep, split)])

    prune = scene.opacities < config.prune_opacity
    report = DensifyReport(len(clone), len(split))
    if not len(clone) and not len(split) and not prune.any():
        return scene, report

    p = {k: v.copy() for k, v in scene.params().items()}
    source = [np.arange(n)]
    fresh = [np.zeros(n, dtype=bool)]
    extra = {k: [] for k in p}

    if len(clone):
        for k in p:
            extra[k].append(p[k][clone])
        source.append(clone)
        fresh.append(np.zeros(len(clone), dtype=bool))

    if len(split):
        R = quat_to_rotmat(scene.rotations[split])
        s = scene.scales[split]
        offspring_pos = []
        for _ in range(2):
            local = rng.normal(size=(len(split), 3)) * s
            offspring_pos.append(scene.positions[split] + np.einsum("nij,nj->ni", R, local))
        new_log_s = np.log(s / 1.6)
        # first offspring overwrites the parent, the second is appended
        p["positions"][split] = offspring_pos[0]
        p["log_scales"][split] = new_log_s
        for k in p:
            extra[k].append(p[k][split])
        extra["positions"][-1] = offspring_pos[1]
        source.append(split)
        fresh[0][split] = True
        fresh.append(np.ones(len(split), dtype=bool))

    for k in p:
        if extra[k]:
            p[k] = np.concatenate([p[k]] + extra[k])
    source = np.concatenate(source)
    fresh = np.concatenate(fresh)

    alive = ~np.concatenate([prune, np.zeros(len(source) - n, dtype=bool)])
    if len(split):
        # split offspring are new Gaussians, judged by their own opacity like everyone else
        alive[n + len(clone):] = 1.0 / (1.0 + np.exp(-p["opacity_logits"][n + len(clone):])) >= config.prune_opacity
    report.pruned = int((~alive).sum())
    p = {k: v[alive] for k, v in p.items()}
    if optimizer is not None:
        optimizer.remap(source[alive], fresh[alive])
    return SplatScene(p, scene.envlight, scene.residual_active), report


# ---------------------------------------------------------------------------
# training loop


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    scene: SplatScene
    history: list
    init_flatness: float
    final_flatness: float


def flatness(scene: SplatScene) -> float:
    """Median ratio of longest to shortest scale."""
    if len(scene) == 0:
        return float("nan")
    s = scene.scales
    return float(np.median(s.max(axis=1) / s.min(axis=1)))


def evaluate(scene: SplatScene, views, with_normal: bool = False) -> dict:
    scene.envlight.refresh()
    vals, nvals = [], []
    for cam, img in views:
        out = render(scene, cam)
        vals.append(psnr(out.color, img))
        if with_normal:
            rep, _ = scene_losses(scene, cam, out, img, with_grad=False)
            nvals.append(rep.normal)
    res = {"psnr": float(np.mean(vals)) if vals else float("nan"), "psnr_views": vals}
    if with_normal:
        res["normal"] = float(np.mean(nvals))
    return res


def train(train_views, config: TrainConfig, scene: SplatScene, test_views=(), out_dir=None,
          callback=None) -> TrainResult:
    """Fit ``scene`` to ``train_views`` (a sequence of ``(Camera, image)``) in place-ish.

    The returned scene may be a different object after densification.
    """
    if not train_views:
        raise ValueError("train() needs at least one training view")
    rng = np.random.default_rng(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")

    opt = Optimizer(scene, config)
    stats = GradStats.zeros(len(scene))
    extent = scene_extent(scene, [c for c, _ in train_views])
    history = []
    init_flat = flatness(scene)
    weights = dict(lambda_normal=config.lambda_normal, lambda_sparse=config.lambda_sparse,
                   lambda_reg=config.lambda_reg)
    act = config.residual_activation_iter
    t0 = time.perf_counter()
    try:
        for it in range(1, config.iterations + 1):
            scene.residual_active = act is not None and it > act
            cam, img = train_views[int(rng.integers(len(train_views)))]
            scene.envlight.refresh()
            report, grads, out = loss_and_grad(scene, cam, img, **weights)
            if not np.isfinite(report.total):
                if out_dir is not None:
                    save_checkpoint(scene, out_dir / "abort_state.ply")
                raise NonFiniteLossError(f"non-finite loss at iteration {it}: {report}")
            skip = () if scene.residual_active else ("residual_sh",)
            opt.step(scene, grads, skip=skip)

            if config.densify_interval and it <= config.densify_until:
                visible = np.zeros(len(scene), dtype=bool)
                proj = out.ctx.get("proj")
                if proj is not None:
                    visible[proj.index] = True
                stats.add(grads.mean2d, visible, cam.width, cam.height)
                if it >= config.densify_from and it % config.densify_interval == 0:
                    scene, dr = densify_and_prune(scene, stats, config, extent, rng, opt)
                    stats = GradStats.zeros(len(scene))
                    if dr.cloned or dr.split or dr.pruned:
                        log.info("it %d: cloned %d split %d pruned %d -> %d", it, dr.cloned, dr.split,
                                 dr.pruned, len(scene))

            record = None
            if it % max(config.log_interval, 1) == 0 or it == config.iterations:
                record = {"iteration": it, **report.as_dict(), "gaussians": len(scene),
                          "elapsed": round(time.perf_counter() - t0, 3)}
            if test_views and config.eval_interval and (it % config.eval_interval == 0 or it == config.iterations):
                record = record or {"iteration": it, **report.as_dict(), "gaussians": len(scene)}
                record["test_psnr"] = evaluate(scene, test_views)["psnr"]
            if record is not None:
                history.append(record)
                if metrics_fh:
                    metrics_fh.write(json.dumps(record) + "\n")
                    metrics_fh.flush()
            if out_dir is not None and config.checkpoint_interval and it % config.checkpoint_interval == 0:
                save_checkpoint(scene, out_dir / f"checkpoint_{it:06d}.ply")
            if callback is not None:
                callback(it, scene, report)
    finally:
        if metrics_fh:
            metrics_fh.close()
    scene.envlight.refresh()
    if out_dir is not None:
        save_checkpoint(scene, out_dir / "checkpoint_final.ply")
    return TrainResult(scene, history, init_flat, flatness(scene))


__all__ = ["TrainConfig", "AdamState", "adam_step", "Optimizer", "GradStats", "densify_and_prune",
           "train", "TrainResult", "evaluate", "flatness", "NonFiniteLossError"]
