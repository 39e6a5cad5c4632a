"""Command-line entry point: ``splatshade {train,render,relight,eval,export-env,make-toy}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data
from .envlight import EnvLight
from .metrics import psnr, ssim
from .rasterizer import render
from .scene import init_scene, load_checkpoint, save_checkpoint

log = logging.getLogger("splatshade")


class CLIError(Exception):
    pass


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.3f}"


def _save_render(out_dir: Path, stem: str, out) -> None:
    data.save_image(out_dir / f"{stem}_color.png", out.color)
    data.save_normal_image(out_dir / f"{stem}_normal.png", out.normal)
    data.save_depth(out_dir / f"{stem}_depth.pfm", out.depth)


def _eval_rows(scene, dataset):
    """Scores the 8-bit image ``render`` would write, not the float render."""
    scene.envlight.refresh()
    rows = []
    for i, v in enumerate(dataset.views):
        img = data.to_uint8(render(scene, v.camera).color) / 255.0
        rows.append((i, psnr(img, v.image), ssim(img, v.image)))
    return rows


def _print_table(rows, fh=None):
    fh = fh or sys.stdout
    print("view   psnr     ssim", file=fh)
    for i, p, s in rows:
        print(f"{i:4d}  {_fmt(p):>7s}  {s:.4f}", file=fh)
    if rows:
        ps = np.array([r[1] for r in rows])
        print(f"mean  {_fmt(float(np.mean(ps)))   :>7s}  {np.mean([r[2] for r in rows]):.4f}", file=fh)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
        if cfg.residual_activation_iter is not None:
            cfg.residual_activation_iter = min(cfg.residual_activation_iter, cfg.iterations)
    if args.deterministic:
        cfg.deterministic = True
    bg = (1.0, 1.0, 1.0) if args.white_background else (0.0, 0.0, 0.0)
    train_set, test_set = data.load_nerf_synthetic(args.data, background=bg, downscale=args.downscale)

    env = EnvLight.constant(cfg.env_init, resolution=cfg.env_resolution)
    init = dict(seed=cfg.seed, envlight=env, opacity=cfg.init_opacity, tint=cfg.init_tint,
                roughness=cfg.init_roughness)
    pts_file = Path(args.data) / "points3d.ply"
    if pts_file.exists():
        pts, colors, scales = data.load_points(pts_file)
        scene = init_scene(pts, colors, scales=scales, **init)
    else:
        lo, hi = cfg.init_bounds
        scene = init_scene(count=cfg.init_count, bounds=(lo, hi), **init)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    res = train(train_set.pairs(), cfg, scene, test_set.pairs(), out_dir=out)
    rows = _eval_rows(res.scene, test_set if len(test_set) else train_set)
    with open(out / "eval.txt", "w") as fh:
        _print_table(rows, fh)
    _print_table(rows)
    return 0


def cmd_render(args) -> int:
    scene = load_checkpoint(args.ckpt)
    scene.envlight.refresh()
    ds = data.load_split(args.data, args.split)
    out = Path(args.out)
    for i, v in enumerate(ds.views):
        _save_render(out, f"r_{i}", render(scene, v.camera))
    print(f"rendered {len(ds)} views to {out}")
    return 0


def _orbit(scene, count=8, size=128):
    from .toy import orbit_cameras
    center = scene.positions.mean(0)
    radius = float(np.max(np.linalg.norm(scene.positions - center, axis=1)))
    return orbit_cameras(count, 3.0 * max(radius, 1e-3), size, target=center, seed=0)


def cmd_relight(args) -> int:
    scene = load_checkpoint(args.ckpt)
    env = EnvLight.load_faces(args.env, roughness_levels=scene.envlight.roughness_levels)
    if env.resolution != scene.envlight.resolution:
        raise CLIError(f"environment resolution {env.resolution} does not match the checkpoint's "
                       f"{scene.envlight.resolution}")
    scene.envlight.set_base(env.base)
    scene.envlight.refresh()
    cams = data.load_split(args.data, args.split).pairs() if args.data else [(c, None) for c in _orbit(scene)]
    out = Path(args.out)
    for i, (cam, _) in enumerate(cams):
        _save_render(out, f"r_{i}", render(scene, cam))
    print(f"relit {len(cams)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    scene = load_checkpoint(args.ckpt)
    ds = data.load_split(args.data, args.split, downscale=args.downscale)
    _print_table(_eval_rows(scene, ds))
    return 0


def cmd_export_env(args) -> int:
    scene = load_checkpoint(args.ckpt)
    scene.envlight.save_faces(args.out)
    print(f"wrote cube-map faces to {args.out}")
    return 0


def cmd_make_toy(args) -> int:
    from . import toy

    out = Path(args.out)
    if args.kind == "single":
        td = toy.single_gaussian_dataset()
    elif args.kind == "plate":
        td = toy.plate_dataset()
    else:
        td = toy.spheres_dataset()
    data.save_split(out, td.train)
    data.save_split(out, td.test)
    data.save_points(out / "points3d.ply", td.init_points, scales=td.init_scales)
    if td.config:
        (out / "config.json").write_text(json.dumps(td.config, indent=2))
    save_checkpoint(td.scene, out / "ground_truth.ply")
    td.scene.envlight.save_faces(out / "env")
    print(f"wrote {args.kind} toy dataset to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatshade", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a scene to posed images")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--deterministic", action="store_true",
                   help="fixed reduction order (the CPU path is always single-threaded)")
    t.add_argument("--white-background", action="store_true")
    t.add_argument("--downscale", type=int, default=1)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render colour, normal and depth for a data split")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--split", default="test")
    r.set_defaults(func=cmd_render)

    rl = sub.add_parser("relight", help="render under a replacement environment map")
    rl.add_argument("--ckpt", required=True)
    rl.add_argument("--env", required=True, help="directory of px/nx/py/ny/pz/nz .pfm faces")
    rl.add_argument("--out", required=True)
    rl.add_argument("--data", help="take cameras from this dataset instead of an orbit")
    rl.add_argument("--split", default="test")
    rl.set_defaults(func=cmd_relight)

    e = sub.add_parser("eval", help="PSNR/SSIM per view and mean")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--downscale", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-env", help="write the learned environment faces")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_env)

    m = sub.add_parser("make-toy", help="write a synthetic dataset")
    m.add_argument("--out", required=True)
    m.add_argument("--kind", choices=("single", "plate", "spheres"), default="spheres")
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a one-line reason
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"splatshade {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
