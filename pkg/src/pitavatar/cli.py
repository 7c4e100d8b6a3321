"""Command-line entry point: gen-data, train, infer, animate, eval, export-ply."""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import body as B
from . import heads as H
from .data import DataConfig, DataError, gen_data, load_scene
from .model import AvatarModel
from .numerics import CheckpointError
from .render import Camera, rasterize, read_pnm, write_ppm
from .train import BACKGROUND, NumericalAbort, RunConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = _merge(asdict(DataConfig()), _read_config(args.config))
    for key in ("image_size", "n_train", "n_test"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    scene = gen_data(args.out, args.seed, DataConfig(**cfg))
    print(f"wrote {len(scene.samples)} views to {args.out}")


def run_config_from_args(args):
    d = _merge(RunConfig().to_dict(), _read_config(args.config))
    d["seed"] = args.seed
    flags = {"iterations": args.iterations, "peak_lr": args.lr, "warmup": args.warmup,
             "out_dir": args.out, "checkpoint_every": args.checkpoint_every}
    d.update({k: v for k, v in flags.items() if v is not None})
    if args.frames is not None:
        d["frames"] = args.frames
    if args.size is not None:
        d["model"]["size"] = args.size
    if args.points is not None:
        d["model"]["n_points"] = args.points
    if args.lambda_dis is not None:
        d["weights"]["dis"] = args.lambda_dis
    try:
        return RunConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def cmd_train(args):
    cfg = run_config_from_args(args)
    scene = load_scene(args.data)
    if scene.samples[0].rgb.shape[0] != cfg.model.image_size:
        raise UsageError(f"data image size {scene.samples[0].rgb.shape[0]} != model image size {cfg.model.image_size}")
    train(cfg, scene)
    print(f"checkpoint: {Path(cfg.out_dir) / 'model.ckpt'}")


def _load_images(paths):
    if not paths:
        raise UsageError("at least one input image is required")
    try:
        imgs = [read_pnm(p) for p in paths]
    except (OSError, ValueError) as e:
        raise DataError(str(e)) from e
    if any(i.ndim != 3 for i in imgs):
        raise DataError("input images must be RGB (P6)")
    return np.stack(imgs)


def _input_images(args, model):
    if args.images:
        return _load_images(args.images)
    if args.data:
        train_views = load_scene(args.data).split("train")
        idx = args.inputs or [0]
        try:
            return np.stack([train_views[i].rgb for i in idx])
        except IndexError as e:
            raise UsageError(f"input view index out of range (have {len(train_views)})") from e
    raise UsageError("give --images or --data")


def cmd_infer(args):
    model = AvatarModel.load(args.checkpoint)
    images = _input_images(args, model)
    t = time.perf_counter()
    canon, _, _ = model.encode(images, np.random.default_rng(args.seed))
    dt = time.perf_counter() - t
    H.write_ply(args.out, canon, binary=not args.ascii)
    print(f"{len(canon)} gaussians from {len(images)} image(s) in {dt:.3f} s -> {args.out}")


def cmd_export_ply(args):
    model = AvatarModel.load(args.checkpoint)
    images = _input_images(args, model)
    canon, tokens, tdef = model.encode(images, np.random.default_rng(args.seed))
    g = canon
    if args.pose:
        poses = _read_poses(args.pose, model.body.joint_count)
        g, _ = model.pose(canon, tokens, tdef, poses[0])
    H.write_ply(args.out, g, binary=not args.ascii)
    print(f"wrote {args.out}")


def _read_poses(path, J):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read poses {path}: {e}") from e
    seq = raw["poses"] if isinstance(raw, dict) else raw
    try:
        return [B.PoseParams.from_vector(v, J) for v in seq]
    except ValueError as e:
        raise UsageError(str(e)) from e


def _camera(args, model):
    if args.camera:
        try:
            return Camera.from_dict(json.loads(Path(args.camera).read_text()))
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read camera {args.camera}: {e}") from e
    s = model.cfg.image_size
    return Camera.look_at([0, 0.9, 3.0], [0, 0.9, 0], s, s, 91.0 * s / 64)


def animate(model, images, poses, cam, seed=0):
    """Render one frame per pose from a single canonical reconstruction."""
    canon, tokens, tdef = model.encode(images, np.random.default_rng(seed))
    frames = []
    for pose in poses:
        posed, _ = model.pose(canon, tokens, tdef, pose)
        frames.append(rasterize(posed, cam, background=BACKGROUND).rgb.data)
    return frames


def cmd_animate(args):
    model = AvatarModel.load(args.checkpoint)
    images = _input_images(args, model)
    poses = _read_poses(args.poses, model.body.joint_count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(animate(model, images, poses, _camera(args, model), args.seed)):
        write_ppm(out / f"frame_{i:04d}.ppm", frame)
    print(f"wrote {len(poses)} frames to {out}")


def cmd_eval(args):
    model = AvatarModel.load(args.checkpoint)
    scene = load_scene(args.data)
    rows = evaluate(model, scene, args.split, args.inputs or [0], args.seed)
    for r in rows:
        print(f"{r['view']}  psnr {r['psnr']:.3f}  ssim {r['ssim']:.4f}")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim")}
    print(f"mean  psnr {mean['psnr']:.3f}  ssim {mean['ssim']:.4f}")
    if args.json:
        Path(args.json).write_text(json.dumps({"views": rows, "mean": mean}, indent=1))


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="pitavatar", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic multi-view scene")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--config")
    g.add_argument("--image-size", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated scene")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--config")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--frames", type=int, nargs=2, metavar=("MIN", "MAX"))
    t.add_argument("--size", choices=["S", "M", "L"])
    t.add_argument("--points", type=int)
    t.add_argument("--lambda-dis", type=float)
    t.set_defaults(func=cmd_train)

    def inputs(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--images", nargs="*", help="input PPM images")
        sp.add_argument("--data", help="scene directory (alternative to --images)")
        sp.add_argument("--inputs", type=int, nargs="*", help="training-view indices from --data")
        sp.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("infer", help="reconstruct a canonical avatar and write PLY")
    inputs(i)
    i.add_argument("--out", required=True)
    i.add_argument("--ascii", action="store_true")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("animate", help="render the avatar under a pose sequence")
    inputs(a)
    a.add_argument("--poses", required=True, help="JSON list of pose vectors")
    a.add_argument("--camera", help="JSON camera (defaults to a frontal view)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_animate)

    e = sub.add_parser("eval", help="PSNR/SSIM over a view split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--inputs", type=int, nargs="*")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-ply", help="write canonical (or posed) Gaussians as PLY")
    inputs(x)
    x.add_argument("--pose", help="JSON pose list; the first pose is applied")
    x.add_argument("--out", required=True)
    x.add_argument("--ascii", action="store_true")
    x.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalAbort, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
