"""Synthetic multi-view dataset of a textured proxy body, and its loader."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import body as B
from . import numerics as nx
from .heads import GaussianSet
from .render import SH_C0, Camera, rasterize, read_pnm, write_pgm, write_ppm


@dataclass
class DataConfig:
    joint_count: int = 16
    image_size: int = 64
    n_train: int = 8
    n_test: int = 4
    distance: float = 3.0
    focal: float = 91.0   # at 64 px; scaled with image_size
    target_height: float = 0.9
    n_splats: int = 20000
    splat_sigma: float = 0.01
    splat_opacity: float = 0.95
    pose_scale: float = 0.15


@dataclass
class Sample:
    name: str
    rgb: np.ndarray   # (H, W, 3)
    mask: np.ndarray  # (H, W) binary
    cam: Camera
    pose: B.PoseParams
    split: str


@dataclass
class Scene:
    root: Path
    body: B.ProxyBody
    samples: list
    meta: dict

    def split(self, name):
        return [s for s in self.samples if s.split == name]


def body_texture(body, points, seed):
    """Per-bone palette blended by skin weights, with a low-frequency stripe modulation."""
    rng = np.random.default_rng(seed + 7919)
    palette = rng.uniform(0.15, 0.9, size=(body.joint_count, 3))
    w = B.diffuse_skinning(body, points)
    base = w @ palette
    freq = rng.uniform(4.0, 9.0, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    mod = 0.8 + 0.2 * np.sin(points * freq + phase).mean(axis=1, keepdims=True)
    return np.clip(base * mod, 0.0, 1.0)


def orbit_cameras(cfg, azimuths):
    f = cfg.focal * cfg.image_size / 64.0
    target = np.array([0.0, cfg.target_height, 0.0])
    cams = []
    for az in azimuths:
        eye = target + cfg.distance * np.array([np.sin(az), 0.0, np.cos(az)])
        cams.append(Camera.look_at(eye, target, cfg.image_size, cfg.image_size, f))
    return cams


def random_pose(rng, joint_count, scale):
    theta = rng.normal(scale=scale, size=(joint_count, 3))
    theta[0] = 0.0  # keep the root facing forward
    return B.PoseParams(theta, np.zeros(3))


def dense_splats(body, cfg, seed):
    anchors = B.sample_anchors(body, cfg.n_splats, seed=seed + 1)
    rgb = body_texture(body, anchors.positions, seed)
    return anchors, (rgb - 0.5) / SH_C0


def render_ground_truth(body, anchors, colors, pose, cam, cfg):
    G = B.bone_transforms(pose, body)
    n = len(anchors)
    centers = B.lbs_apply(anchors.positions, anchors.weights, G)
    rot = B.rotate_gaussian_frames(np.tile([1.0, 0, 0, 0], (n, 1)), anchors.weights, pose, body, G)
    g = GaussianSet(centers, rot, nx.Tensor(np.full((n, 3), cfg.splat_sigma)),
                    nx.Tensor(np.full(n, cfg.splat_opacity)), nx.Tensor(colors))
    out = rasterize(g, cam, background=(1.0, 1.0, 1.0))
    return out.rgb.data, (out.alpha.data > 0.5).astype(np.float64)


def gen_data(out_dir, seed, cfg=None):
    """Render a deterministic scene (train orbit + offset held-out orbit) into ``out_dir``."""
    cfg = cfg or DataConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = B.build_proxy_body(cfg.joint_count, seed)
    anchors, colors = dense_splats(body, cfg, seed)
    rng = np.random.default_rng(seed)
    views = []
    train_az = 2 * np.pi * np.arange(cfg.n_train) / cfg.n_train
    test_az = 2 * np.pi * (np.arange(cfg.n_test) + 0.5) / max(cfg.n_test, 1)
    specs = [("train", a) for a in train_az] + [("test", a) for a in test_az]
    cams = orbit_cameras(cfg, [a for _, a in specs])
    for i, ((split, az), cam) in enumerate(zip(specs, cams)):
        pose = random_pose(rng, cfg.joint_count, cfg.pose_scale)
        rgb, mask = render_ground_truth(body, anchors, colors, pose, cam, cfg)
        name = f"view_{i:03d}"
        write_ppm(out / f"{name}.ppm", rgb)
        write_pgm(out / f"{name}_mask.pgm", mask)
        meta = {"split": split, "azimuth": float(az), "pose": pose.vector().tolist(),
                "camera": cam.to_dict(), "rgb": f"{name}.ppm", "mask": f"{name}_mask.pgm"}
        (out / f"{name}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        views.append(name)
    nx.save_arrays(out / "body.ckpt", B.body_arrays(body))
    scene = {"seed": seed, "config": asdict(cfg), "views": views, "body": "body.ckpt"}
    (out / "scene.json").write_text(json.dumps(scene, indent=1, sort_keys=True))
    return load_scene(out)


class DataError(Exception):
    pass


def load_scene(root):
    root = Path(root)
    try:
        meta = json.loads((root / "scene.json").read_text())
        body, _ = B.body_from_arrays(nx.load_arrays(root / meta["body"]))
        samples = []
        for name in meta["views"]:
            m = json.loads((root / f"{name}.json").read_text())
            J = meta["config"]["joint_count"]
            samples.append(Sample(name, read_pnm(root / m["rgb"]), read_pnm(root / m["mask"]),
                                  Camera.from_dict(m["camera"]), B.PoseParams.from_vector(m["pose"], J),
                                  m["split"]))
    except (OSError, KeyError, ValueError, json.JSONDecodeError, nx.CheckpointError) as e:
        raise DataError(f"cannot load scene from {root}: {e}") from e
    return Scene(root, body, samples, meta)
