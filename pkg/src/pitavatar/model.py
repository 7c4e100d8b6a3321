"""The full avatar network: image and point tokens -> transformer -> Gaussians -> posed Gaussians."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import body as B
from . import heads as H
from . import numerics as nx
from . import pit
from .layers import Scope
from .losses import knn_pairs

SIZES = {"S": 4, "M": 6, "L": 8}


@dataclass
class ModelConfig:
    size: str = "S"
    n_points: int = 2048
    image_size: int = 64
    patch: int = 8
    c_point: int = 32
    c: int = 64
    heads: int = 4
    head_hidden: int = 64
    init_sigma: float = 0.015
    attn_dtype: str = "float32"
    anchor_seed: int = 0

    def pit_config(self):
        if self.size not in SIZES:
            raise ValueError(f"model size must be one of {sorted(SIZES)}, got {self.size!r}")
        return pit.PitConfig(n_layer=SIZES[self.size], c_point=self.c_point, c=self.c,
                             heads=self.heads, patch=self.patch, image_size=self.image_size,
                             n_points=self.n_points, attn_dtype=self.attn_dtype)


@dataclass
class Forward:
    canonical: H.GaussianSet
    posed: H.GaussianSet
    motion: nx.Tensor
    tdef: nx.Tensor


class AvatarModel:
    def __init__(self, cfg, body, seed=0, anchors=None):
        self.cfg = cfg
        self.pcfg = cfg.pit_config()
        self.body = body
        self.anchors = anchors if anchors is not None else B.sample_anchors(body, cfg.n_points, cfg.anchor_seed)
        self.store = nx.ParamStore()
        rng = np.random.default_rng(seed)
        pit.init_pit(self.store, self.pcfg, rng)
        scope = Scope(self.store, "", rng)
        H.init_regress(scope.sub("head"), cfg.c_point, cfg.head_hidden, cfg.init_sigma)
        H.init_deformation(scope.sub("deform"), cfg.c_point, cfg.c, 3 * body.joint_count + 3, cfg.head_hidden)
        self.scope = Scope(self.store)
        self.cell_sizes = pit.plan_cell_sizes(self.anchors.positions, self.pcfg.n_encoder, self.pcfg.pool_ratio)
        self.pairs = knn_pairs(self.anchors.positions)

    # ------------------------------------------------------------ forward

    def encode(self, images, rng):
        """Images (F, H, W, 3) in [0, 1] -> canonical Gaussians, final point tokens, mean deformation token."""
        images = np.asarray(images, float)
        if images.ndim != 4 or images.shape[0] < 1:
            raise ValueError(f"expected (frames, H, W, 3) images, got {images.shape}")
        batch = pit.tokenize_images(images - 0.5, self.scope, self.pcfg)
        grid = pit.point_tokenize(self.anchors, self.scope)
        grid, batch = pit.encoder_decoder_forward(grid, batch, self.pcfg, self.scope, self.cell_sizes, rng)
        canon = H.regress_gaussians(grid.features, self.anchors, self.scope.sub("head"))
        tdef = batch.deformation_tokens().mean(axis=0)
        return canon, grid.features, tdef

    def pose(self, canon, tokens, tdef, pose):
        theta = pose.vector()
        ctx = H.DeformationContext(tdef, theta)
        motion = H.pose_deformation(tokens, ctx, self.scope.sub("deform"))
        return H.pose_avatar(canon, motion, pose, self.anchors, self.body), motion

    def forward(self, images, pose, rng):
        canon, tokens, tdef = self.encode(images, rng)
        posed, motion = self.pose(canon, tokens, tdef, pose)
        return Forward(canon, posed, motion, tdef)

    # ------------------------------------------------------------ state

    def state_arrays(self, with_optimizer=True):
        out = self.store.state_arrays() if with_optimizer else {
            f"param/{k}": p.data for k, p in self.store.items()}
        out.update(B.body_arrays(self.body, self.anchors))
        out["meta/config"] = encode_json(asdict(self.cfg))
        return out

    def save(self, path, with_optimizer=True):
        nx.save_arrays(path, self.state_arrays(with_optimizer))

    @classmethod
    def from_arrays(cls, arrays):
        cfg = ModelConfig(**decode_json(arrays["meta/config"]))
        body, anchors = B.body_from_arrays(arrays)
        model = cls(cfg, body, anchors=anchors)
        model.store.load_arrays(arrays)
        return model

    @classmethod
    def load(cls, path):
        return cls.from_arrays(nx.load_arrays(path))


def encode_json(obj):
    """JSON text packed into a float64 array (the checkpoint stores only f64)."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).astype(np.float64)


def decode_json(arr):
    return json.loads(np.asarray(arr).astype(np.uint8).tobytes().decode())
