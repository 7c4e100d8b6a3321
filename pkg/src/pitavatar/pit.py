"""Point-image transformer: tokenizers, the three attention modules and the U-shaped stack."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from . import serial as S
from .layers import Scope, attend, dense, init_mlp, merge_heads, mlp, norm, qkv_heads, split_heads


@dataclass
class PitConfig:
    n_layer: int = 4
    c_point: int = 32
    c: int = 64
    heads: int = 4
    patch: int = 8
    image_size: int = 64
    patch_sizes: tuple = (128, 64, 32, 16)
    n_points: int = 2048
    pool_ratio: float = 2.0
    mlp_ratio: int = 4
    attn_dtype: Optional[str] = None

    def __post_init__(self):
        self.patch_sizes = tuple(self.patch_sizes)
        self.validate()

    def validate(self):
        if self.n_layer not in (4, 6, 8):
            raise ValueError(f"n_layer must be 4, 6 or 8, got {self.n_layer}")
        if self.c % self.heads or self.c_point % self.heads:
            raise ValueError("channel widths must be divisible by the head count")
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if len(self.patch_sizes) < self.n_encoder + 1:
            raise ValueError("need one point patch size per level")

    @property
    def n_encoder(self):
        return self.n_layer // 2

    @property
    def n_decoder(self):
        return self.n_layer - self.n_layer // 2

    @property
    def n_image_tokens(self):
        return (self.image_size // self.patch) ** 2


@dataclass
class ImageTokenBatch:
    tokens: nx.Tensor  # (frames, N_I + 1, C); deformation token in the last slot
    cls: nx.Tensor     # (C,) from frame 0

    @property
    def frames(self):
        return self.tokens.shape[0]

    def deformation_tokens(self):
        return self.tokens[:, -1, :]


# ---------------------------------------------------------------- init

def _init_attn_block(s, dim, ratio):
    s.norm("ln1", dim)
    s.dense("qkv", dim, 3 * dim)
    s.dense("out", dim, dim, zero=True)
    s.norm("ln2", dim)
    init_mlp(s, "mlp", [dim, ratio * dim, dim], zero_last=True)


def _init_joint(s, cfg):
    c, cp = cfg.c, cfg.c_point
    init_mlp(s, "proj", [cp, c, c])
    for stream in ("p", "i"):
        s.dense(f"mod_{stream}", c, 6 * c, zero=True)
        s.dense(f"qkv_{stream}", c, 3 * c)
        s.dense(f"out_{stream}", c, c)
        init_mlp(s, f"mlp_{stream}", [c, cfg.mlp_ratio * c, c])
    init_mlp(s, "uproj", [c, c, cp])


def init_pit(store, cfg, rng):
    """Create every transformer parameter in ``store``."""
    s = Scope(store, "", rng)
    img = s.sub("img")
    p2 = cfg.patch * cfg.patch * 3
    img.dense("embed", p2, cfg.c)
    img.add("pos", rng.normal(scale=0.02, size=(cfg.n_image_tokens, cfg.c)))
    img.add("cls", rng.normal(scale=0.02, size=cfg.c))
    img.add("def", rng.normal(scale=0.02, size=cfg.c))
    img.norm("cls_ln", cfg.c)
    img.dense("cls_q", cfg.c, cfg.c)
    img.dense("cls_kv", cfg.c, 2 * cfg.c)
    img.dense("cls_out", cfg.c, cfg.c)
    init_mlp(s.sub("pt"), "proj", [3, cfg.c_point, cfg.c_point])
    for name in block_names(cfg):
        b = s.sub(name)
        _init_attn_block(b.sub("pa"), cfg.c_point, cfg.mlp_ratio)
        _init_attn_block(b.sub("ia"), cfg.c, cfg.mlp_ratio)
        _init_joint(b.sub("mm"), cfg)
    for i in range(cfg.n_decoder):
        # [parent; skip] -> skip at init, so unpooling starts as the identity
        s.add(f"unpool{i}.w", np.concatenate([np.zeros((cfg.c_point, cfg.c_point)), np.eye(cfg.c_point)]))
        s.add(f"unpool{i}.b", np.zeros(cfg.c_point))


def block_names(cfg):
    return [f"enc{i}" for i in range(cfg.n_encoder)] + [f"dec{i}" for i in range(cfg.n_decoder)]


# ---------------------------------------------------------------- tokenizers

def patchify(images, P):
    images = nx.as_tensor(images)
    F, H, W, ch = images.shape
    if H % P or W % P:
        raise ValueError(f"image {H}x{W} not divisible by patch size {P}")
    x = nx.reshape(images, (F, H // P, P, W // P, P, ch))
    x = nx.transpose(x, (0, 1, 3, 2, 4, 5))
    return nx.reshape(x, (F, (H // P) * (W // P), P * P * ch))


def tokenize_images(images, scope, cfg):
    s = scope.sub("img")
    patches = dense(s, "embed", patchify(images, cfg.patch)) + s["pos"]
    F = patches.shape[0]
    # class token attends over frame 0's patches; patch tokens stay untouched
    first = norm(s, "cls_ln", patches[0])
    q = dense(s, "cls_q", norm(s, "cls_ln", nx.reshape(s["cls"], (1, -1))))
    kv = dense(s, "cls_kv", first)
    C = cfg.c
    qh = split_heads(q, cfg.heads)
    kh = split_heads(kv[:, :C], cfg.heads)
    vh = split_heads(kv[:, C:], cfg.heads)
    pooled = merge_heads(attend(qh, kh, vh))
    cls = s["cls"] + nx.reshape(dense(s, "cls_out", pooled), (C,))
    deform = nx.reshape(s["def"], (1, 1, C)) * np.ones((F, 1, 1))
    return ImageTokenBatch(nx.concat([patches, deform], axis=1), cls)


def normalize_positions(positions):
    positions = np.asarray(positions, float)
    center = positions.mean(axis=0)
    return (positions - center) / (positions - center).std()


def point_tokenize(anchors, scope, pattern="z"):
    pos = anchors.positions if hasattr(anchors, "positions") else np.asarray(anchors)
    feats = mlp(scope.sub("pt"), "proj", nx.Tensor(normalize_positions(pos)), 2)
    return S.TokenGrid3D(pos, feats, S.serialize(pos, pattern))


# ---------------------------------------------------------------- attention modules

def point_attention_block(grid, patch_size, scope, pattern, heads=4, dtype=None):
    """Serialize, attend within patches (pad slots masked), then MLP; both pre-norm residual."""
    order = S.serialize(grid.positions, pattern)
    index, mask = S.patch_partition(order, patch_size)
    x = grid.features
    n_patch, size = index.shape
    h = norm(scope, "ln1", x)
    qkv = nx.take_rows(dense(scope, "qkv", h), index.reshape(-1))
    qkv = nx.reshape(qkv, (n_patch, size, qkv.shape[-1]))
    C = x.shape[1]
    q, k, v = (split_heads(qkv[..., i * C:(i + 1) * C], heads) for i in range(3))
    out = merge_heads(attend(q, k, v, key_mask=mask[:, None, None, :], dtype=dtype))
    flat = nx.reshape(out, (n_patch * size, C))
    valid = np.flatnonzero(mask.reshape(-1))
    back = np.empty(len(order), dtype=np.int64)
    back[index.reshape(-1)[valid]] = valid
    x = x + dense(scope, "out", nx.take_rows(flat, back))
    x = x + mlp(scope, "mlp", norm(scope, "ln2", x), 2)
    return grid.with_features(x, order)


def dense_point_attention(x, scope, heads=4):
    """Reference full attention over all tokens, same parameters as point_attention_block."""
    h = norm(scope, "ln1", x)
    q, k, v = qkv_heads(scope, "qkv", h, heads)
    x = x + dense(scope, "out", merge_heads(attend(q, k, v)))
    return x + mlp(scope, "mlp", norm(scope, "ln2", x), 2)


def image_attention(batch, scope, heads=4, dtype=None):
    """Per-frame pre-norm self-attention + MLP; frames never mix."""
    x = batch.tokens
    q, k, v = qkv_heads(scope, "qkv", norm(scope, "ln1", x), heads)
    x = x + dense(scope, "out", merge_heads(attend(q, k, v, dtype=dtype)))
    x = x + mlp(scope, "mlp", norm(scope, "ln2", x), 2)
    return ImageTokenBatch(x, batch.cls)


def flatten_frames(tokens):
    F, L, C = tokens.shape
    return nx.reshape(tokens, (F * L, C))


def unflatten_frames(flat, frames):
    return nx.reshape(flat, (frames, flat.shape[0] // frames, flat.shape[1]))


def joint_attention(stream_qkv, dtype=None):
    """Attention over the concatenation of several streams' (q, k, v) head tensors.

    Returns each stream's slice of the output, in input order.
    """
    q = nx.concat([s[0] for s in stream_qkv], axis=-2)
    k = nx.concat([s[1] for s in stream_qkv], axis=-2)
    v = nx.concat([s[2] for s in stream_qkv], axis=-2)
    out = attend(q, k, v, dtype=dtype)
    sizes = np.cumsum([0] + [s[0].shape[-2] for s in stream_qkv])
    return [out[..., a:b, :] for a, b in zip(sizes[:-1], sizes[1:])]


def _modulation(scope, stream, cls, c):
    m = dense(scope, f"mod_{stream}", nx.reshape(nx.silu(cls), (1, -1)))
    return [m[:, i * c:(i + 1) * c] for i in range(6)]  # shift1, scale1, gate1, shift2, scale2, gate2


def point_image_attention(grid, batch, cls, scope, heads=4, dtype=None):
    """Dual-stream joint attention over [points; all frames' tokens], conditioned on ``cls``."""
    c = batch.tokens.shape[-1]
    frames = batch.frames
    pts = mlp(scope, "proj", grid.features, 2)
    img = flatten_frames(batch.tokens)
    streams = {"p": pts, "i": img}
    mods = {k: _modulation(scope, k, cls, c) for k in streams}
    qkv = []
    for k, x in streams.items():
        sh, sc = mods[k][0], mods[k][1]
        qkv.append(qkv_heads(scope, f"qkv_{k}", nx.layernorm(x) * (1.0 + sc) + sh, heads))
    outs = joint_attention(qkv, dtype=dtype)
    new = {}
    for (k, x), o in zip(streams.items(), outs):
        _, _, g1, sh2, sc2, g2 = mods[k]
        x = x + g1 * dense(scope, f"out_{k}", merge_heads(o))
        x = x + g2 * mlp(scope, f"mlp_{k}", nx.layernorm(x) * (1.0 + sc2) + sh2, 2)
        new[k] = x
    feats = grid.features + mlp(scope, "uproj", new["p"] - pts, 2)
    return grid.with_features(feats), ImageTokenBatch(unflatten_frames(new["i"], frames), batch.cls)


def pit_block(grid, batch, cls, scope, patch_size, pattern, cfg):
    dt = cfg.attn_dtype
    grid = point_attention_block(grid, patch_size, scope.sub("pa"), pattern, cfg.heads, dt)
    batch = image_attention(batch, scope.sub("ia"), cfg.heads, dt)
    return point_image_attention(grid, batch, cls, scope.sub("mm"), cfg.heads, dt)


# ---------------------------------------------------------------- stack

def plan_cell_sizes(positions, n_pools, ratio=2.0):
    """Calibrated pooling cell size per level for a fixed canonical point set."""
    sizes = []
    grid = S.TokenGrid3D(np.asarray(positions, float), nx.Tensor(np.zeros((len(positions), 1))),
                         np.arange(len(positions)))
    for _ in range(n_pools):
        cell = S.calibrate_cell_size(grid.positions, ratio)
        sizes.append(cell)
        grid = S.grid_pool(grid, cell)
    return sizes


def encoder_decoder_forward(grid, batch, cfg, scope, cell_sizes, rng):
    """U-shaped stack. Returns the full-resolution grid and the final image batch."""
    schedule = S.PatternSchedule(rng)
    cls = batch.cls
    block = 0
    skips = []
    for i in range(cfg.n_encoder):
        grid, batch = pit_block(grid, batch, cls, scope.sub(f"enc{i}"),
                                cfg.patch_sizes[grid.level], schedule(block), cfg)
        block += 1
        skips.append(grid)
        grid = S.grid_pool(grid, cell_sizes[i])
    for i in range(cfg.n_decoder):
        if skips:
            skip = skips.pop()
            grid = S.grid_unpool(grid, skip, scope[f"unpool{i}.w"], scope[f"unpool{i}.b"])
        grid, batch = pit_block(grid, batch, cls, scope.sub(f"dec{i}"),
                                cfg.patch_sizes[grid.level], schedule(block), cfg)
        block += 1
    return grid, batch
