"""Gaussian regression head, pose-conditioned deformation and posing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import body as B
from . import numerics as nx
from .layers import init_mlp, mlp

OFFSET_BOUND = 0.05
SIGMA_MIN = 1e-4
RAW_CHANNELS = 14  # offset 3, rotation 4, scale 3, opacity 1, color 3
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class GaussianSet:
    centers: nx.Tensor    # (N, 3) m
    rotations: nx.Tensor  # (N, 4) unit (w, x, y, z)
    scales: nx.Tensor     # (N, 3) m, positive
    opacity: nx.Tensor    # (N,) in [0, 1]
    colors: nx.Tensor     # (N, 3) degree-0 SH

    def __len__(self):
        return len(self.centers)

    def detach(self):
        return GaussianSet(*(getattr(self, k).detach() for k in _FIELDS))

    def numpy(self):
        return {k: np.array(getattr(self, k).data) for k in _FIELDS}


_FIELDS = ("centers", "rotations", "scales", "opacity", "colors")


@dataclass
class DeformationContext:
    tdef: nx.Tensor  # (C,) mean fused deformation token
    theta: object    # (3J + 3,) pose vector


def init_regress(scope, c_point, hidden=64, init_sigma=None):
    """Regression MLP; final layer zero so every primitive starts on its anchor.

    ``init_sigma`` sets the scale-channel bias so that the initial scale is
    that value instead of SIGMA_MIN + softplus(0).
    """
    init_mlp(scope, "regress", [c_point, hidden, RAW_CHANNELS], zero_last=True)
    if init_sigma is not None:
        b = scope["regress1.b"]
        b.data[7:10] = np.log(np.expm1(init_sigma - SIGMA_MIN))


def regress_gaussians(tokens, anchors, scope):
    tokens = nx.as_tensor(tokens)
    if len(tokens) != len(anchors):
        raise ValueError(f"{len(tokens)} tokens for {len(anchors)} anchors")
    raw = mlp(scope, "regress", tokens, 2)
    offset = OFFSET_BOUND * nx.tanh(raw[:, 0:3])
    q = raw[:, 3:7] + IDENTITY_QUAT
    q = q / nx.sqrt((q * q).sum(axis=1, keepdims=True))
    scales = SIGMA_MIN + nx.softplus(raw[:, 7:10])
    opacity = nx.sigmoid(raw[:, 10])
    return GaussianSet(offset + anchors.positions, q, scales, opacity, raw[:, 11:14])


def init_deformation(scope, c_point, c, cond_dim, hidden=64):
    init_mlp(scope, "cond", [c + cond_dim, hidden, 2 * c_point])
    init_mlp(scope, "motion", [c_point, hidden, 3], zero_last=True)


def pose_deformation(tokens, ctx, scope):
    """AdaLN-modulated motion offsets, bounded by OFFSET_BOUND."""
    tokens = nx.as_tensor(tokens)
    cp = tokens.shape[1]
    cond = nx.concat([nx.reshape(nx.as_tensor(ctx.tdef), (1, -1)),
                      nx.reshape(nx.as_tensor(ctx.theta), (1, -1))], axis=1)
    mod = mlp(scope, "cond", cond, 2, act=nx.silu)
    h = nx.layernorm(tokens) * (1.0 + mod[:, :cp]) + mod[:, cp:]
    return OFFSET_BOUND * nx.tanh(mlp(scope, "motion", h, 2))


def pose_avatar(g, motion, pose, anchors, body):
    """Add motion offsets to canonical centers, then skin to ``pose``."""
    G = B.bone_transforms(pose, body)
    centers = B.lbs_apply(g.centers + motion, anchors.weights, G)
    rotations = B.rotate_gaussian_frames(g.rotations, anchors.weights, pose, body, transforms=G)
    return GaussianSet(centers, rotations, g.scales, g.opacity, g.colors)


# ---------------------------------------------------------------- PLY

PLY_PROPS = (["x", "y", "z"] + [f"f_dc_{i}" for i in range(3)] + ["opacity"]
             + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])


def _ply_table(g):
    a = g.numpy() if isinstance(g, GaussianSet) else g
    rho = np.clip(a["opacity"].reshape(-1), 1e-7, 1 - 1e-7)
    return np.concatenate([a["centers"], a["colors"], np.log(rho / (1 - rho))[:, None],
                           np.log(a["scales"]), a["rotations"]], axis=1).astype(np.float32)


def write_ply(path, g, binary=True):
    """3DGS-convention PLY: opacity stored as logit, scales as log."""
    table = _ply_table(g)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(table)}"]
    header += [f"property float {p}" for p in PLY_PROPS] + ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        if binary:
            f.write(table.astype("<f4").tobytes())
        else:
            for row in table:
                f.write((" ".join(repr(float(v)) for v in row) + "\n").encode())


def read_ply(path):
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode().splitlines()
    n = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    props = [l.split()[2] for l in header if l.startswith("property")]
    if props != PLY_PROPS:
        raise ValueError(f"{path}: unexpected PLY properties {props}")
    if any("binary_little_endian" in l for l in header):
        table = np.frombuffer(data, dtype="<f4", count=n * len(props), offset=end)
    else:
        table = np.array(data[end:].split(), dtype=np.float32)
    table = table.reshape(n, len(props)).astype(np.float64)
    return {"centers": table[:, 0:3], "colors": table[:, 3:6],
            "opacity": 1 / (1 + np.exp(-table[:, 6])), "scales": np.exp(table[:, 7:10]),
            "rotations": table[:, 10:14]}
