"""Training objective: photometric terms, mask distribution and geometric regularizers."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from . import numerics as nx
from .render import render_fixed

# the single source of the default term weights
DEFAULT_WEIGHTS = {"rgb": 1.0, "mask": 0.5, "per": 1.0, "dis": 0.5, "asap": 20.0, "acap": 5.0}
TERMS = tuple(DEFAULT_WEIGHTS)


@dataclass
class LossWeights:
    rgb: float = DEFAULT_WEIGHTS["rgb"]
    mask: float = DEFAULT_WEIGHTS["mask"]
    per: float = DEFAULT_WEIGHTS["per"]
    dis: float = DEFAULT_WEIGHTS["dis"]
    asap: float = DEFAULT_WEIGHTS["asap"]
    acap: float = DEFAULT_WEIGHTS["acap"]

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def as_dict(self):
        return asdict(self)


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(np.shape(b)):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(np.shape(b))}")


def l1(pred, target):
    pred = nx.as_tensor(pred)
    target = nx.as_tensor(target)
    _check_shapes(pred, target.data)
    return nx.absolute(pred - target).mean()


def l_color(rgb, rgb_gt):
    return l1(rgb, rgb_gt)


def l_mask(alpha, alpha_gt):
    return l1(alpha, alpha_gt)


class PerceptualProxy:
    """L1 between features of a fixed random-filter pyramid (3x3, stride 2, ReLU)."""

    def __init__(self, seed=0, channels=(3, 8, 16, 32)):
        rng = np.random.default_rng(seed)
        self.weights = [rng.normal(scale=np.sqrt(2.0 / (9 * a)), size=(9 * a, b))
                        for a, b in zip(channels[:-1], channels[1:])]
        self._index = {}

    def _im2col_index(self, H, W):
        key = (H, W)
        if key not in self._index:
            Ho, Wo = (H + 1) // 2, (W + 1) // 2
            oy, ox = np.meshgrid(np.arange(Ho) * 2, np.arange(Wo) * 2, indexing="ij")
            idx = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    y, x = oy + dy, ox + dx
                    inside = (y >= 0) & (y < H) & (x >= 0) & (x < W)
                    idx.append(np.where(inside, y * W + x, H * W))  # H*W is the zero pad row
            self._index[key] = (np.stack(idx, axis=-1).reshape(-1), Ho, Wo)
        return self._index[key]

    def features(self, img):
        x = nx.as_tensor(img)
        H, W, C = x.shape
        rows = nx.reshape(x, (H * W, C))
        feats = []
        for w in self.weights:
            idx, Ho, Wo = self._im2col_index(H, W)
            padded = nx.concat([rows, nx.Tensor(np.zeros((1, rows.shape[1])))], axis=0)
            cols = nx.reshape(nx.take_rows(padded, idx), (Ho * Wo, 9 * rows.shape[1]))
            rows = nx.relu(nx.matmul(cols, w))
            H, W = Ho, Wo
            feats.append(rows)
        return feats

    def __call__(self, pred, target):
        pred = nx.as_tensor(pred)
        _check_shapes(pred, nx.as_tensor(target).data)
        fp = self.features(pred)
        ft = self.features(nx.as_tensor(target).detach())
        total = None
        for a, b in zip(fp, ft):
            term = nx.absolute(a - b.data).mean()
            total = term if total is None else total + term
        return total / len(fp)


_DEFAULT_PROXY = None


def l_perceptual(pred, target, proxy=None):
    global _DEFAULT_PROXY
    if proxy is None:
        if _DEFAULT_PROXY is None:
            _DEFAULT_PROXY = PerceptualProxy(0)
        proxy = _DEFAULT_PROXY
    return proxy(pred, target)


def l_dis(centers, rotations, cam, mask_gt):
    """L1 between the fixed-parameter splat mask and the ground-truth mask."""
    return l1(render_fixed(centers, rotations, cam), mask_gt)


def l_asap(scales):
    """Mean over primitives of the variance of log scale across the three axes."""
    ls = nx.log(nx.as_tensor(scales))
    dev = ls - ls.mean(axis=1, keepdims=True)
    return (dev * dev).mean()


def knn_pairs(anchors, k=8):
    """Directed canonical k-nearest-neighbor pairs (i, j), self excluded."""
    anchors = np.asarray(anchors, float)
    n = len(anchors)
    k = min(k, n - 1)
    if k < 1:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    _, nb = cKDTree(anchors).query(anchors, k=k + 1)
    i = np.repeat(np.arange(n), k)
    # drop the self match (distance zero, or the first hit for duplicated points)
    j = np.array([[x for x in row if x != r][:k] for r, row in enumerate(nb)]).reshape(-1)
    return i, j


def l_acap(centers, anchors, pairs=None, k=8):
    """Mean over neighbor pairs of the squared difference of their offsets."""
    anchors = np.asarray(anchors, float)
    i, j = knn_pairs(anchors, k) if pairs is None else pairs
    if len(i) == 0:
        return nx.Tensor(0.0)
    d = nx.as_tensor(centers) - anchors
    diff = nx.take_rows(d, i) - nx.take_rows(d, j)
    return (diff * diff).sum(axis=1).mean()


def total_loss(terms, weights=None):
    """Weighted sum of the named loss terms."""
    w = (weights or LossWeights()).as_dict()
    total = None
    for name, value in terms.items():
        if name not in w:
            raise KeyError(f"unknown loss term {name!r}")
        part = w[name] * value
        total = part if total is None else total + part
    return nx.Tensor(0.0) if total is None else total
