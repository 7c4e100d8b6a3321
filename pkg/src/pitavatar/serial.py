"""Space-filling-curve serialization, patch grouping and grid pooling of point tokens."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx

PATTERNS = ("z", "hilbert", "z-trans", "hilbert-trans")
RUNTIME_BITS = 10


# ------------------------------------------------------------------ curves

def quantize(points, bbox, b):
    lo, hi = (np.asarray(v, dtype=np.float64) for v in bbox)
    ext = hi - lo
    if np.any(ext <= 0):
        raise ValueError(f"degenerate bounding box {lo} .. {hi}")
    n = 1 << b
    cells = np.floor((np.asarray(points, float) - lo) / ext * n).astype(np.int64)
    return np.clip(cells, 0, n - 1)


def _spread3(v):
    """Insert two zero bits between each of the low 21 bits of ``v``."""
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v):
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(x, y, z):
    """Interleave bits: x -> bit 0, y -> bit 1, z -> bit 2, repeating."""
    return _spread3(x) | (_spread3(y) << np.uint64(1)) | (_spread3(z) << np.uint64(2))


def morton_decode(code):
    code = np.asarray(code, dtype=np.uint64)
    return (_compact3(code).astype(np.int64), _compact3(code >> np.uint64(1)).astype(np.int64),
            _compact3(code >> np.uint64(2)).astype(np.int64))


def hilbert_encode(x, y, z, b):
    """3-D Hilbert index via Skilling's axes-to-transpose transform."""
    X = [np.array(c, dtype=np.int64, copy=True) for c in np.broadcast_arrays(x, y, z)]
    q = 1 << (b - 1)
    while q > 1:
        p = q - 1
        for i in range(3):
            hit = (X[i] & q) != 0
            t = (X[0] ^ X[i]) & p
            x0 = np.where(hit, X[0] ^ p, X[0] ^ t)
            if i:
                X[i] = np.where(hit, X[i], X[i] ^ t)
            X[0] = x0
        q >>= 1
    X[1] ^= X[0]
    X[2] ^= X[1]
    t = np.zeros_like(X[0])
    q = 1 << (b - 1)
    while q > 1:
        t = np.where((X[2] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    for i in range(3):
        X[i] ^= t
    code = np.zeros(X[0].shape, dtype=np.uint64)
    for bit in range(b - 1, -1, -1):
        for i in range(3):
            code = (code << np.uint64(1)) | ((X[i] >> bit) & 1).astype(np.uint64)
    return code


def hilbert_decode(code, b):
    code = np.asarray(code, dtype=np.uint64)
    X = [np.zeros(code.shape, dtype=np.int64) for _ in range(3)]
    shift = 3 * b
    for bit in range(b - 1, -1, -1):
        for i in range(3):
            shift -= 1
            X[i] |= ((code >> np.uint64(shift)) & np.uint64(1)).astype(np.int64) << bit
    t = X[2] >> 1
    X[2] ^= X[1]
    X[1] ^= X[0]
    X[0] ^= t
    q = 2
    while q != (1 << b):
        p = q - 1
        for i in range(2, -1, -1):
            hit = (X[i] & q) != 0
            t = (X[0] ^ X[i]) & p
            x0 = np.where(hit, X[0] ^ p, X[0] ^ t)
            if i:
                X[i] = np.where(hit, X[i], X[i] ^ t)
            X[0] = x0
        q <<= 1
    return tuple(X)


def curve_code(cells, pattern, b):
    cells = np.asarray(cells)
    if pattern.endswith("-trans"):
        cells = cells[:, [1, 2, 0]]
    x, y, z = cells[:, 0], cells[:, 1], cells[:, 2]
    if pattern.startswith("hilbert"):
        return hilbert_encode(x, y, z, b)
    if pattern.startswith("z"):
        return morton_encode(x, y, z)
    raise ValueError(f"unknown serialization pattern {pattern!r}")


def padded_bbox(points, pad=1e-6):
    points = np.asarray(points, float)
    return points.min(axis=0) - pad, points.max(axis=0) + pad


def serialize(points, pattern, b=RUNTIME_BITS, bbox=None):
    """Stable argsort of points by their curve code."""
    points = np.asarray(points, float)
    cells = quantize(points, padded_bbox(points) if bbox is None else bbox, b)
    return np.argsort(curve_code(cells, pattern, b), kind="stable")


class PatternSchedule:
    """One random permutation of the four patterns per forward pass."""

    def __init__(self, rng):
        self.perm = [PATTERNS[i] for i in rng.permutation(len(PATTERNS))]

    def __call__(self, block_index):
        return self.perm[block_index % len(self.perm)]


def pattern_schedule(block_index, rng):
    return PatternSchedule(rng)(block_index)


# ------------------------------------------------------------------ token grid

@dataclass
class TokenGrid3D:
    positions: np.ndarray          # (N, 3)
    features: nx.Tensor            # (N, C)
    order: np.ndarray              # serialization permutation
    level: int = 0
    cluster: Optional[np.ndarray] = None   # fine index -> coarse index (for the grid pooled from ``source``)
    source: Optional["TokenGrid3D"] = field(default=None, repr=False)

    def __len__(self):
        return len(self.positions)

    def lineage(self):
        """Coarse index -> list of fine indices of ``source``."""
        if self.cluster is None:
            return None
        groups = [[] for _ in range(len(self))]
        for fine, coarse in enumerate(self.cluster):
            groups[coarse].append(fine)
        return groups

    def with_features(self, features, order=None):
        return TokenGrid3D(self.positions, features, self.order if order is None else order,
                           self.level, self.cluster, self.source)


def voxel_keys(positions, cell_size, origin=None):
    origin = positions.min(axis=0) if origin is None else origin
    return np.floor((positions - origin) / cell_size).astype(np.int64)


def grid_pool(grid, cell_size):
    """Bucket tokens by voxel: max-pool features, average positions."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    keys = voxel_keys(grid.positions, cell_size)
    _, cluster = np.unique(keys, axis=0, return_inverse=True)
    cluster = cluster.reshape(-1)
    n = int(cluster.max()) + 1
    feats = nx.segment_max(grid.features, cluster, n)
    counts = np.bincount(cluster, minlength=n)[:, None]
    pos = np.stack([np.bincount(cluster, weights=grid.positions[:, i], minlength=n)
                    for i in range(3)], axis=1) / counts
    return TokenGrid3D(pos, feats, np.arange(n), grid.level + 1, cluster, grid)


def unpool_gather(coarse, skip):
    """Each fine token's coarse-parent feature, in ``skip`` order."""
    if coarse.source is not skip or coarse.cluster is None or len(coarse.cluster) != len(skip):
        raise ValueError("lineage mismatch: coarse grid was not pooled from this skip grid")
    return nx.take_rows(coarse.features, coarse.cluster)


def grid_unpool(coarse, skip, weight, bias=None):
    """concat(parent feature, skip feature) followed by a learned linear merge."""
    parent = unpool_gather(coarse, skip)
    merged = nx.linear(nx.concat([parent, skip.features], axis=1), weight, bias)
    return skip.with_features(merged)


def calibrate_cell_size(positions, ratio=2.0, iters=40):
    """Cell size whose voxel pooling shrinks ``positions`` by roughly ``ratio``."""
    n = len(positions)
    target = max(1, int(round(n / ratio)))
    ext = float(np.max(np.ptp(positions, axis=0))) or 1.0
    lo, hi = ext * 1e-4, ext
    count = lambda c: len(np.unique(voxel_keys(positions, c), axis=0))
    for _ in range(iters):
        mid = np.sqrt(lo * hi)
        if count(mid) > target:
            lo = mid
        else:
            hi = mid
    return hi


def patch_partition(order, patch_size):
    """Split a serialized order into fixed-size patches.

    Returns (index, mask), both (P, patch_size). The last patch is padded by
    wrapping around the order; padded slots are masked False.
    """
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    order = np.asarray(order, dtype=np.int64)
    n = len(order)
    size = min(patch_size, n)
    n_patch = -(-n // size)
    slots = np.arange(n_patch * size)
    index = order[slots % n].reshape(n_patch, size)
    mask = (slots < n).reshape(n_patch, size)
    return index, mask
