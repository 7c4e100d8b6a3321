"""Procedural capsule humanoid with skinning and linear blend skinning.

Stands in for a parametric body model: a 16-bone tree in an A-pose rest
configuration, a tessellated capsule surface per bone, k-nearest-bone
softmax skinning weights, and forward-kinematics LBS.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx

# name, parent, head (m), tail (m), radius (m); parents precede children.
BONES = [
    ("pelvis", -1, (0.00, 0.90, 0.00), (0.00, 1.05, 0.00), 0.13),
    ("spine", 0, (0.00, 1.05, 0.00), (0.00, 1.25, 0.00), 0.12),
    ("chest", 1, (0.00, 1.25, 0.00), (0.00, 1.42, 0.00), 0.14),
    ("head", 2, (0.00, 1.48, 0.00), (0.00, 1.68, 0.00), 0.10),
    ("l_upperarm", 2, (0.18, 1.40, 0.00), (0.40, 1.20, 0.00), 0.05),
    ("l_forearm", 4, (0.40, 1.20, 0.00), (0.60, 1.01, 0.00), 0.04),
    ("l_hand", 5, (0.60, 1.01, 0.00), (0.68, 0.93, 0.00), 0.035),
    ("r_upperarm", 2, (-0.18, 1.40, 0.00), (-0.40, 1.20, 0.00), 0.05),
    ("r_forearm", 7, (-0.40, 1.20, 0.00), (-0.60, 1.01, 0.00), 0.04),
    ("r_hand", 8, (-0.60, 1.01, 0.00), (-0.68, 0.93, 0.00), 0.035),
    ("l_thigh", 0, (0.10, 0.90, 0.00), (0.12, 0.50, 0.00), 0.07),
    ("l_shin", 10, (0.12, 0.50, 0.00), (0.13, 0.10, 0.00), 0.05),
    ("l_foot", 11, (0.13, 0.10, 0.00), (0.13, 0.05, 0.14), 0.04),
    ("r_thigh", 0, (-0.10, 0.90, 0.00), (-0.12, 0.50, 0.00), 0.07),
    ("r_shin", 13, (-0.12, 0.50, 0.00), (-0.13, 0.10, 0.00), 0.05),
    ("r_foot", 14, (-0.13, 0.10, 0.00), (-0.13, 0.05, 0.14), 0.04),
]
SUPPORTED_JOINTS = (2, 4, 10, 16)


@dataclass(frozen=True)
class ProxyBody:
    names: tuple
    parents: np.ndarray   # (J,) int, root = -1
    heads: np.ndarray     # (J, 3) joint pivots
    tails: np.ndarray     # (J, 3)
    radii: np.ndarray     # (J,)
    verts: np.ndarray     # (V, 3) canonical capsule surface
    faces: np.ndarray     # (F, 3)
    face_bone: np.ndarray  # (F,) owning capsule of each triangle

    @property
    def joint_count(self):
        return len(self.parents)

    def face_areas(self):
        a, b, c = (self.verts[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def capsule_areas(self):
        return np.bincount(self.face_bone, weights=self.face_areas(), minlength=self.joint_count)

    def bbox(self, pad=0.0):
        return self.verts.min(axis=0) - pad, self.verts.max(axis=0) + pad


@dataclass(frozen=True)
class PoseParams:
    theta: np.ndarray  # (J, 3) axis-angle per joint, radians
    trans: np.ndarray  # (3,) root translation, meters

    @classmethod
    def identity(cls, joint_count):
        return cls(np.zeros((joint_count, 3)), np.zeros(3))

    @classmethod
    def from_vector(cls, vec, joint_count):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (3 * joint_count + 3,):
            raise ValueError(f"pose vector must have length {3 * joint_count + 3}, got {vec.shape}")
        return cls(vec[:-3].reshape(joint_count, 3).copy(), vec[-3:].copy())

    def vector(self):
        return np.concatenate([self.theta.reshape(-1), self.trans])


@dataclass(frozen=True)
class AnchorSet:
    positions: np.ndarray  # (N, 3) canonical
    weights: np.ndarray    # (N, J), rows sum to 1
    faces: np.ndarray      # (N,) source triangle

    def __len__(self):
        return len(self.positions)


def _perp_frame(u):
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    v = np.cross(u, ref)
    v /= np.linalg.norm(v)
    return v, np.cross(u, v)


def capsule_mesh(a, b, r, n_seg=16, n_lat=4):
    """Triangulated capsule around segment a-b; every vertex lies on the capsule."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    u = b - a
    u /= np.linalg.norm(u)
    v, w = _perp_frame(u)
    ang = 2 * np.pi * np.arange(n_seg) / n_seg
    circle = np.cos(ang)[:, None] * v + np.sin(ang)[:, None] * w
    rings = []
    for i in range(1, n_lat + 1):
        phi = 0.5 * np.pi * i / n_lat
        rings.append(a - r * np.cos(phi) * u + r * np.sin(phi) * circle)
    for i in range(n_lat, 0, -1):
        phi = 0.5 * np.pi * i / n_lat
        rings.append(b + r * np.cos(phi) * u + r * np.sin(phi) * circle)
    verts = [a - r * u] + [p for ring in rings for p in ring] + [b + r * u]
    n_ring = len(rings)
    faces = []
    top = 0
    first = lambda k: 1 + k * n_seg
    for j in range(n_seg):
        faces.append((top, first(0) + (j + 1) % n_seg, first(0) + j))
    for k in range(n_ring - 1):
        for j in range(n_seg):
            p0, p1 = first(k) + j, first(k) + (j + 1) % n_seg
            q0, q1 = first(k + 1) + j, first(k + 1) + (j + 1) % n_seg
            faces.append((p0, p1, q1))
            faces.append((p0, q1, q0))
    bottom = len(verts) - 1
    for j in range(n_seg):
        faces.append((first(n_ring - 1) + j, first(n_ring - 1) + (j + 1) % n_seg, bottom))
    return np.array(verts), np.array(faces, dtype=np.int64)


def build_proxy_body(joint_count=16, seed=0):
    """Deterministic capsule humanoid; ``seed`` jitters proportions by a few percent."""
    if joint_count not in SUPPORTED_JOINTS:
        raise ValueError(f"unsupported joint count {joint_count}; choose from {SUPPORTED_JOINTS}")
    rng = np.random.default_rng(seed)
    height = rng.uniform(0.95, 1.05)
    girth = rng.uniform(0.9, 1.1)
    table = BONES[:joint_count]
    names = tuple(t[0] for t in table)
    parents = np.array([t[1] for t in table], dtype=np.int64)
    heads = np.array([t[2] for t in table]) * height
    tails = np.array([t[3] for t in table]) * height
    radii = np.array([t[4] for t in table]) * girth
    verts, faces, owner = [], [], []
    offset = 0
    for j in range(joint_count):
        v, f = capsule_mesh(heads[j], tails[j], radii[j])
        verts.append(v)
        faces.append(f + offset)
        owner.append(np.full(len(f), j))
        offset += len(v)
    return ProxyBody(names, parents, heads, tails, radii, np.concatenate(verts),
                     np.concatenate(faces), np.concatenate(owner))


def segment_distance(points, heads, tails):
    """Distance from each point to each segment, shape (N, J)."""
    d = tails - heads
    rel = points[:, None, :] - heads[None]
    t = np.clip((rel * d).sum(-1) / (d * d).sum(-1), 0.0, 1.0)
    return np.linalg.norm(rel - t[..., None] * d, axis=-1)


def diffuse_skinning(body, points, k=4, temperature=0.05):
    """Softmax of negative signed capsule distance over the k nearest bones."""
    J = body.joint_count
    if not 1 <= k <= J:
        raise ValueError(f"k must be in [1, {J}], got {k}")
    d = segment_distance(np.asarray(points, float), body.heads, body.tails) - body.radii
    near = np.argsort(d, axis=1, kind="stable")[:, :k]
    dn = np.take_along_axis(d, near, axis=1)
    logits = -(dn - dn.min(axis=1, keepdims=True)) / temperature
    e = np.exp(logits)
    w = np.zeros_like(d)
    np.put_along_axis(w, near, e / e.sum(axis=1, keepdims=True), axis=1)
    return w


def sample_anchors(body, n, seed=0, k=4, temperature=0.05):
    """Area-weighted uniform samples on the canonical surface, with skin weights."""
    if n < 1:
        raise ValueError("need at least one anchor")
    areas = body.face_areas()
    total = areas.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("degenerate body surface")
    rng = np.random.default_rng(seed)
    faces = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = body.verts[body.faces[faces]]
    pos = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    return AnchorSet(pos, diffuse_skinning(body, pos, k, temperature), faces)


# ---------------------------------------------------------------- kinematics

def axis_angle_to_matrix(aa):
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta > 1e-12, theta, 1.0)
    k = aa / safe
    K = np.zeros(aa.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    R = np.eye(3) + s * K + (1 - c) * (K @ K)
    return np.where((theta > 1e-12)[..., None], R, np.eye(3))


def bone_transforms(pose, body):
    """Rest-relative world transforms G_j, shape (J, 4, 4)."""
    J = body.joint_count
    R = axis_angle_to_matrix(pose.theta)
    G = np.zeros((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = R[j]
        local[:3, 3] = body.heads[j] - R[j] @ body.heads[j]
        p = body.parents[j]
        if p < 0:
            root = np.eye(4)
            root[:3, 3] = pose.trans
            G[j] = root @ local
        else:
            G[j] = G[p] @ local
    return G


def lbs_apply(points, weights, transforms):
    """p' = (sum_j w_j G_j) p; differentiable w.r.t. ``points`` (a Tensor)."""
    A = np.einsum("nj,jab->nab", weights, transforms[:, :3, :])
    pts = nx.as_tensor(points)
    n = pts.shape[0]
    rotated = nx.reshape(nx.matmul(A[:, :, :3], nx.reshape(pts, (n, 3, 1))), (n, 3))
    return rotated + A[:, :, 3]


def lbs_transform(points, weights, pose, body):
    return lbs_apply(points, weights, bone_transforms(pose, body))


def matrix_to_quaternion(R):
    """Rotation matrices (..., 3, 3) to unit quaternions (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    tr = np.trace(m, axis1=1, axis2=2)
    cand = np.stack([
        np.stack([1 + tr, m[:, 2, 1] - m[:, 1, 2], m[:, 0, 2] - m[:, 2, 0], m[:, 1, 0] - m[:, 0, 1]], -1),
        np.stack([m[:, 2, 1] - m[:, 1, 2], 1 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2],
                  m[:, 0, 1] + m[:, 1, 0], m[:, 0, 2] + m[:, 2, 0]], -1),
        np.stack([m[:, 0, 2] - m[:, 2, 0], m[:, 0, 1] + m[:, 1, 0],
                  1 - m[:, 0, 0] + m[:, 1, 1] - m[:, 2, 2], m[:, 1, 2] + m[:, 2, 1]], -1),
        np.stack([m[:, 1, 0] - m[:, 0, 1], m[:, 0, 2] + m[:, 2, 0],
                  m[:, 1, 2] + m[:, 2, 1], 1 - m[:, 0, 0] - m[:, 1, 1] + m[:, 2, 2]], -1),
    ], axis=1)
    diag = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], -1)
    pick = np.argmax(diag, axis=1)
    q = cand[np.arange(len(m)), pick]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q.reshape(R.shape[:-2] + (4,))


def quaternion_to_matrix_np(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def left_mult_matrix(q):
    """L(q) with L(q) @ p == q ⊗ p for quaternions in (w, x, y, z) order."""
    w, x, y, z = np.moveaxis(np.asarray(q, float), -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, -z, y], -1),
        np.stack([y, z, w, -x], -1),
        np.stack([z, -y, x, w], -1),
    ], -2)


def blended_rotations(weights, transforms):
    """Closest rotation (polar factor) to each point's blended bone rotation."""
    M = np.einsum("nj,jab->nab", weights, transforms[:, :3, :3])
    U, _, Vt = np.linalg.svd(M)
    D = np.ones((len(M), 3))
    D[:, 2] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[:, None, :]) @ Vt


def rotate_gaussian_frames(rotations, weights, pose, body, transforms=None):
    """Left-multiply each unit quaternion by its blended bone rotation."""
    G = bone_transforms(pose, body) if transforms is None else transforms
    qb = matrix_to_quaternion(blended_rotations(weights, G))
    r = nx.as_tensor(rotations)
    n = r.shape[0]
    out = nx.reshape(nx.matmul(left_mult_matrix(qb), nx.reshape(r, (n, 4, 1))), (n, 4))
    return out / nx.sqrt((out * out).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- export

def body_arrays(body, anchors=None):
    out = {
        "body/parents": body.parents.astype(np.float64),
        "body/heads": body.heads,
        "body/tails": body.tails,
        "body/radii": body.radii,
        "body/verts": body.verts,
        "body/faces": body.faces.astype(np.float64),
        "body/face_bone": body.face_bone.astype(np.float64),
    }
    if anchors is not None:
        out["anchors/positions"] = anchors.positions
        out["anchors/weights"] = anchors.weights
        out["anchors/faces"] = anchors.faces.astype(np.float64)
    return out


def body_from_arrays(arrays):
    J = len(arrays["body/parents"])
    body = ProxyBody(
        tuple(t[0] for t in BONES[:J]),
        arrays["body/parents"].astype(np.int64), arrays["body/heads"], arrays["body/tails"],
        arrays["body/radii"], arrays["body/verts"], arrays["body/faces"].astype(np.int64),
        arrays["body/face_bone"].astype(np.int64))
    anchors = None
    if "anchors/positions" in arrays:
        anchors = AnchorSet(arrays["anchors/positions"], arrays["anchors/weights"],
                            arrays["anchors/faces"].astype(np.int64))
    return body, anchors


def write_obj(body, path):
    with open(path, "w") as f:
        f.write(f"# capsule proxy body, {body.joint_count} bones\n")
        for v in body.verts:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for tri in body.faces + 1:
            f.write(f"f {tri[0]} {tri[1]} {tri[2]}\n")
