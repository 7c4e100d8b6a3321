"""Differentiable pinhole 3D Gaussian splat rasterizer (CPU reference).

Projection (world -> pixel mean, EWA 2-D covariance) is expressed in tensor
ops; per-pixel front-to-back compositing is a numba kernel with a
hand-written backward pass. Pixel (u, v) has its center at integer (u, v).
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numba
import numpy as np

from . import numerics as nx

NEAR = 0.01
ALPHA_MAX = 0.999
COV_REG = 0.1
CUTOFF_POWER = 4.5  # half the squared Mahalanobis radius of the 3-sigma ellipse
SH_C0 = 0.28209479177387814
FIXED_OPACITY = 0.95
FIXED_SCALE = 0.002


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-9:
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, width, height, fx, fy=None, up=(0.0, 1.0, 0.0)):
        """OpenCV-style camera (x right, y down, z forward) aimed at ``target``."""
        eye = np.asarray(eye, float)
        z = np.asarray(target, float) - eye
        z /= np.linalg.norm(z)
        down = -np.asarray(up, float)
        x = np.cross(down, z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx, fx if fy is None else fy, width / 2.0, height / 2.0, R, -R @ eye, width, height)

    def center(self):
        return -self.R.T @ self.t

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.R.tolist(), "t": self.t.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["R"]), np.array(d["t"]),
                   int(d["width"]), int(d["height"]))


@dataclass
class RenderOutput:
    rgb: nx.Tensor    # (H, W, 3)
    alpha: nx.Tensor  # (H, W)


def quaternion_to_matrix(q):
    """Tensor (N, 4) in (w, x, y, z) order -> (N, 3, 3) rotation matrices."""
    q = q / nx.sqrt((q * q).sum(axis=1, keepdims=True))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return nx.reshape(nx.stack(rows, axis=-1), (q.shape[0], 3, 3))


def project_gaussians(centers, rotations, scales, cam):
    """EWA projection. Returns (mean2d (N,2), cov2d (N,3) as [a, b, c], depth, valid)."""
    centers = nx.as_tensor(centers)
    n = centers.shape[0]
    pc = nx.matmul(centers, cam.R.T) + cam.t
    depth = pc.data[:, 2].copy()
    valid = depth > NEAR
    x, y = pc[:, 0], pc[:, 1]
    z = nx.where(valid, pc[:, 2], 1.0)
    iz = 1.0 / z
    mean2d = nx.stack([cam.fx * x * iz + cam.cx, cam.fy * y * iz + cam.cy], axis=-1)
    zero = nx.Tensor(np.zeros(n))
    J = nx.reshape(nx.stack([cam.fx * iz, zero, -cam.fx * x * iz * iz,
                             zero, cam.fy * iz, -cam.fy * y * iz * iz], axis=-1), (n, 2, 3))
    M = quaternion_to_matrix(nx.as_tensor(rotations)) * nx.reshape(nx.as_tensor(scales), (n, 1, 3))
    T = nx.matmul(nx.matmul(J, cam.R), M)          # (N, 2, 3): J W R S
    cov = nx.matmul(T, nx.swapaxes(T, 1, 2))       # J W Σ Wᵀ Jᵀ
    cov2d = nx.stack([cov[:, 0, 0] + COV_REG, cov[:, 0, 1], cov[:, 1, 1] + COV_REG], axis=-1)
    return mean2d, cov2d, depth, valid


def _conic(cov2d):
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    inv_det = 1.0 / (a * c - b * b)
    return nx.stack([c * inv_det, -b * inv_det, a * inv_det], axis=-1)


def _pixel_bounds(mean2d, cov2d, W, H):
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    r = 3.0 * np.sqrt(lam)
    x0 = np.clip(np.ceil(mean2d[:, 0] - r), 0, W).astype(np.int64)
    x1 = np.clip(np.floor(mean2d[:, 0] + r), -1, W - 1).astype(np.int64)
    y0 = np.clip(np.ceil(mean2d[:, 1] - r), 0, H).astype(np.int64)
    y1 = np.clip(np.floor(mean2d[:, 1] + r), -1, H - 1).astype(np.int64)
    return x0, x1, y0, y1


@numba.njit(cache=True)
def _composite_fwd(means, conic, opac, colors, order, x0, x1, y0, y1, bg, H, W):
    out = np.zeros((H, W, 4))
    T = np.ones((H, W))
    for i in order:
        mx, my = means[i, 0], means[i, 1]
        a, b, c = conic[i, 0], conic[i, 1], conic[i, 2]
        for py in range(y0[i], y1[i] + 1):
            dy = py - my
            for px in range(x0[i], x1[i] + 1):
                dx = px - mx
                power = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                if power > 4.5 or power < 0.0:
                    continue
                alpha = min(0.999, opac[i] * np.exp(-power))
                t = T[py, px]
                w = alpha * t
                for k in range(3):
                    out[py, px, k] += colors[i, k] * w
                T[py, px] = t * (1.0 - alpha)
    for py in range(H):
        for px in range(W):
            t = T[py, px]
            for k in range(3):
                out[py, px, k] += bg[k] * t
            out[py, px, 3] = 1.0 - t
    return out


@numba.njit(cache=True)
def _composite_bwd(means, conic, opac, colors, order, x0, x1, y0, y1, final, grad, H, W):
    n = means.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_col = np.zeros((n, 3))
    T = np.ones((H, W))
    acc = np.zeros((H, W, 3))
    for i in order:
        mx, my = means[i, 0], means[i, 1]
        a, b, c = conic[i, 0], conic[i, 1], conic[i, 2]
        for py in range(y0[i], y1[i] + 1):
            dy = py - my
            for px in range(x0[i], x1[i] + 1):
                dx = px - mx
                power = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                if power > 4.5 or power < 0.0:
                    continue
                e = np.exp(-power)
                raw = opac[i] * e
                alpha = min(0.999, raw)
                t = T[py, px]
                w = alpha * t
                t_final = 1.0 - final[py, px, 3]
                dot_c = 0.0
                dot_rest = 0.0
                for k in range(3):
                    acc[py, px, k] += colors[i, k] * w
                    gk = grad[py, px, k]
                    g_col[i, k] += w * gk
                    dot_c += colors[i, k] * gk
                    dot_rest += (final[py, px, k] - acc[py, px, k]) * gk
                inv = 1.0 / (1.0 - alpha)
                g_alpha = t * dot_c - dot_rest * inv + grad[py, px, 3] * t_final * inv
                T[py, px] = t * (1.0 - alpha)
                if raw >= 0.999:
                    continue
                g_opac[i] += g_alpha * e
                g_pow = -alpha * g_alpha
                g_mean[i, 0] -= g_pow * (a * dx + b * dy)
                g_mean[i, 1] -= g_pow * (b * dx + c * dy)
                g_conic[i, 0] += g_pow * 0.5 * dx * dx
                g_conic[i, 1] += g_pow * dx * dy
                g_conic[i, 2] += g_pow * 0.5 * dy * dy
    return g_mean, g_conic, g_opac, g_col


def composite(mean2d, conic, opacity, colors, order, bounds, background, H, W):
    """Front-to-back alpha compositing; returns an (H, W, 4) tensor [rgb, alpha]."""
    x0, x1, y0, y1 = bounds
    bg = np.asarray(background, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    args = (np.ascontiguousarray(mean2d.data), np.ascontiguousarray(conic.data),
            np.ascontiguousarray(opacity.data), np.ascontiguousarray(colors.data))
    out = _composite_fwd(*args, order, x0, x1, y0, y1, bg, H, W)

    def backward(g):
        return _composite_bwd(*args, order, x0, x1, y0, y1, out, np.ascontiguousarray(g), H, W)

    return nx.tensor.make(out, (mean2d, conic, opacity, colors), backward)


def sh_to_rgb(f):
    return nx.clip(0.5 + SH_C0 * f, 0.0, 1.0)


def _check_finite(g):
    for name in ("centers", "rotations", "scales", "opacity", "colors"):
        arr = np.asarray(nx.as_tensor(getattr(g, name)).data)
        if arr.size == 0:
            continue
        bad = ~np.all(np.isfinite(arr.reshape(len(arr), -1)), axis=1)
        if bad.any():
            raise FloatingPointError(f"non-finite {name} for primitive {int(np.argmax(bad))}")


def rasterize(gaussians, cam, background=(1.0, 1.0, 1.0)):
    """Render a posed Gaussian set. ``gaussians.colors`` are degree-0 SH coefficients."""
    _check_finite(gaussians)
    H, W = cam.height, cam.width
    n = len(nx.as_tensor(gaussians.centers))
    if n == 0:
        rgb = np.broadcast_to(np.asarray(background, float), (H, W, 3)).copy()
        return RenderOutput(nx.Tensor(rgb), nx.Tensor(np.zeros((H, W))))
    mean2d, cov2d, depth, valid = project_gaussians(gaussians.centers, gaussians.rotations,
                                                    gaussians.scales, cam)
    conic = _conic(cov2d)
    idx = np.flatnonzero(valid)
    order = idx[np.argsort(depth[idx], kind="stable")]
    bounds = _pixel_bounds(mean2d.data, cov2d.data, W, H)
    opacity = nx.reshape(nx.as_tensor(gaussians.opacity), (n,))
    out = composite(mean2d, conic, opacity, sh_to_rgb(nx.as_tensor(gaussians.colors)),
                    order, bounds, background, H, W)
    return RenderOutput(out[:, :, :3], out[:, :, 3])


@dataclass
class _FixedSet:
    centers: object
    rotations: object
    scales: object
    opacity: object
    colors: object


def render_fixed(centers, rotations, cam, opacity=FIXED_OPACITY, scale=FIXED_SCALE):
    """Alpha mask rendered from centers alone with fixed opacity and scale."""
    centers = nx.as_tensor(centers)
    n = centers.shape[0]
    rot = nx.as_tensor(rotations).detach()
    fixed = _FixedSet(centers, rot, np.full((n, 3), scale), np.full(n, opacity), np.zeros((n, 3)))
    return rasterize(fixed, cam, background=(0.0, 0.0, 0.0)).alpha


# ---------------------------------------------------------------- image files

def _to_u8(img):
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb):
    img = _to_u8(rgb)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def write_pgm(path, gray):
    img = _to_u8(gray)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


_WS = rb"(?:\s|#[^\n]*\n)+"
_PNM_HEADER = re.compile(rb"(P[56])" + _WS + rb"(\d+)" + _WS + rb"(\d+)" + _WS + rb"(\d+)\s")


def read_pnm(path):
    with open(path, "rb") as f:
        data = f.read()
    m = _PNM_HEADER.match(data)
    if m is None:
        raise ValueError(f"{path}: not a binary PNM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    pos = m.end()
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PNM maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    if len(data) - pos < w * h * ch:
        raise ValueError(f"{path}: truncated PNM payload")
    img = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos).astype(np.float64) / 255.0
    return img.reshape(h, w, 3) if ch == 3 else img.reshape(h, w)


def write_png(path, rgb):
    from PIL import Image
    Image.fromarray(_to_u8(rgb)).save(path)


# ---------------------------------------------------------------- metrics

def psnr(a, b, mask=None):
    err = (np.asarray(a) - np.asarray(b)) ** 2
    mse = err[mask].mean() if mask is not None else err.mean()
    return float("inf") if mse == 0 else float(-10.0 * np.log10(mse))


def ssim(a, b, sigma=1.5):
    """Mean SSIM with a Gaussian window, averaged over channels."""
    from scipy.ndimage import gaussian_filter

    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for k in range(a.shape[2]):
        x, y = a[..., k], b[..., k]
        f = lambda img: gaussian_filter(img, sigma, truncate=3.5)
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))
