"""Training objectives. Every loss optionally returns its analytic gradient.

Functions take ``with_grad=False``; with ``True`` they return
``(value, grad, ...)`` with one gradient per differentiable input.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import sh
from .errors import LossUndefinedError

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    lambda_01: float = 0.001
    lambda_positive: float = 0.05
    lambda_transfer_match: float = 1.0
    lambda_shadow_stage1: float = 10.0
    lambda_shadow_stage2: float = 0.001
    lambda_ssim: float = 0.2
    rec_unshadowed_stage1: float = 1.0
    rec_shadowed_stage1: float = 0.0
    rec_unshadowed_stage2: float = 0.1
    rec_shadowed_stage2: float = 1.0
    lambda_normal: float = 0.05
    lambda_distortion: float = 100.0
    mc_samples: int = 64

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be positive")

    def stage_weights(self, stage: int) -> dict[str, float]:
        """Stage-dependent weights: photometric pair and shadow-only term."""
        if stage == 1:
            return {
                "rec_unshadowed": self.rec_unshadowed_stage1,
                "rec_shadowed": self.rec_shadowed_stage1,
                "shadow": self.lambda_shadow_stage1,
            }
        return {
            "rec_unshadowed": self.rec_unshadowed_stage2,
            "rec_shadowed": self.rec_shadowed_stage2,
            "shadow": self.lambda_shadow_stage2,
        }


@dataclass
class LossReport:
    """Named terms, their weights and the weighted total."""

    terms: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, value: float, weight: float) -> None:
        self.terms[name] = float(value)
        self.weights[name] = float(weight)

    @property
    def total(self) -> float:
        return float(sum(self.weights[k] * v for k, v in self.terms.items()))

    def first_nonfinite(self) -> str | None:
        for k, v in self.terms.items():
            if not math.isfinite(v):
                return k
        return None

    def merge(self, other: "LossReport") -> "LossReport":
        out = LossReport(dict(self.terms), dict(self.weights))
        out.terms.update(other.terms)
        out.weights.update(other.weights)
        return out


def sample_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform directions on S^2 (inverse-CDF in z, uniform azimuth)."""
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


# ---------------------------------------------------------------------------
# Photometric
# ---------------------------------------------------------------------------


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


def ssim_map(x, y, window: int = 11, sigma: float = 1.5, with_grad: bool = False):
    """Per-pixel, per-channel SSIM with a Gaussian window and zero padding.

    With ``with_grad`` also returns a function mapping dL/d(map) to dL/dx.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k = gaussian_window(window, sigma)
    mx, my = _blur(x, k), _blur(y, k)
    sxx, syy, sxy = _blur(x * x, k), _blur(y * y, k), _blur(x * y, k)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (sxy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (sxx - mx * mx) + (syy - my * my) + SSIM_C2
    den = b1 * b2
    s = a1 * a2 / den
    if not with_grad:
        return s

    def vjp(g):
        d_mx = g * ((2 * my * a2 - 2 * my * a1) / den - s * (2 * mx / b1 - 2 * mx / b2))
        d_sxx = -g * s / b2
        d_sxy = g * 2 * a1 / den
        return _blur(d_mx, k) + 2 * x * _blur(d_sxx, k) + y * _blur(d_sxy, k)

    return s, vjp


def photometric_loss(rendered, target, mask=None, lambda_ssim: float = 0.2, with_grad: bool = False):
    """Masked-mean L1 plus lambda_ssim * (1 - SSIM) / 2.

    ``mask`` is ``(H, W)`` with True on pixels that count. SSIM runs on the
    masked images (excluded pixels zeroed) and is averaged over the mask.
    """
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    m = np.ones(x.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
    count = m.sum()
    if count <= 0:
        raise LossUndefinedError("photometric loss needs a non-empty mask")
    c = x.shape[2]
    m3 = m[..., None]
    diff = x - y
    l1 = float(np.sum(np.abs(diff) * m3) / (count * c))
    value = l1
    grad = np.sign(diff) * m3 / (count * c)
    if lambda_ssim > 0.0:
        out = ssim_map(x * m3, y * m3, with_grad=with_grad)
        s, vjp = out if with_grad else (out, None)
        ssim_val = float(np.sum(s * m3) / (count * c))
        value += lambda_ssim * (1.0 - ssim_val) / 2.0
        if with_grad:
            g_map = -0.5 * lambda_ssim * m3 / (count * c) * np.ones_like(s)
            grad = grad + vjp(g_map) * m3
    if with_grad:
        return value, grad
    return value


# ---------------------------------------------------------------------------
# Physical constraints
# ---------------------------------------------------------------------------


def loss_01(transfer, dirs, with_grad: bool = False):
    """Keep D_k(w) inside [0, 1]: mean of relu(D-1)^2 + relu(-D)^2."""
    d = np.asarray(transfer, dtype=np.float64)
    basis = sh.eval_basis(dirs)
    vals = d @ basis.T  # (K, N)
    over = np.maximum(vals, 1.0) - 1.0
    under = np.minimum(vals, 0.0)
    value = float(np.mean(over**2 + under**2))
    if not with_grad:
        return value
    g_vals = 2.0 * (over + under) / vals.size
    return value, g_vals @ basis


def loss_positive_light(lights, dirs, with_grad: bool = False):
    """Mean of relu(-L_c(w))^2 over lights, channels and samples. ``lights``: (..., 9)."""
    L = np.asarray(lights, dtype=np.float64)
    basis = sh.eval_basis(dirs)
    vals = L @ basis.T
    neg = np.minimum(vals, 0.0)
    value = float(np.mean(neg**2))
    if not with_grad:
        return value
    return value, (2.0 * neg / vals.size) @ basis


def loss_transfer_match(transfer, normals, dirs, with_grad: bool = False):
    """Mean of (max(n_k . w, 0) - D_k(w))^2."""
    d = np.asarray(transfer, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    basis = sh.eval_basis(dirs)
    cosine = n @ dirs.T
    clamped = np.maximum(cosine, 0.0)
    resid = clamped - d @ basis.T
    value = float(np.mean(resid**2))
    if not with_grad:
        return value
    g = 2.0 * resid / resid.size
    g_d = -g @ basis
    g_n = (g * (cosine > 0.0)) @ dirs
    return value, g_d, g_n


def loss_shadow_only(shadowed, unshadowed, with_grad: bool = False):
    """Mean of relu(c_shadowed - c_unshadowed)^2 over surfels and channels."""
    cs = np.asarray(shadowed, dtype=np.float64)
    cu = np.asarray(unshadowed, dtype=np.float64)
    pos = np.maximum(cs - cu, 0.0)
    value = float(np.mean(pos**2))
    if not with_grad:
        return value
    g = 2.0 * pos / pos.size
    return value, g, -g


# ---------------------------------------------------------------------------
# Geometric regularizers
# ---------------------------------------------------------------------------


def depth_distortion(distortion_map, with_grad: bool = False):
    """Mean over pixels of the per-ray pair distortion sum."""
    dm = np.asarray(distortion_map, dtype=np.float64)
    value = float(dm.mean())
    if with_grad:
        return value, np.full(dm.shape, 1.0 / dm.size)
    return value


def pair_distortion(weights, depths) -> float:
    """sum_{i<j} w_i w_j |z_i - z_j| for one ray."""
    w = np.asarray(weights, dtype=np.float64)
    z = np.asarray(depths, dtype=np.float64)
    return float(0.5 * np.sum(np.outer(w, w) * np.abs(z[:, None] - z[None, :])))


def normal_consistency(alpha, depth_sum, normal_img, cam, min_alpha: float = 0.5, with_grad: bool = False):
    """Mean over eligible pixels of sum_k w_k (1 - n_k . N_depth).

    With the composited normal n_render = sum_k w_k n_k this is
    alpha - n_render . N_depth. N_depth comes from central differences of the
    back-projected expected depth and faces the camera. Eligible pixels are
    interior pixels whose 4-neighbourhood all has alpha > ``min_alpha``.
    """
    A = np.asarray(alpha, dtype=np.float64)
    Dsum = np.asarray(depth_sum, dtype=np.float64)
    nr = np.asarray(normal_img, dtype=np.float64)
    H, W = A.shape
    zero = (0.0, np.zeros_like(A), np.zeros_like(Dsum), np.zeros_like(nr))
    if H < 3 or W < 3:
        return zero if with_grad else 0.0
    ok = A > min_alpha
    elig = np.zeros((H, W), dtype=bool)
    elig[1:-1, 1:-1] = ok[1:-1, 1:-1] & ok[:-2, 1:-1] & ok[2:, 1:-1] & ok[1:-1, :-2] & ok[1:-1, 2:]
    count = int(elig.sum())
    if count == 0:
        return zero if with_grad else 0.0
    safeA = np.where(ok, A, 1.0)
    zbar = np.where(ok, Dsum / safeA, 0.0)
    cols, rows = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    ray = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones_like(cols)], axis=-1)
    P = zbar[..., None] * ray
    dx = np.zeros_like(P)
    dy = np.zeros_like(P)
    dx[:, 1:-1] = 0.5 * (P[:, 2:] - P[:, :-2])
    dy[1:-1, :] = 0.5 * (P[2:, :] - P[:-2, :])
    c = np.cross(dy, dx)
    cn = np.linalg.norm(c, axis=-1, keepdims=True)
    cn_safe = np.where(cn > 1e-20, cn, 1.0)
    n_cam = c / cn_safe
    Rw = cam.rotation
    n_world = n_cam @ Rw  # R^T applied per pixel
    per_pix = A - np.sum(nr * n_world, axis=-1)
    value = float(np.sum(np.where(elig, per_pix, 0.0)) / count)
    if not with_grad:
        return value
    g = elig / count
    g_A = g.astype(np.float64)
    g_nr = -g[..., None] * n_world
    g_nw = -g[..., None] * nr
    g_ncam = g_nw @ Rw.T
    g_c = np.where(elig[..., None], (g_ncam - n_cam * np.sum(n_cam * g_ncam, axis=-1, keepdims=True)) / cn_safe, 0.0)
    g_dy = np.cross(dx, g_c)  # c = dy x dx
    g_dx = np.cross(g_c, dy)
    g_P = np.zeros_like(P)
    g_P[:, 2:] += 0.5 * g_dx[:, 1:-1]
    g_P[:, :-2] -= 0.5 * g_dx[:, 1:-1]
    g_P[2:, :] += 0.5 * g_dy[1:-1, :]
    g_P[:-2, :] -= 0.5 * g_dy[1:-1, :]
    g_z = np.sum(g_P * ray, axis=-1)
    g_Dsum = np.where(ok, g_z / safeA, 0.0)
    g_A = g_A - np.where(ok, g_z * Dsum / safeA**2, 0.0)
    return value, g_A, g_Dsum, g_nr


def geometric_regularizers(result, normal_img, cam, with_grad: bool = False):
    """(normal consistency, depth distortion) from one render pass."""
    nc = normal_consistency(result.alpha, result.depth_sum, normal_img, cam, with_grad=with_grad)
    dd = depth_distortion(result.distortion, with_grad=with_grad)
    return nc, dd
