"""Masked image metrics for evaluation renders.

MSE, MAE and PSNR average over pixels inside the segmentation mask. SSIM uses
a 5x5 uniform window and averages only over the mask eroded by a 5x5 square,
so no window straddles the mask boundary.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractViolation, LossUndefinedError

SSIM_WINDOW = 5
PSNR_CAP = 99.0
_K1, _K2 = 0.01, 0.03


@dataclass(frozen=True)
class MetricReport:
    mse: float
    mae: float
    psnr: float
    ssim: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def psnr_from_mse(mse: float, data_range: float = 1.0) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range**2 / mse)))


def ssim_map(x, y, window: int = SSIM_WINDOW, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM of two single-channel images (uniform window, reflect borders)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = window * window
    cov_norm = n / (n - 1.0)

    def mean(a):
        return ndimage.uniform_filter(a, size=window, mode="reflect")

    ux, uy = mean(x), mean(y)
    vx = cov_norm * (mean(x * x) - ux * ux)
    vy = cov_norm * (mean(y * y) - uy * uy)
    vxy = cov_norm * (mean(x * y) - ux * uy)
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return num / den


def erode_mask(mask, window: int = SSIM_WINDOW) -> np.ndarray:
    """Erosion by a ``window`` x ``window`` square; pixels off the image count as outside."""
    return ndimage.binary_erosion(np.asarray(mask, dtype=bool), structure=np.ones((window, window), bool), border_value=0)


def eval_metrics(rendered, target, seg_mask, window: int = SSIM_WINDOW) -> MetricReport:
    """Masked MSE, MAE, PSNR and SSIM for ``(H, W, C)`` or ``(H, W)`` images in [0, 1]."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ContractViolation(f"rendered {r.shape} and target {t.shape} differ in shape")
    if r.ndim == 2:
        r, t = r[..., None], t[..., None]
    m = np.asarray(seg_mask)
    if m.shape != r.shape[:2]:
        raise ContractViolation(f"mask {m.shape} does not match image {r.shape[:2]}")
    if not np.all((m == 0) | (m == 1)):
        raise ContractViolation("segmentation mask must be binary")
    m = m.astype(bool)
    if not m.any():
        raise LossUndefinedError("segmentation mask is empty")
    diff = (r - t)[m]
    mse = float(np.mean(diff**2))
    mae = float(np.mean(np.abs(diff)))
    eroded = erode_mask(m, window)
    if not eroded.any():
        raise LossUndefinedError(f"segmentation mask is empty after {window}x{window} erosion")
    ssim = float(np.mean([ssim_map(r[..., c], t[..., c], window)[eroded] for c in range(r.shape[2])]))
    return MetricReport(mse, mae, psnr_from_mse(mse), ssim)


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    """Fixed-width table with six decimals; rows keep the given order plus a mean row."""
    lines = [f"{'name':<24} {'mse':>12} {'mae':>12} {'psnr':>12} {'ssim':>12}"]
    for name, rep in rows:
        lines.append(f"{name:<24} {rep.mse:12.6f} {rep.mae:12.6f} {rep.psnr:12.6f} {rep.ssim:12.6f}")
    if rows:
        mean = [float(np.mean([getattr(rep, k) for _, rep in rows])) for k in ("mse", "mae", "psnr", "ssim")]
        lines.append(f"{'mean':<24} {mean[0]:12.6f} {mean[1]:12.6f} {mean[2]:12.6f} {mean[3]:12.6f}")
    return "\n".join(lines) + "\n"


def albedo_correlation(predicted, reference, mask) -> float:
    """Pearson r after a least-squares gain per channel, over masked pixels.

    The gain removes the albedo/light scale ambiguity that inverse rendering
    cannot resolve.
    """
    p = np.asarray(predicted, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    r = np.asarray(reference, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    if len(p) < 2:
        raise LossUndefinedError("albedo correlation needs at least two masked pixels")
    denom = np.sum(p * p, axis=0)
    gain = np.where(denom > 0, np.sum(p * r, axis=0) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.corrcoef((p * gain).reshape(-1), r.reshape(-1))[0, 1])
