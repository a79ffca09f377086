"""Reference-based restoration metrics: PSNR, SSIM, region-masked PSNR.

All functions take plain numpy arrays in [0,1]; images are (C,H,W) or (H,W).
PSNR is capped at 100 dB so an exact match reports a finite number. SSIM is
computed on the luma channel with the canonical 11-tap Gaussian window
(sigma 1.5) over the valid region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import DimensionError
from .synth import DomainError, LUMA_WEIGHTS

PSNR_CAP_DB = 100.0


@dataclass
class RegionMask:
    name: str
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise DomainError(f"mask '{self.name}' has no positive pixels")


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    masked_psnr: dict = field(default_factory=dict)
    image_count: int = 1

    def to_dict(self) -> dict:
        return {
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "masked_psnr": dict(self.masked_psnr),
            "image_count": self.image_count,
        }


def _check_pair(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    _check_pair(pred, target)
    mse = float(np.mean((pred.astype(np.float64) - target.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def masked_psnr(pred: np.ndarray, target: np.ndarray, mask: RegionMask, peak: float = 1.0) -> float:
    """PSNR with the MSE averaged only over masked pixels (all channels)."""
    _check_pair(pred, target)
    m = mask.mask
    diff = pred.astype(np.float64) - target.astype(np.float64)
    if diff.ndim == 3:
        if m.shape != diff.shape[-2:]:
            raise DimensionError(f"mask {m.shape} does not fit image {diff.shape}")
        sel = diff[:, m]
    else:
        sel = diff[m]
    mse = float(np.mean(sel ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return np.tensordot(LUMA_WEIGHTS, img, axes=(0, 0))
    return img.astype(np.float64)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # separable correlation, then crop to the fully supported region
    half = (window.size - 1) // 2
    out = ndimage.correlate1d(img, window, axis=0, mode="constant")
    out = ndimage.correlate1d(out, window, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(
    pred: np.ndarray,
    target: np.ndarray,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    sigma: float = 1.5,
) -> float:
    _check_pair(pred, target)
    x = _luma(pred)
    y = _luma(target)
    if min(x.shape) < window:
        raise DimensionError(f"image {x.shape} smaller than SSIM window {window}")
    w = _gaussian_window(window, sigma)
    c1 = k1 * k1  # dynamic range L = 1
    c2 = k2 * k2
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(y, w)
    var_x = _filter_valid(x * x, w) - mu_x * mu_x
    var_y = _filter_valid(y * y, w) - mu_y * mu_y
    cov = _filter_valid(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def evaluate_pair(pred: np.ndarray, target: np.ndarray, masks: dict | None = None) -> MetricsReport:
    masked = {}
    for name, m in (masks or {}).items():
        masked[name] = masked_psnr(pred, target, RegionMask(name, m))
    return MetricsReport(psnr_db=psnr(pred, target), ssim=ssim(pred, target), masked_psnr=masked)


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Arithmetic mean of per-image reports; masked metrics averaged where present."""
    if not reports:
        raise DomainError("no reports to aggregate")
    mask_names = sorted({k for r in reports for k in r.masked_psnr})
    masked = {}
    for name in mask_names:
        vals = [r.masked_psnr[name] for r in reports if name in r.masked_psnr]
        masked[name] = float(np.mean(vals))
    return MetricsReport(
        psnr_db=float(np.mean([r.psnr_db for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        masked_psnr=masked,
        image_count=len(reports),
    )
