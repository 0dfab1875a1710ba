"""PSNR and SSIM on [0, 1] grayscale images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    image_id: str = ""


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, max_val: float = 1.0) -> float:
    """10·log10(max² / MSE) in dB; ``inf`` for identical images."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_val ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = len(taps)
    h, w = img.shape
    rows = sum(taps[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(taps[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim_map(x, y, max_val: float = 1.0) -> np.ndarray:
    """Local SSIM at every fully-contained 11×11 Gaussian window (σ=1.5)."""
    x, y = _pair(x, y)
    if x.ndim != 2:
        raise ValueError(f"ssim expects 2-D images, got shape {x.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    taps = gaussian_window()
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps) - mu_x ** 2
    syy = _filter_valid(y * y, taps) - mu_y ** 2
    sxy = _filter_valid(x * y, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, y, max_val: float = 1.0) -> float:
    return float(np.mean(ssim_map(x, y, max_val)))


def evaluate_pair(output, target, image_id: str = "") -> MetricReport:
    output = np.clip(np.asarray(output, dtype=np.float64), 0.0, 1.0)
    return MetricReport(psnr(output, target), ssim(output, target), image_id)
