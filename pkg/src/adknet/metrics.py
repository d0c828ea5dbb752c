"""PSNR and SSIM on RGB and on BT.601 luma.

SSIM follows Wang et al.: an 11x11 Gaussian window with sigma 1.5, K1 = 0.01,
K2 = 0.03 and a dynamic range of 1.0, averaged over the valid (unpadded)
window positions and then over channels.  No border cropping is applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

LUMA = np.array([0.299, 0.587, 0.114])
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _same_shape(a, b):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical inputs give ``inf``."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over the two leading axes, valid region only
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM for each valid window position and channel."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[:2]) < WINDOW:
        raise ShapeError(f"image {a.shape[0]}x{a.shape[1]} smaller than the {WINDOW}x{WINDOW} window")
    g = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    return float(np.mean(ssim_map(a, b, data_range)))


def rgb_to_y(img) -> np.ndarray:
    """BT.601 luma ``0.299 R + 0.587 G + 0.114 B`` keeping a trailing unit axis."""
    arr = _arr(img)
    if arr.shape[-1] != 3:
        raise ShapeError(f"expected 3 channels, got {arr.shape[-1]}")
    return (arr @ LUMA)[..., None]


@dataclass
class MetricReport:
    """Per-image metrics plus their means; ``inf`` PSNR marks identical images."""

    rows: list[dict] = field(default_factory=list)

    def add(self, name: str, pred, target, **extra) -> dict:
        row = {"image": name, **extra, **evaluate_pair(pred, target)}
        self.rows.append(row)
        return row

    def mean(self, key: str) -> float:
        vals = [r[key] for r in self.rows]
        return float(np.mean(vals)) if vals else math.nan

    def summary(self) -> dict:
        return {k: self.mean(k) for k in ("psnr_rgb", "ssim_rgb", "psnr_y", "ssim_y")}


def evaluate_pair(pred, target) -> dict:
    pred, target = _same_shape(pred, target)
    py, ty = rgb_to_y(pred), rgb_to_y(target)
    return {
        "psnr_rgb": psnr(pred, target),
        "ssim_rgb": ssim(pred, target),
        "psnr_y": psnr(py, ty),
        "ssim_y": ssim(py, ty),
    }
