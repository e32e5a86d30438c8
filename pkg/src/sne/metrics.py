"""PSNR, SSIM and MS-SSIM on [0, 1] images.

SSIM uses an 8x8 uniform sliding window (every valid position, stride 1)
with population statistics, so values will not match tools built on the
11x11 Gaussian window bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sne.codec import as_channels
from sne.errors import GeometryError, ShapeError

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = as_channels(a)
    b = as_channels(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _window_mean(x: np.ndarray, window: int) -> np.ndarray:
    return sliding_window_view(x, (window, window)).mean(axis=(-2, -1))


def ssim_maps(a: np.ndarray, b: np.ndarray, window: int = 8, c1: float = C1, c2: float = C2):
    """Luminance and contrast-structure maps of two planes over all window positions."""
    if min(a.shape) < window:
        raise GeometryError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    mu_a = _window_mean(a, window)
    mu_b = _window_mean(b, window)
    var_a = _window_mean(a * a, window) - mu_a * mu_a
    var_b = _window_mean(b * b, window) - mu_b * mu_b
    cov = _window_mean(a * b, window) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(a, b, window: int = 8, c1: float = C1, c2: float = C2) -> float:
    a, b = _pair(a, b)
    vals = []
    for ch in range(a.shape[2]):
        lum, cs = ssim_maps(a[:, :, ch], b[:, :, ch], window, c1, c2)
        vals.append(float(np.mean(lum * cs)))
    return float(np.mean(vals))


def downsample(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling; an odd trailing row/column is dropped."""
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_weights(scales: int) -> tuple[float, ...]:
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}, got {scales}")
    if scales == len(MS_SSIM_WEIGHTS):
        return MS_SSIM_WEIGHTS
    w = MS_SSIM_WEIGHTS[:scales]
    total = sum(w)
    return tuple(x / total for x in w)


def ms_ssim(a, b, scales: int = 5, window: int = 8, c1: float = C1, c2: float = C2) -> float:
    """Final-scale luminance times per-scale contrast-structure, each raised to its weight.

    Fewer than five scales use the leading weights renormalized to sum to 1.
    Negative terms are clamped to 0 before exponentiation.
    """
    a, b = _pair(a, b)
    need = 2 ** (scales - 1) * window
    if min(a.shape[:2]) < need:
        raise GeometryError(f"MS-SSIM with {scales} scales needs images of at least "
                            f"{need}x{need}, got {a.shape[0]}x{a.shape[1]}")
    weights = ms_ssim_weights(scales)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        value = 1.0
        for j, w in enumerate(weights):
            lum, cs = ssim_maps(x, y, window, c1, c2)
            value *= max(float(np.mean(cs)), 0.0) ** w
            if j == scales - 1:
                value *= max(float(np.mean(lum)), 0.0) ** w
            else:
                x, y = downsample(x), downsample(y)
        vals.append(value)
    return float(np.mean(vals))


def max_scales(shape, window: int = 8) -> int:
    side = min(shape[:2])
    s = 0
    while s < len(MS_SSIM_WEIGHTS) and side >= 2 ** s * window:
        s += 1
    return s


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    ms_ssim: float
    bpp: float = float("nan")
    ms_ssim_scales: int = 5

    def to_text(self) -> str:
        return (f"psnr={self.psnr:.6f}\nssim={self.ssim:.6f}\nms_ssim={self.ms_ssim:.6f}\n"
                f"ms_ssim_scales={self.ms_ssim_scales}\nbpp={self.bpp:.6f}\n")


def evaluate(reference, test, bpp: float = float("nan")) -> MetricReport:
    """All three metrics; MS-SSIM uses as many scales (up to 5) as the image allows."""
    scales = max_scales(np.shape(reference))
    if scales == 0:
        raise GeometryError(f"image {np.shape(reference)} smaller than the SSIM window")
    return MetricReport(psnr(reference, test), ssim(reference, test),
                        ms_ssim(reference, test, scales), bpp, scales)
