"""Procedural desk-scale corpus: small grayscale scenes with smooth shading and hard edges.

Images are generated from a fixed seed and rounded to 8-bit levels so they
survive a PGM round trip unchanged.
"""

from __future__ import annotations

import numpy as np

DESK_SEED = 20240521
DESK_SIZE = 64
DESK_COUNT = 8
DESK_TRAIN = 6


def _spectral_field(rng: np.random.Generator, size: int, beta: float) -> np.ndarray:
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    amp = f ** (-beta / 2.0)
    amp[0, 0] = 0.0
    phase = rng.uniform(0, 2 * np.pi, (size, size))
    field = np.real(np.fft.ifft2(amp * np.exp(1j * phase)))
    field -= field.min()
    return field / max(field.max(), 1e-12)


def _soft_mask(dist: np.ndarray, width: float = 0.7) -> np.ndarray:
    return np.clip(0.5 - dist / (2 * width), 0.0, 1.0)


def scene(rng: np.random.Generator, size: int = DESK_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 0.2 + 0.6 * _spectral_field(rng, size, beta=3.0)
    angle = rng.uniform(0, 2 * np.pi)
    img += 0.15 * ((np.cos(angle) * xx + np.sin(angle) * yy) / size - 0.5)
    for _ in range(rng.integers(2, 5)):
        level = rng.uniform(0.05, 0.95)
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(size / 10, size / 4)
            dist = np.hypot(yy - cy, xx - cx) - r
        else:
            y0, x0 = rng.uniform(-size / 4, size, 2)
            h, w = rng.uniform(size / 8, size / 2, 2)
            dist = np.maximum(np.maximum(y0 - yy, yy - (y0 + h)), np.maximum(x0 - xx, xx - (x0 + w)))
        alpha = _soft_mask(dist)
        shade = level + 0.1 * (_spectral_field(rng, size, beta=2.0) - 0.5)
        img = (1 - alpha) * img + alpha * shade
    img += 0.04 * (_spectral_field(rng, size, beta=1.0) - 0.5)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def desk_corpus(count: int = DESK_COUNT, size: int = DESK_SIZE, seed: int = DESK_SEED) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [scene(rng, size) for _ in range(count)]


def desk_split() -> tuple[list[np.ndarray], list[np.ndarray]]:
    """The fixed 6 training / 2 held-out split."""
    images = desk_corpus()
    return images[:DESK_TRAIN], images[DESK_TRAIN:]
