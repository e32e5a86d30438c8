"""Binary PGM (P5) and PPM (P6) reading and writing via Pillow.

Images live in memory as float64 arrays in [0, 1]: (H, W) for grayscale,
(H, W, 3) for RGB. Writing rounds to 8-bit levels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from sne.errors import FormatError, ShapeError

_MODES = {"L": "P5", "RGB": "P6"}


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PPM":
                raise FormatError(f"{path}: expected binary PGM/PPM, got {im.format}")
            if im.mode not in _MODES:
                im = im.convert("RGB" if im.mode.startswith("RGB") else "L")
            arr = np.asarray(im, dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    return arr / 255.0


def to_uint8(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if not (a.ndim == 2 or (a.ndim == 3 and a.shape[2] == 3)):
        raise ShapeError(f"expected (H, W) or (H, W, 3) image, got {a.shape}")
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img) -> None:
    """Writes P5 for grayscale and P6 for RGB, whatever the file suffix."""
    data = to_uint8(img)
    Image.fromarray(data, "L" if data.ndim == 2 else "RGB").save(Path(path), format="PPM")
