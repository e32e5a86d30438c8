"""Block-DCT encoder with uniform quantization, and the plain dequantize/invert decoder.

Images are float arrays in [0, 1] of shape (H, W) or (H, W, C). The encoder
works on the 0..255 sample scale without a level shift, so an all-zero
coefficient block decodes to an all-zero (black) patch, which is also what
a ghost patch is.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from sne.errors import FormatError, GeometryError, ParameterError, ShapeError

SAMPLE_SCALE = 255.0
MAGIC = b"SNEQ1"
MODES = ("aligned", "overlapping")

# JPEG Annex K luminance table
_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class QuantTable:
    entries: np.ndarray
    quality: float = 1.0

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ShapeError(f"quant table must be square, got {e.shape}")
        if not (e >= 1.0).all():
            raise ParameterError("quant table entries must be >= 1")
        if not 0.0 < self.quality <= 1.0:
            raise ParameterError(f"quality must lie in (0, 1], got {self.quality}")
        object.__setattr__(self, "entries", e)

    @property
    def block_edge(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def standard(cls, block_edge: int = 8, quality: float = 1.0) -> "QuantTable":
        """Luminance-style table resampled to ``block_edge`` and divided by ``quality``."""
        if not 0.0 < quality <= 1.0:
            raise ParameterError(f"quality must lie in (0, 1], got {quality}")
        idx = np.minimum((np.arange(block_edge) * 8) // block_edge, 7)
        base = _LUMA[np.ix_(idx, idx)]
        return cls(np.maximum(1.0, base / quality), quality)

    @classmethod
    def unit(cls, block_edge: int = 8) -> "QuantTable":
        return cls(np.ones((block_edge, block_edge)), 1.0)


@dataclass
class QuantizedRepresentation:
    """Integer coefficient blocks for every grid position of every channel.

    ``coeffs`` has shape (channels, grid_rows, grid_cols, edge, edge).
    """

    height: int
    width: int
    mode: str
    table: QuantTable
    coeffs: np.ndarray
    bpp_estimate: float = field(default=0.0)

    @property
    def channels(self) -> int:
        return self.coeffs.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.coeffs.shape[1], self.coeffs.shape[2]

    @property
    def block_edge(self) -> int:
        return self.table.block_edge

    @property
    def stride(self) -> int:
        return patch_stride(self.block_edge, self.mode)

    def dequantized(self) -> np.ndarray:
        return self.coeffs.astype(np.float64) * self.table.entries


def patch_stride(block_edge: int, mode: str) -> int:
    if mode == "aligned":
        return block_edge
    if mode == "overlapping":
        if block_edge % 2:
            raise GeometryError("overlapping mode needs an even block edge")
        return block_edge // 2
    raise ParameterError(f"unknown patch mode {mode!r}")


def grid_dims(height: int, width: int, block_edge: int, mode: str) -> tuple[int, int]:
    stride = patch_stride(block_edge, mode)
    if height < block_edge or width < block_edge:
        raise GeometryError(f"image {height}x{width} smaller than block edge {block_edge}")
    if (height - block_edge) % stride or (width - block_edge) % stride:
        raise GeometryError(
            f"image {height}x{width} not tileable by edge {block_edge} at stride {stride}; pad first")
    return (height - block_edge) // stride + 1, (width - block_edge) // stride + 1


def dct_forward(block) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes (square blocks)."""
    b = np.asarray(block, dtype=np.float64)
    if b.ndim < 2 or b.shape[-1] != b.shape[-2]:
        raise ShapeError(f"DCT needs square blocks, got shape {b.shape}")
    return dctn(b, type=2, norm="ortho", axes=(-2, -1))


def dct_inverse(coeffs) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim < 2 or c.shape[-1] != c.shape[-2]:
        raise ShapeError(f"DCT needs square blocks, got shape {c.shape}")
    return idctn(c, type=2, norm="ortho", axes=(-2, -1))


def quantize(coeffs, table: QuantTable) -> np.ndarray:
    """Round half away from zero of coeffs / table."""
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape[-2:] != table.entries.shape:
        raise ShapeError(f"coefficient block {c.shape[-2:]} vs table {table.entries.shape}")
    r = c / table.entries
    return (np.sign(r) * np.floor(np.abs(r) + 0.5)).astype(np.int64)


def as_channels(img) -> np.ndarray:
    """View an image as (H, W, C)."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[:, :, None]
    if a.ndim == 3:
        return a
    raise ShapeError(f"image must be 2-D or 3-D, got shape {a.shape}")


def extract_blocks(plane: np.ndarray, block_edge: int, mode: str) -> np.ndarray:
    """(H, W) -> (grid_rows, grid_cols, edge, edge)."""
    rows, cols = grid_dims(*plane.shape, block_edge, mode)
    s = patch_stride(block_edge, mode)
    windows = np.lib.stride_tricks.sliding_window_view(plane, (block_edge, block_edge))
    return windows[::s, ::s][:rows, :cols].copy()


def assemble_blocks(blocks: np.ndarray, height: int, width: int, mode: str) -> np.ndarray:
    """Inverse of :func:`extract_blocks`; overlapping contributions are averaged."""
    rows, cols, e, _ = blocks.shape
    s = patch_stride(e, mode)
    acc = np.zeros((height, width))
    hits = np.zeros((height, width))
    for r in range(rows):
        for c in range(cols):
            acc[r * s:r * s + e, c * s:c * s + e] += blocks[r, c]
            hits[r * s:r * s + e, c * s:c * s + e] += 1.0
    return acc / np.maximum(hits, 1.0)


def entropy_bits(symbols: np.ndarray) -> float:
    """Empirical zeroth-order entropy in bits per symbol."""
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / counts.sum()
    return float(max(0.0, -(p * np.log2(p)).sum()))


def encode_image(img, table: QuantTable, mode: str = "aligned") -> QuantizedRepresentation:
    planes = as_channels(img)
    h, w, _ = planes.shape
    e = table.block_edge
    coeffs = np.stack([
        quantize(dct_forward(extract_blocks(planes[:, :, ch] * SAMPLE_SCALE, e, mode)), table)
        for ch in range(planes.shape[2])
    ])
    coeffs = np.clip(coeffs, -32768, 32767).astype(np.int16)
    bpp = entropy_bits(coeffs) * coeffs.size / (h * w)
    return QuantizedRepresentation(h, w, mode, table, coeffs, bpp)


def baseline_decode(rep: QuantizedRepresentation) -> np.ndarray:
    """Dequantize, invert the DCT, average overlaps, clamp to [0, 1].

    Returns (H, W) for single-channel representations, else (H, W, C).
    """
    pixels = dct_inverse(rep.dequantized()) / SAMPLE_SCALE
    planes = [assemble_blocks(pixels[ch], rep.height, rep.width, rep.mode)
              for ch in range(rep.channels)]
    out = np.clip(np.stack(planes, axis=-1), 0.0, 1.0)
    return out[:, :, 0] if rep.channels == 1 else out


# ---------------------------------------------------------------------------
# SNEQ1 container
#
#   magic "SNEQ1"
#   u8 mode (0 aligned, 1 overlapping)
#   u16 height, u16 width, u16 channels, u16 block_edge
#   f64 quality, f64 bpp_estimate
#   edge*edge f64 table entries, row-major
#   u16 grid_rows, u16 grid_cols
#   channels*grid_rows*grid_cols*edge*edge i16 coefficients, row-major
# all little-endian
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<BHHHHdd")
_GRID = struct.Struct("<HH")


def rep_to_bytes(rep: QuantizedRepresentation) -> bytes:
    e = rep.block_edge
    parts = [
        MAGIC,
        _HEADER.pack(MODES.index(rep.mode), rep.height, rep.width, rep.channels, e,
                     rep.table.quality, rep.bpp_estimate),
        rep.table.entries.astype("<f8").tobytes(),
        _GRID.pack(*rep.grid_shape),
        rep.coeffs.astype("<i2").tobytes(),
    ]
    return b"".join(parts)


def rep_from_bytes(data: bytes) -> QuantizedRepresentation:
    if not data.startswith(MAGIC):
        raise FormatError("not an SNEQ1 stream (bad magic)")
    try:
        off = len(MAGIC)
        mode_id, h, w, ch, e, quality, bpp = _HEADER.unpack_from(data, off)
        off += _HEADER.size
        table = np.frombuffer(data, "<f8", e * e, off).reshape(e, e)
        off += 8 * e * e
        rows, cols = _GRID.unpack_from(data, off)
        off += _GRID.size
        n = ch * rows * cols * e * e
        coeffs = np.frombuffer(data, "<i2", n, off).reshape(ch, rows, cols, e, e)
        off += 2 * n
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated SNEQ1 stream: {exc}") from exc
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after SNEQ1 payload")
    if mode_id >= len(MODES):
        raise FormatError(f"unknown mode id {mode_id}")
    mode = MODES[mode_id]
    if (rows, cols) != grid_dims(h, w, e, mode):
        raise FormatError("grid dims inconsistent with image dims")
    return QuantizedRepresentation(h, w, mode, QuantTable(table.copy(), quality),
                                   coeffs.astype(np.int16), bpp)


def save_rep(path, rep: QuantizedRepresentation) -> None:
    Path(path).write_bytes(rep_to_bytes(rep))


def load_rep(path) -> QuantizedRepresentation:
    return rep_from_bytes(Path(path).read_bytes())
