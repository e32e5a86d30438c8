"""Target patches, circular scan order, and near/far context selection with ghost padding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sne.codec import QuantizedRepresentation, as_channels, assemble_blocks, extract_blocks
from sne.errors import GeometryError, ParameterError

Offset = tuple[int, int]

SOURCE_OFFSETS: tuple[Offset, ...] = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
CO_OFFSETS: tuple[Offset, ...] = ((-2, -2), (-2, 0), (-2, 2), (0, -2))


@dataclass(frozen=True)
class ContextSpec:
    source_offsets: tuple[Offset, ...] = SOURCE_OFFSETS
    co_offsets: tuple[Offset, ...] = CO_OFFSETS

    def __post_init__(self):
        src = tuple(tuple(int(v) for v in o) for o in self.source_offsets)
        co = tuple(tuple(int(v) for v in o) for o in self.co_offsets)
        if len(src) != len(co) or not src:
            raise ParameterError("source and co-estimator need the same, non-zero, context count")
        if (0, 0) in src or (0, 0) in co:
            raise ParameterError("offset (0, 0) is the target itself and cannot be context")
        if set(src) & set(co):
            raise ParameterError(f"context offsets overlap: {sorted(set(src) & set(co))}")
        if len(set(src)) != len(src) or len(set(co)) != len(co):
            raise ParameterError("duplicate context offsets")
        object.__setattr__(self, "source_offsets", src)
        object.__setattr__(self, "co_offsets", co)

    @property
    def n(self) -> int:
        return len(self.source_offsets)

    def to_text(self, offsets) -> str:
        return ";".join(f"{dr},{dc}" for dr, dc in offsets)

    @staticmethod
    def parse_offsets(text: str) -> tuple[Offset, ...]:
        out = []
        for item in text.split(";"):
            item = item.strip()
            if item:
                dr, dc = item.split(",")
                out.append((int(dr), int(dc)))
        return tuple(out)


def scan_order(grid_rows: int, grid_cols: int) -> np.ndarray:
    """Interior patches in raster order, then the border clockwise from (0, 0).

    Returns flat indices ``r * grid_cols + c``.
    """
    if grid_rows < 1 or grid_cols < 1:
        raise GeometryError(f"grid dims must be positive, got {grid_rows}x{grid_cols}")
    R, C = grid_rows, grid_cols
    order = [r * C + c for r in range(1, R - 1) for c in range(1, C - 1)]
    ring = [(0, c) for c in range(C)]
    ring += [(r, C - 1) for r in range(1, R)]
    ring += [(R - 1, c) for c in range(C - 2, -1, -1)]
    ring += [(r, 0) for r in range(R - 2, 0, -1)]
    seen = set()
    for r, c in ring:
        if (r, c) not in seen:
            seen.add((r, c))
            order.append(r * C + c)
    return np.array(order, dtype=np.int64)


def is_border(r: int, c: int, grid_rows: int, grid_cols: int) -> bool:
    return r == 0 or c == 0 or r == grid_rows - 1 or c == grid_cols - 1


@dataclass(frozen=True)
class PatchGrid:
    """Target patches of one image plane.

    ``targets[i]`` is the flattened patch at raster position ``i``; a ring of
    all-zero ghost patches surrounds the grid and is materialized on demand
    by :meth:`patch`.
    """

    grid_rows: int
    grid_cols: int
    patch_edge: int
    mode: str
    height: int
    width: int
    targets: np.ndarray
    scan: np.ndarray

    @property
    def size(self) -> int:
        return self.grid_rows * self.grid_cols

    def position(self, idx: int) -> tuple[int, int]:
        return divmod(int(idx), self.grid_cols)

    def in_grid(self, r: int, c: int) -> bool:
        return 0 <= r < self.grid_rows and 0 <= c < self.grid_cols

    def patch(self, r: int, c: int) -> np.ndarray:
        if not self.in_grid(r, c):
            return np.zeros(self.patch_edge * self.patch_edge)
        return self.targets[r * self.grid_cols + c]

    def targets_in_scan(self) -> np.ndarray:
        return self.targets[self.scan]

    def reassemble(self, patches_in_scan: np.ndarray) -> np.ndarray:
        """Scan-ordered flat patches back to an (H, W) plane."""
        e = self.patch_edge
        raster = np.empty((self.size, e * e))
        raster[self.scan] = np.asarray(patches_in_scan).reshape(self.size, e * e)
        blocks = raster.reshape(self.grid_rows, self.grid_cols, e, e)
        return assemble_blocks(blocks, self.height, self.width, self.mode)


def build_grid(img, patch_edge: int, mode: str = "aligned", channel: int = 0) -> PatchGrid:
    plane = as_channels(img)[:, :, channel]
    blocks = extract_blocks(plane, patch_edge, mode)
    rows, cols = blocks.shape[:2]
    return PatchGrid(rows, cols, patch_edge, mode, plane.shape[0], plane.shape[1],
                     blocks.reshape(rows * cols, patch_edge * patch_edge),
                     scan_order(rows, cols))


def gather_blocks(rep: QuantizedRepresentation, positions: np.ndarray, offsets,
                  channel: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Quantized blocks at ``position + offset`` for many targets at once.

    ``positions`` are flat raster indices. Returns ``(blocks, ghost)`` with
    shapes (P, N, edge, edge) and (P, N); ghosts are zero blocks.
    """
    rows, cols = rep.grid_shape
    e = rep.block_edge
    pos = np.asarray(positions, dtype=np.int64)
    r, c = np.divmod(pos, cols)
    n = len(offsets)
    blocks = np.zeros((len(pos), n, e, e), dtype=np.int64)
    ghost = np.ones((len(pos), n), dtype=bool)
    plane = rep.coeffs[channel]
    for k, (dr, dc) in enumerate(offsets):
        rr, cc = r + dr, c + dc
        ok = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
        blocks[ok, k] = plane[rr[ok], cc[ok]]
        ghost[:, k] = ~ok
    return blocks, ghost


def context_for(grid: PatchGrid, rep: QuantizedRepresentation, target_idx: int,
                spec: ContextSpec, channel: int = 0):
    """Source and co-estimator contexts of one target (raster index).

    Returns ``(source_blocks, co_blocks, source_ghost, co_ghost)``.
    """
    if rep.grid_shape != (grid.grid_rows, grid.grid_cols):
        raise GeometryError(f"grid {grid.grid_rows}x{grid.grid_cols} vs "
                            f"representation grid {rep.grid_shape}")
    if not 0 <= target_idx < grid.size:
        raise IndexError(f"target index {target_idx} outside grid of {grid.size}")
    pos = np.array([target_idx])
    src, src_ghost = gather_blocks(rep, pos, spec.source_offsets, channel)
    co, co_ghost = gather_blocks(rep, pos, spec.co_offsets, channel)
    return src[0], co[0], src_ghost[0], co_ghost[0]
