"""SNEC1 checkpoint container.

Layout (little-endian)::

    magic  b"SNEC1"
    u16    format version (1)
    u32    config byte length, then UTF-8 ``key=value`` lines (model config)
    u32    tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  flags (bit 0: optional, i.e. training-only co-estimator tensor)
        u32 rows, u32 cols
        rows*cols f64 values, row-major

Tensors are written in sorted name order so equal parameters give equal bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from sne.errors import CheckpointError, FormatError
from sne.estimator import SneConfig, is_co_tensor

MAGIC = b"SNEC1"
VERSION = 1
FLAG_OPTIONAL = 1


def format_kv(d: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def to_bytes(config: SneConfig, params: dict[str, np.ndarray], extra: dict[str, str] | None = None) -> bytes:
    meta = dict(config.to_dict())
    if extra:
        meta.update(extra)
    cfg = format_kv(meta).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.ndim != 2:
            raise CheckpointError(f"tensor {name} is not 2-D: {arr.shape}")
        raw = name.encode("utf-8")
        flags = FLAG_OPTIONAL if is_co_tensor(name) else 0
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BII", flags, *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> tuple[SneConfig, dict[str, np.ndarray], dict[str, str]]:
    """Returns (config, params, raw metadata)."""
    if not data.startswith(MAGIC):
        raise FormatError("not an SNEC1 checkpoint (bad magic)")
    try:
        off = len(MAGIC)
        version, cfg_len = struct.unpack_from("<HI", data, off)
        off += 6
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        meta = parse_kv(data[off:off + cfg_len].decode("utf-8"))
        off += cfg_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            _flags, rows, cols = struct.unpack_from("<BII", data, off)
            off += 9
            params[name] = np.frombuffer(data, "<f8", rows * cols, off).reshape(rows, cols).copy()
            off += 8 * rows * cols
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after checkpoint payload")
    return SneConfig.from_dict(meta), params, meta


def save_checkpoint(path, config: SneConfig, params: dict, extra: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(to_bytes(config, params, extra))


def load_checkpoint(path) -> tuple[SneConfig, dict[str, np.ndarray], dict[str, str]]:
    return from_bytes(Path(path).read_bytes())
