"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic       8 bytes   b"DMPSCKPT"
    version     u32
    digest      32 bytes  SHA-256 of the run config JSON
    config_len  u32, then config_len bytes of UTF-8 JSON
    count       u32
    count x [name_len u16, name, rows u32, cols u32, rows*cols float64 LE]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .config import RunConfig

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"DMPSCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamStore, config: RunConfig) -> None:
    cfg_blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        bytes.fromhex(config.digest()),
        struct.pack("<I", len(cfg_blob)),
        cfg_blob,
        struct.pack("<I", len(params)),
    ]
    for name, t in params.items():
        raw = name.encode()
        rows, cols = t.shape
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ParamStore, RunConfig]:
    """Read a checkpoint; the file is opened read-only and never modified."""
    blob = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = take(32).hex()
    (cfg_len,) = struct.unpack("<I", take(4))
    config = RunConfig.from_dict(json.loads(take(cfg_len)))
    if config.digest() != digest:
        raise CheckpointError(f"{path}: config hash mismatch")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
        arrays[name] = data.astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes")
    return ParamStore(arrays), config
