"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CVFM"
    u32  format version
    u32  x len(CONFIG_FIELDS)   model config, in CONFIG_FIELDS order
    u32  tensor count
    per tensor:
        u32 name length, UTF-8 name
        u32 rank, u64 x rank dims
        f32 x prod(dims) values, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig

MAGIC = b"CVFM"
VERSION = 1
# N and d_k are derived but stored so readers need no model code
CONFIG_FIELDS = (
    "M", "P", "N", "d_model", "num_heads", "d_k", "r", "L", "num_classes", "fusion_every",
    "use_roi", "use_conn", "use_cross", "weighted_conn",
)


class CheckpointError(ValueError):
    pass


def _config_values(config: ModelConfig) -> list[int]:
    return [int(getattr(config, name)) for name in CONFIG_FIELDS]


def save_checkpoint(path: str | Path, config: ModelConfig, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += struct.pack(f"<{len(CONFIG_FIELDS)}I", *_config_values(config))
    out += struct.pack("<I", len(tensors))
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    path.write_bytes(bytes(out))
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def unpack(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        values = struct.unpack_from(fmt, buf, pos)
        pos += size
        return values

    (version,) = unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    raw = dict(zip(CONFIG_FIELDS, unpack(f"<{len(CONFIG_FIELDS)}I")))
    derived = {"N": raw.pop("N"), "d_k": raw.pop("d_k")}
    for flag in ("use_roi", "use_conn", "use_cross", "weighted_conn"):
        raw[flag] = bool(raw[flag])
    config = ModelConfig(**raw)
    if (config.N, config.d_k) != (derived["N"], derived["d_k"]):
        raise CheckpointError(f"{path}: stored N/d_k disagree with config")

    (count,) = unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = unpack("<I")
        name = buf[pos:pos + length].decode("utf-8")
        pos += length
        (rank,) = unpack("<I")
        dims = unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims, dtype=np.int64))
        if pos + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, tensors
