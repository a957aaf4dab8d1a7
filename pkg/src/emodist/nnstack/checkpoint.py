"""Binary checkpoint of named float64 tensors.

Layout (all integers little-endian u32):
    magic "EMOW" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | row-major
    64-bit little-endian values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["save_tensors", "load_tensors", "CheckpointError"]

MAGIC = b"EMOW"
VERSION = 1


class CheckpointError(Exception):
    """Malformed or truncated checkpoint file."""


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            n = int(np.prod(dims)) if rank else 1
            raw = _read_exact(f, 8 * n, f"tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        return tensors
