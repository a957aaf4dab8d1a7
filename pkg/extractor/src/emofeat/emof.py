"""Writer/reader for the EMOF feature-file wire format.

Layout: magic "EMOF" | version u32 | dim u32 | frames u32 |
frame_period_ms f64 | frames x dim float32 row-major, all little-endian.
This mirrors the consumer's reader byte for byte; conformance is pinned by
the cross-package round-trip test.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMOF"
VERSION = 1


class EmofError(Exception):
    pass


def write_emof(path, data: np.ndarray, frame_period_ms: float = 20.0) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ValueError(f"feature matrix must be non-empty 2-D, got {data.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, data.shape[1], data.shape[0]))
        f.write(struct.pack("<d", float(frame_period_ms)))
        f.write(data.tobytes())


def read_emof(path) -> tuple[np.ndarray, float]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise EmofError(f"{path}: bad magic")
    version, dim, frames = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise EmofError(f"{path}: unsupported version {version}")
    (period,) = struct.unpack("<d", raw[16:24])
    expected = 24 + 4 * dim * frames
    if len(raw) != expected:
        raise EmofError(f"{path}: size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw[24:], dtype="<f4").reshape(frames, dim)
    return data.copy(), period
