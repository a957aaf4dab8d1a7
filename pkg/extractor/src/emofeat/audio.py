"""Minimal mono WAV reading (PCM 16/32-bit and float32)."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np


class AudioError(Exception):
    pass


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return (samples as float64 in [-1, 1], sample_rate). Multi-channel
    audio is rejected: the corpus convention is single-speaker mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except (OSError, wave.Error, EOFError) as e:
        raise AudioError(f"cannot read {path}: {e}") from e
    if channels != 1:
        raise AudioError(f"{path}: expected mono audio, got {channels} channels")
    if width == 2:
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 4:
        samples = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raise AudioError(f"{path}: unsupported sample width {width} bytes")
    return samples, rate
