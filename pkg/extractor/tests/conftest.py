import wave
from pathlib import Path

import numpy as np
import pytest


def write_wav(path: Path, samples: np.ndarray, sr: int = 16000) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(samples, -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sr)
        w.writeframes(pcm.tobytes())
    return path


@pytest.fixture
def wav_writer(tmp_path):
    def make(name, samples, sr=16000):
        return write_wav(tmp_path / name, samples, sr)
    return make


@pytest.fixture
def tone():
    def make(freq, seconds=1.0, sr=16000, amp=0.5):
        t = np.arange(int(seconds * sr)) / sr
        return amp * np.sin(2 * np.pi * freq * t)
    return make
