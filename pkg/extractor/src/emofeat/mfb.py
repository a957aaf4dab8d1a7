"""Mel-filterbank + pitch baseline features.

40 log mel-filterbank energies from 25 ms Hann windows at a 20 ms hop,
appended with pitch, pitch-delta, and voicing for a 43-dimensional frame.
Pitch and voicing come from a normalized autocorrelation over a 40 ms
window (25 ms is too short to resolve the 60 Hz end of the search band),
searched in 60-400 Hz.
"""

from __future__ import annotations

import numpy as np

N_MELS = 40
DIM = 43
WINDOW_S = 0.025
HOP_S = 0.020
PITCH_WINDOW_S = 0.040
PITCH_FMIN = 60.0
PITCH_FMAX = 400.0
ENERGY_FLOOR = 1e-10
SILENCE_RMS = 1e-5


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sr: int,
                   f_lo: float = 20.0) -> np.ndarray:
    """[n_mels, n_fft//2+1] triangular filters on the HTK mel scale."""
    f_hi = sr / 2.0
    mel_pts = np.linspace(_hz_to_mel(f_lo), _hz_to_mel(f_hi), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bins = np.floor((n_fft + 1) * hz_pts / sr).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = bins[m], bins[m + 1], bins[m + 2]
        for k in range(lo, mid):
            if mid > lo:
                fb[m, k] = (k - lo) / (mid - lo)
        for k in range(mid, hi):
            if hi > mid:
                fb[m, k] = (hi - k) / (hi - mid)
    return fb


def frame_count(n_samples: int, sr: int) -> int:
    win = int(round(WINDOW_S * sr))
    hop = int(round(HOP_S * sr))
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def _frames(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = (len(samples) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def _pitch_track(samples: np.ndarray, sr: int, centers: np.ndarray,
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Autocorrelation pitch and voicing at the given sample positions."""
    pw = int(round(PITCH_WINDOW_S * sr))
    lag_min = int(np.floor(sr / PITCH_FMAX))
    lag_max = int(np.ceil(sr / PITCH_FMIN))
    lag_max = min(lag_max, pw - 1)
    half = pw // 2
    padded = np.pad(samples, (half, half + 1))
    n = len(centers)
    seg = np.empty((n, pw))
    for i, c in enumerate(centers):
        seg[i] = padded[c:c + pw]
    seg = seg - seg.mean(axis=1, keepdims=True)
    nfft = 1 << int(np.ceil(np.log2(2 * pw)))
    spec = np.fft.rfft(seg, nfft, axis=1)
    corr = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, :lag_max + 1]
    r0 = corr[:, 0]
    quiet = r0 < (SILENCE_RMS ** 2) * pw
    r0 = np.where(quiet, 1.0, r0)
    rho = corr[:, lag_min:lag_max + 1] / r0[:, None]
    best = np.argmax(rho, axis=1)
    peak = rho[np.arange(n), best]
    voicing = np.clip(np.where(quiet, 0.0, peak), 0.0, 1.0)
    pitch = np.where(quiet, 0.0, sr / (best + lag_min))
    pitch = np.where(voicing > 0.0, pitch, 0.0)
    return pitch, voicing


def extract_mfb_f0(samples: np.ndarray, sr: int) -> np.ndarray:
    """[T, 43] float32: 40 log-MFB energies + pitch, pitch-delta, voicing."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("expected mono samples")
    win = int(round(WINDOW_S * sr))
    hop = int(round(HOP_S * sr))
    if len(samples) < win:
        raise ValueError(
            f"audio is shorter ({len(samples)} samples) than one "
            f"{WINDOW_S * 1000:.0f} ms analysis window")
    frames = _frames(samples, win, hop)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    n_fft = 1 << int(np.ceil(np.log2(win)))
    spec = np.abs(np.fft.rfft(frames * window, n_fft, axis=1)) ** 2
    fb = mel_filterbank(N_MELS, n_fft, sr)
    mfb = np.log(np.maximum(spec @ fb.T, ENERGY_FLOOR))

    centers = hop * np.arange(frames.shape[0]) + win // 2
    pitch, voicing = _pitch_track(samples, sr, centers)
    delta = np.diff(pitch, prepend=pitch[:1])

    out = np.concatenate(
        [mfb, pitch[:, None], delta[:, None], voicing[:, None]], axis=1)
    assert out.shape[1] == DIM
    return out.astype(np.float32)
