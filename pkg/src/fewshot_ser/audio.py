"""WAV ingestion and MFCC extraction.

Front-end pipeline: pre-emphasis -> framing -> Hamming window -> power
spectrum -> triangular HTK-mel filterbank -> log with floor -> orthonormal
DCT-II. Defaults: 40 coefficients, 30 ms frames, 10 ms step, 512-point FFT.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

TARGET_RATE = 16000

_WINDOWS = {"hamming": np.hamming, "hann": np.hanning, "rect": np.ones}


class WavFormatError(ValueError):
    """Not a readable 16-bit PCM WAV file."""


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int = TARGET_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size == 0:
            raise ValueError("empty waveform")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MfccConfig:
    n_mfcc: int = 40
    frame_len: float = 0.030
    frame_step: float = 0.010
    n_fft: int = 512
    n_mels: int = 40
    log_floor: float = 1e-10
    preemphasis: float = 0.97
    window: str = "hamming"

    def __post_init__(self):
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must not exceed n_mels")
        if int(round(self.frame_len * TARGET_RATE)) > self.n_fft:
            raise ValueError("frame longer than FFT size")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}")


@dataclass
class FeatureClip:
    mfcc: np.ndarray  # (n_mfcc, T)
    emotion: str
    language: str
    source_id: str

    def __post_init__(self):
        self.mfcc = np.asarray(self.mfcc, dtype=np.float64)
        if self.mfcc.ndim != 2 or self.mfcc.shape[1] < 1:
            raise ValueError("mfcc must be (n_mfcc, T) with T >= 1")
        if not np.all(np.isfinite(self.mfcc)):
            raise ValueError("non-finite MFCC values")


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM WAV; downmix stereo by mean, resample to 16 kHz."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise WavFormatError(f"unsupported codec {wf.getcomptype()!r}")
            if wf.getsampwidth() != 2:
                raise WavFormatError(
                    f"only 16-bit PCM supported, got {8 * wf.getsampwidth()}-bit"
                )
            n_ch = wf.getnchannels()
            if n_ch not in (1, 2):
                raise WavFormatError(f"expected mono or stereo, got {n_ch} channels")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"malformed WAV file {path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_ch == 2:
        pcm = pcm.reshape(-1, 2).mean(axis=1)
    if rate != TARGET_RATE:
        n_out = int(round(pcm.size * TARGET_RATE / rate))
        t_in = np.arange(pcm.size) / rate
        t_out = np.arange(n_out) / TARGET_RATE
        pcm = np.interp(t_out, t_in, pcm)
    return Waveform(pcm, TARGET_RATE)


def save_wav(path, wave_out: Waveform) -> None:
    pcm = np.clip(wave_out.samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wave_out.sample_rate)
        wf.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, rate: int) -> np.ndarray:
    """Triangular HTK-mel filters (n_mels, n_fft//2 + 1), 0 Hz to Nyquist."""
    nyquist = rate / 2.0
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = np.arange(n_fft // 2 + 1) * rate / n_fft
    fb = np.zeros((n_mels, bins.size))
    for i in range(n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix (n, n)."""
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * j + 1) / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def frame_count(n_samples: int, cfg: MfccConfig, rate: int = TARGET_RATE) -> int:
    flen = int(round(cfg.frame_len * rate))
    step = int(round(cfg.frame_step * rate))
    if n_samples < flen:
        raise ValueError("clip shorter than one frame")
    return 1 + (n_samples - flen) // step


def mfcc(wave_in: Waveform, cfg: MfccConfig | None = None) -> np.ndarray:
    """(n_mfcc, T) coefficient matrix; T from the frame-count formula."""
    cfg = cfg or MfccConfig()
    rate = wave_in.sample_rate
    x = wave_in.samples
    flen = int(round(cfg.frame_len * rate))
    step = int(round(cfg.frame_step * rate))
    n_frames = frame_count(x.size, cfg, rate)
    pre = np.empty_like(x)
    pre[0] = x[0]
    pre[1:] = x[1:] - cfg.preemphasis * x[:-1]
    idx = np.arange(flen)[None, :] + step * np.arange(n_frames)[:, None]
    frames = pre[idx] * _WINDOWS[cfg.window](flen)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, rate)
    logmel = np.log(np.maximum(power @ fb.T, cfg.log_floor))
    coeffs = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.n_mfcc]
    return coeffs.T.copy()


def cepstral_mean_normalize(coeffs: np.ndarray) -> np.ndarray:
    """Subtract the per-coefficient mean over time."""
    return coeffs - coeffs.mean(axis=1, keepdims=True)


def pad_or_crop(coeffs: np.ndarray, t_fixed: int) -> np.ndarray:
    """Fix the time axis: pad with per-coefficient means, center crop."""
    t = coeffs.shape[1]
    if t == t_fixed:
        return coeffs.copy()
    if t > t_fixed:
        start = (t - t_fixed) // 2
        return coeffs[:, start : start + t_fixed].copy()
    pad = np.tile(coeffs.mean(axis=1, keepdims=True), (1, t_fixed - t))
    return np.concatenate([coeffs, pad], axis=1)


# ---------------------------------------------------------------------------
# per-clip feature cache: header of two little-endian uint32 (rows, cols)
# followed by row-major little-endian float64 data


def save_features(path, coeffs: np.ndarray) -> None:
    rows, cols = coeffs.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(coeffs, dtype="<f8").tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ValueError(f"truncated feature file {path}")
        rows, cols = struct.unpack("<II", header)
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"feature file {path} size mismatch")
    return data.reshape(rows, cols).copy()
