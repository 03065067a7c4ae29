"""Mono waveform container and 16-bit PCM WAV I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

DEFAULT_SAMPLE_RATE = 16_000
DEFAULT_DURATION = 2.56


class AudioError(ValueError):
    """Raised for malformed or inconsistent audio data."""


@dataclass
class Waveform:
    """A fixed-rate mono clip, float samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples))))

    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0

    def power(self) -> float:
        return float(np.mean(np.square(self.samples)))

    def copy(self) -> "Waveform":
        return Waveform(self.samples.copy(), self.sample_rate)


def expected_length(sample_rate: int, duration: float) -> int:
    return int(round(sample_rate * duration))


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write as RIFF 16-bit PCM mono. Samples are clipped to [-1, 1] first."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, pcm)


def read_wav(path: str | Path) -> Waveform:
    """Read a WAV file to float64 in [-1, 1]; stereo input is averaged to mono."""
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:  # scipy raises bare ValueError on corrupt files
        raise AudioError(f"cannot read WAV file {path}: {exc}") from exc
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32767.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483647.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 127.0
    else:
        samples = data.astype(np.float64)
    return Waveform(np.clip(samples, -1.0, 1.0), int(rate))


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase resampling to `target_rate`."""
    if target_rate <= 0:
        raise AudioError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w.copy()
    ratio = Fraction(target_rate, w.sample_rate)
    out = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(np.asarray(out, dtype=np.float64), target_rate)


def fit_length(w: Waveform, n: int) -> Waveform:
    """Trim or zero-pad to exactly `n` samples."""
    if len(w) >= n:
        return Waveform(w.samples[:n].copy(), w.sample_rate)
    out = np.zeros(n, dtype=np.float64)
    out[: len(w)] = w.samples
    return Waveform(out, w.sample_rate)


def pure_tone(freq: float, duration: float, sample_rate: int = DEFAULT_SAMPLE_RATE,
              amplitude: float = 0.5) -> Waveform:
    n = expected_length(sample_rate, duration)
    t = np.arange(n) / sample_rate
    return Waveform(amplitude * np.sin(2.0 * math.pi * freq * t), sample_rate)
