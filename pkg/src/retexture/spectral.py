"""Log-mel analysis and Griffin-Lim resynthesis.

Frame convention: reflect-pad by n_fft // 2 on both ends and take frames at
offsets t*hop, so a clip of L samples yields exactly T = L // hop frames
(2.56 s at 16 kHz with hop 160 gives T = 256). Mel uses the HTK scale with
triangular filters renormalized to unit peak; energies are power (|.|^2)
with a natural-log floor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import Waveform

MEL_BREAK_HZ = 700.0
MEL_SCALE = 2595.0

# Fixed affine normalization applied by every model that consumes log-mels:
# (value + MEL_NORM_BIAS) / MEL_NORM_SCALE maps the working range
# [ln 1e-5, ~7] to roughly [-1.6, 3].
MEL_NORM_BIAS = 5.0
MEL_NORM_SCALE = 4.0


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralParams:
    n_fft: int = 1024
    hop: int = 160
    window: str = "hann"
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self) -> None:
        if self.hop > self.n_fft:
            raise SpectralError(f"hop {self.hop} exceeds n_fft {self.n_fft}")
        if self.hop <= 0 or self.n_fft <= 0:
            raise SpectralError("hop and n_fft must be positive")
        if self.n_mels < 8:
            raise SpectralError(f"n_mels must be >= 8, got {self.n_mels}")
        if self.f_min >= self.f_max:
            raise SpectralError(f"f_min {self.f_min} must be below f_max {self.f_max}")
        if self.window not in ("hann", "hamming"):
            raise SpectralError(f"unknown window {self.window!r}")
        if self.log_floor <= 0:
            raise SpectralError("log_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop


@dataclass
class MelSpectrogram:
    values: np.ndarray  # T x F natural-log power
    params: SpectralParams

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.params.n_mels:
            raise SpectralError(f"expected T x {self.params.n_mels}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise SpectralError("non-finite mel values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _window(params: SpectralParams) -> np.ndarray:
    n = np.arange(params.n_fft)
    if params.window == "hann":  # periodic
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / params.n_fft)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / params.n_fft)


def _frame(samples: np.ndarray, params: SpectralParams) -> np.ndarray:
    if samples.shape[0] < params.n_fft:
        raise SpectralError(f"waveform of {samples.shape[0]} samples shorter than "
                            f"n_fft {params.n_fft}")
    pad = params.n_fft // 2
    padded = np.pad(samples, pad, mode="reflect")
    n_frames = params.n_frames(samples.shape[0])
    idx = np.arange(params.n_fft)[None, :] + params.hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(wave: Waveform, params: SpectralParams = SpectralParams()) -> np.ndarray:
    """Windowed FFT frames, shape T x (n_fft // 2 + 1), complex."""
    frames = _frame(wave.samples, params) * _window(params)[None, :]
    return np.fft.rfft(frames, axis=1)


def istft(grid: np.ndarray, params: SpectralParams, n_samples: int) -> np.ndarray:
    """Weighted overlap-add inverse of `stft` for a clip of n_samples."""
    frames = np.fft.irfft(grid, params.n_fft, axis=1) * _window(params)[None, :]
    pad = params.n_fft // 2
    total = n_samples + 2 * pad
    num = np.zeros(total)
    den = np.zeros(total)
    idx = np.arange(params.n_fft)[None, :] + params.hop * np.arange(grid.shape[0])[:, None]
    np.add.at(num, idx, frames)
    np.add.at(den, idx, _window(params)[None, :] ** 2)
    den[den < 1e-10] = 1e-10
    return (num / den)[pad : pad + n_samples]


def hz_to_mel(f):
    return MEL_SCALE * np.log10(1.0 + np.asarray(f, dtype=np.float64) / MEL_BREAK_HZ)


def mel_to_hz(m):
    return MEL_BREAK_HZ * (10.0 ** (np.asarray(m, dtype=np.float64) / MEL_SCALE) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank_cached(params: SpectralParams, sample_rate: int) -> np.ndarray:
    if params.f_max > sample_rate / 2:
        raise SpectralError(f"f_max {params.f_max} above Nyquist {sample_rate / 2}")
    freqs = np.fft.rfftfreq(params.n_fft, 1.0 / sample_rate)
    mel_pts = np.linspace(hz_to_mel(params.f_min), hz_to_mel(params.f_max), params.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bank = np.zeros((params.n_mels, params.n_bins))
    for i in range(params.n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
        peak = bank[i].max()
        if peak <= 0:
            raise SpectralError(f"mel filter {i} is empty; n_fft too small for n_mels")
        bank[i] /= peak
    return bank


def mel_filterbank(params: SpectralParams, sample_rate: int = 16000) -> np.ndarray:
    """Triangular HTK-scale filters, F x (n_fft // 2 + 1), unit peak each."""
    return _mel_filterbank_cached(params, sample_rate)


def mel_spectrogram(wave: Waveform, params: SpectralParams = SpectralParams()) -> MelSpectrogram:
    """Natural-log mel power, floored at params.log_floor. T x F."""
    power = np.abs(stft(wave, params)) ** 2
    bank = mel_filterbank(params, wave.sample_rate)
    mel = power @ bank.T
    return MelSpectrogram(np.log(np.maximum(mel, params.log_floor)), params)


@lru_cache(maxsize=8)
def _nnls_operator(params: SpectralParams, sample_rate: int):
    bank = _mel_filterbank_cached(params, sample_rate)
    gram = bank.T @ bank
    step = 1.0 / np.linalg.eigvalsh(gram)[-1]
    return gram, step


def _nnls_frames(bank: np.ndarray, targets: np.ndarray, gram: np.ndarray,
                 step: float, iters: int = 120) -> np.ndarray:
    """Non-negative least squares ||bank @ p - target|| for every frame at
    once: projected gradient with Nesterov momentum, step 1/L."""
    p = np.maximum(np.linalg.lstsq(bank, targets.T, rcond=None)[0].T, 0.0)
    y = p.copy()
    t_prev = 1.0
    for _ in range(iters):
        grad = (y @ gram) - targets @ bank
        p_next = np.maximum(y - step * grad, 0.0)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_prev**2))
        y = p_next + ((t_prev - 1.0) / t_next) * (p_next - p)
        p, t_prev = p_next, t_next
    return p


def mel_to_power(m: MelSpectrogram, sample_rate: int = 16000) -> np.ndarray:
    """Pseudo-invert the filterbank back to a T x n_bins power grid."""
    bank = mel_filterbank(m.params, sample_rate)
    gram, step = _nnls_operator(m.params, sample_rate)
    return _nnls_frames(bank, np.exp(m.values), gram, step)


def griffin_lim(m: MelSpectrogram, iters: int = 64, sample_rate: int = 16000) -> Waveform:
    """Phase retrieval from a log-mel grid: NNLS mel inversion to linear
    magnitudes, then `iters` rounds of alternating projection with
    zero-phase init (fully deterministic)."""
    if iters < 1:
        raise SpectralError(f"iters must be >= 1, got {iters}")
    params = m.params
    n_samples = m.n_frames * params.hop
    magnitude = np.sqrt(mel_to_power(m, sample_rate))
    spec = magnitude.astype(np.complex128)
    for _ in range(iters):
        samples = istft(spec, params, n_samples)
        rebuilt = stft(Waveform(samples, sample_rate), params)
        scale = np.abs(rebuilt)
        scale[scale < 1e-12] = 1e-12
        spec = magnitude * (rebuilt / scale)
    return Waveform(istft(spec, params, n_samples), sample_rate)


GRID_MAGIC = b"RTGRID01"


def save_grid(path: str, values: np.ndarray) -> None:
    """Debug dump: magic, uint32 ndim, uint32 dims, little-endian float32."""
    arr = np.asarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_grid(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != GRID_MAGIC:
            raise SpectralError(f"{path} is not a grid dump")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(shape).astype(np.float64)
