"""Deterministic synthetic signal generators.

Stand-ins for real corpora: a harmonic, amplitude-modulated "speech proxy"
and a bank of stationary texture recipes (band noise, impulse trains,
drones, ...). Every generator is a pure function of its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioError, DEFAULT_DURATION, DEFAULT_SAMPLE_RATE, Waveform, expected_length

SPEECH_RMS = 0.1
MAX_TEXTURE_CLASSES = 8
TEXTURE_SOURCE_DURATION = 10.0


@dataclass
class TextureClip:
    """A fixed-length crop out of a (synthetic or ingested) texture recording."""

    waveform: Waveform
    class_id: int
    source_id: str
    crop_offset: int


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def synth_speech_proxy(seed: int, duration: float = DEFAULT_DURATION,
                       sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Speech-like clip: pitched harmonics under a formant envelope, gated
    into syllable bursts with pauses. RMS is normalized to 0.1 exactly.
    """
    if duration <= 0:
        raise AudioError(f"duration must be positive, got {duration}")
    if sample_rate <= 0:
        raise AudioError(f"sample_rate must be positive, got {sample_rate}")
    rng = _rng(seed)
    n = expected_length(sample_rate, duration)

    # Source-filter model: glottal pulse train at a drifting pitch, shaped by
    # a fixed per-speaker formant envelope in the frequency domain, plus a
    # little aspiration noise through the same filter.
    f0_base = rng.uniform(90.0, 180.0)
    n_knots = max(4, int(duration * 3))
    knots = f0_base * (1.0 + 0.12 * rng.standard_normal(n_knots))
    f0 = np.interp(np.linspace(0, 1, n), np.linspace(0, 1, n_knots), knots)
    phase = np.cumsum(f0) / sample_rate
    pulses = np.zeros(n)
    pulses[np.flatnonzero(np.diff(np.floor(phase)) > 0) + 1] = 1.0

    formants = np.array([rng.uniform(300, 800), rng.uniform(900, 1800), rng.uniform(2000, 3200)])
    bandwidths = np.array([120.0, 180.0, 280.0])
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    envelope = np.full(freqs.shape, 0.05)
    for fc, bw in zip(formants, bandwidths):
        envelope += np.exp(-0.5 * ((freqs - fc) / bw) ** 2)
    envelope *= np.exp(-freqs / 4000.0)  # spectral tilt
    envelope[0] = 0.0
    source = np.fft.rfft(pulses) + 0.02 * np.fft.rfft(rng.standard_normal(n))
    sig = np.fft.irfft(source * envelope, n)

    # Syllable gate: ~4 Hz segments, each voiced with p=0.75, smoothed edges.
    seg_len = int(sample_rate * 0.22)
    n_seg = n // seg_len + 1
    gate_seg = (rng.random(n_seg) < 0.75).astype(np.float64)
    gate = np.repeat(gate_seg, seg_len)[:n]
    ramp = int(sample_rate * 0.02)
    kernel = np.hanning(2 * ramp + 1)
    gate = np.convolve(gate, kernel / kernel.sum(), mode="same")
    sig *= 0.15 + 0.85 * gate

    rms = np.sqrt(np.mean(sig**2))
    if rms <= 0:
        raise AudioError("degenerate speech proxy (zero energy)")
    return Waveform(sig * (SPEECH_RMS / rms), sample_rate)


def _band_noise(rng: np.random.Generator, n: int, sample_rate: int,
                f_lo: float, f_hi: float, edge: float = 100.0) -> np.ndarray:
    """White noise masked to [f_lo, f_hi] in the frequency domain with
    raised-cosine edges of width `edge` Hz."""
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    mask = np.zeros_like(freqs)
    core = (freqs >= f_lo) & (freqs <= f_hi)
    mask[core] = 1.0
    lo_ramp = (freqs >= f_lo - edge) & (freqs < f_lo)
    mask[lo_ramp] = 0.5 * (1 + np.cos(np.pi * (f_lo - freqs[lo_ramp]) / edge))
    hi_ramp = (freqs > f_hi) & (freqs <= f_hi + edge)
    mask[hi_ramp] = 0.5 * (1 + np.cos(np.pi * (freqs[hi_ramp] - f_hi) / edge))
    return np.fft.irfft(spec * mask, n)


def _impulse_train(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    """Periodic damped pings, machinery-style."""
    rate = rng.uniform(6.0, 13.0)
    ring_f = rng.uniform(400.0, 900.0)
    decay = rng.uniform(60.0, 120.0)
    period = int(sample_rate / rate)
    ring_len = int(sample_rate * 0.06)
    tt = np.arange(ring_len) / sample_rate
    ping = np.exp(-decay * tt) * np.sin(2 * np.pi * ring_f * tt)
    sig = np.zeros(n + ring_len)
    start = int(rng.uniform(0, period))
    for pos in range(start, n, period):
        sig[pos : pos + ring_len] += ping
    return sig[:n]


def _chirp_drone(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    """Slowly gliding low tones over a quiet low-noise bed, traffic-style."""
    sig = np.zeros(n)
    for _ in range(4):
        f_start = rng.uniform(80.0, 350.0)
        f_end = f_start * rng.uniform(0.7, 1.4)
        freq = np.linspace(f_start, f_end, n)
        sig += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * np.cumsum(freq) / sample_rate
                                              + rng.uniform(0, 2 * np.pi))
    sig += 0.4 * _band_noise(rng, n, sample_rate, 30.0, 250.0)
    return sig


def _tone_bursts(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    freq = rng.uniform(1000.0, 1500.0)
    rate = rng.uniform(2.0, 4.0)
    t = np.arange(n) / sample_rate
    gate = (np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)) > 0.3).astype(float)
    return np.sin(2 * np.pi * freq * t) * gate


def _crackle(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    density = rng.uniform(30.0, 80.0)  # impulses per second
    sig = np.zeros(n)
    count = int(density * n / sample_rate)
    pos = rng.integers(0, n, count)
    sig[pos] = rng.uniform(-1, 1, count)
    kernel = np.exp(-np.arange(64) / 8.0)
    return np.convolve(sig, kernel, mode="same")


def _warble(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    fc = rng.uniform(600.0, 900.0)
    wob = rng.uniform(4.0, 6.0)
    depth = rng.uniform(30.0, 80.0)
    t = np.arange(n) / sample_rate
    freq = fc + depth * np.sin(2 * np.pi * wob * t)
    return np.sin(2 * np.pi * np.cumsum(freq) / sample_rate)


# class_id -> (label, generator over (rng, n, sample_rate))
_TEXTURE_RECIPES = {
    0: ("band noise 2.2-3.8 kHz", lambda rng, n, sr: _band_noise(rng, n, sr, 2200.0, 3800.0)),
    1: ("periodic impulse train", _impulse_train),
    2: ("slow chirp drone", _chirp_drone),
    3: ("high hiss 5.5-7 kHz", lambda rng, n, sr: _band_noise(rng, n, sr, 5500.0, 7000.0)),
    4: ("tone bursts ~1.2 kHz", _tone_bursts),
    5: ("low rumble < 150 Hz", lambda rng, n, sr: _band_noise(rng, n, sr, 20.0, 150.0)),
    6: ("broadband crackle", _crackle),
    7: ("warbling tone", _warble),
}


def texture_source_id(class_id: int, source_seed: int) -> str:
    return f"syn:c{class_id}:s{source_seed}"


def synth_texture_source(class_id: int, source_seed: int,
                         duration: float = TEXTURE_SOURCE_DURATION,
                         sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """The full 'recording' for one texture source; crops are taken from it."""
    if class_id not in _TEXTURE_RECIPES:
        raise AudioError(f"unknown texture class_id {class_id}; "
                         f"supported: 0..{MAX_TEXTURE_CLASSES - 1}")
    rng = np.random.default_rng(np.random.SeedSequence(source_seed, spawn_key=(class_id,)))
    n = expected_length(sample_rate, duration)
    sig = _TEXTURE_RECIPES[class_id][1](rng, n, sample_rate)
    rms = np.sqrt(np.mean(sig**2))
    if rms <= 0:
        raise AudioError(f"degenerate texture (class {class_id}, seed {source_seed})")
    return Waveform(sig * (SPEECH_RMS / rms), sample_rate)


def synth_texture(class_id: int, seed: int, duration: float = DEFAULT_DURATION,
                  sample_rate: int = DEFAULT_SAMPLE_RATE, crop_offset: int | None = None) -> TextureClip:
    """A `duration`-long crop of the synthetic source for (class_id, seed).

    `crop_offset` defaults to a deterministic position derived from the seed.
    """
    source = synth_texture_source(class_id, seed, sample_rate=sample_rate)
    n = expected_length(sample_rate, duration)
    if n > len(source):
        raise AudioError(f"crop of {n} samples exceeds source length {len(source)}")
    if crop_offset is None:
        crop_offset = int(_rng(seed ^ 0x9E3779B9).integers(0, len(source) - n + 1))
    if crop_offset < 0 or crop_offset + n > len(source):
        raise AudioError(f"crop [{crop_offset}, {crop_offset + n}) outside source")
    wave = Waveform(source.samples[crop_offset : crop_offset + n].copy(), sample_rate)
    return TextureClip(wave, class_id, texture_source_id(class_id, seed), crop_offset)
